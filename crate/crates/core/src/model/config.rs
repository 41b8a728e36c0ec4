use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Component switches for the ablation variants. `no_gl` and `no_ortho`
/// act on the objective, the rest on the architecture.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ablation {
    #[serde(default)]
    pub no_gl: bool,
    #[serde(default)]
    pub no_ortho: bool,
    /// Spatial attention replaced by concatenating all locations' features.
    #[serde(default)]
    pub no_sa: bool,
    /// Temporal attention (local and global) replaced by concatenating hidden states.
    #[serde(default)]
    pub no_ta: bool,
    /// Community attention replaced by concatenating community vectors.
    #[serde(default)]
    pub no_ca: bool,
    /// Static features dropped; the location embedding stays.
    #[serde(default)]
    pub no_sc: bool,
}

impl Ablation {
    pub const VARIANTS: [&'static str; 6] = ["noGL", "noOrtho", "noSA", "noTA", "noCA", "noSC"];

    pub fn variant(name: &str) -> Option<Self> {
        let mut a = Self::default();
        match name {
            "noGL" => a.no_gl = true,
            "noOrtho" => a.no_ortho = true,
            "noSA" => a.no_sa = true,
            "noTA" => a.no_ta = true,
            "noCA" => a.no_ca = true,
            "noSC" => a.no_sc = true,
            "full" | "CASTNet" => {}
            _ => return None,
        }
        Some(a)
    }

    pub fn label(&self) -> String {
        let names: Vec<_> = [
            (self.no_gl, "noGL"),
            (self.no_ortho, "noOrtho"),
            (self.no_sa, "noSA"),
            (self.no_ta, "noTA"),
            (self.no_ca, "noCA"),
            (self.no_sc, "noSC"),
        ]
        .into_iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| n)
        .collect();
        if names.is_empty() {
            "full".into()
        } else {
            names.join("+")
        }
    }
}

/// Fixed affine map applied to the head output, `ŷ = shift + scale·(Wz + b)`,
/// so the trainable head works on a unit scale whatever the count magnitude.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputScale {
    pub shift: f64,
    pub scale: f64,
}

impl Default for OutputScale {
    fn default() -> Self {
        Self { shift: 0.0, scale: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_locations: usize,
    pub num_features: usize,
    pub num_static: usize,
    pub window: usize,
    /// Number of community blocks; 0 drops the global component.
    pub communities: usize,
    pub hidden: usize,
    pub local_hidden: usize,
    pub static_hidden: usize,
    pub dropout: f64,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub output: OutputScale,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_locations", self.num_locations),
            ("num_features", self.num_features),
            ("window", self.window),
            ("hidden", self.hidden),
            ("local_hidden", self.local_hidden),
            ("static_hidden", self.static_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.num_static == 0 && !self.ablation.no_sc {
            return Err(Error::Config("static component needs at least one static feature".into()));
        }
        if !self.output.shift.is_finite() || !(self.output.scale.is_finite() && self.output.scale > 0.0) {
            return Err(Error::Config("output scale must be positive and finite".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }

    /// Width of one community vector.
    pub fn community_dim(&self) -> usize {
        if self.ablation.no_ta {
            self.window * self.hidden
        } else {
            self.hidden
        }
    }

    pub fn global_dim(&self) -> usize {
        match self.communities {
            0 => 0,
            k if self.ablation.no_ca => k * self.community_dim(),
            _ => self.community_dim(),
        }
    }

    pub fn local_dim(&self) -> usize {
        if self.ablation.no_ta {
            self.window * self.local_hidden
        } else {
            self.local_hidden
        }
    }

    /// Width of the static output: embedding plus optional static latent.
    pub fn static_dim(&self) -> usize {
        self.hidden + if self.ablation.no_sc { 0 } else { self.static_hidden }
    }

    pub fn head_dim(&self) -> usize {
        self.global_dim() + self.local_dim() + self.static_dim()
    }

    /// Input width of each community LSTM.
    pub fn global_input_dim(&self) -> usize {
        if self.ablation.no_sa {
            self.num_locations * self.num_features
        } else {
            self.num_features
        }
    }
}
