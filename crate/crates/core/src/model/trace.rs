use serde::{Deserialize, Serialize};

use crate::model::{Forward, ModelConfig};
use crate::tape::Tape;

/// Attention distributions for one sample. Ablated attentions are reported
/// as uniform distributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub communities: usize,
    pub window: usize,
    pub locations: usize,
    /// `[K×w×L]` spatial weights.
    pub alpha: Vec<f64>,
    /// `[K×w]` global temporal weights.
    pub beta: Vec<f64>,
    /// `[w]` local temporal weights.
    pub delta: Vec<f64>,
    /// `[K]` community weights.
    pub gamma: Vec<f64>,
}

impl AttentionTrace {
    pub(crate) fn collect(tape: &Tape, fwd: &Forward, config: &ModelConfig, batch: usize) -> Vec<Self> {
        let (k, w, l) = (config.communities, config.window, config.num_locations);
        let alpha: Vec<f64> = if fwd.alpha.is_empty() {
            vec![1.0 / l as f64; k * w * l]
        } else {
            fwd.alpha.iter().flat_map(|&a| tape.value(a).iter().copied()).collect()
        };
        (0..batch)
            .map(|b| {
                let row = |v, width: usize| tape.value(v)[b * width..(b + 1) * width].to_vec();
                let beta = if fwd.beta.is_empty() {
                    vec![1.0 / w as f64; k * w]
                } else {
                    fwd.beta.iter().flat_map(|&v| row(v, w)).collect()
                };
                let delta = fwd.delta.map_or_else(|| vec![1.0 / w as f64; w], |v| row(v, w));
                let gamma = fwd.gamma.map_or_else(|| vec![1.0 / k as f64; k], |v| row(v, k));
                Self {
                    communities: k,
                    window: w,
                    locations: l,
                    alpha: alpha.clone(),
                    beta,
                    delta,
                    gamma,
                }
            })
            .collect()
    }

    pub fn alpha_at(&self, k: usize, step: usize) -> &[f64] {
        let l = self.locations;
        let start = (k * self.window + step) * l;
        &self.alpha[start..start + l]
    }

    pub fn beta_of(&self, k: usize) -> &[f64] {
        &self.beta[k * self.window..(k + 1) * self.window]
    }

    /// Time-averaged spatial weights `[K×L]`: the membership matrix of this sample.
    pub fn memberships(&self) -> Vec<f64> {
        let (k, w, l) = (self.communities, self.window, self.locations);
        let mut out = vec![0.0; k * l];
        for c in 0..k {
            for step in 0..w {
                for (o, a) in out[c * l..(c + 1) * l].iter_mut().zip(self.alpha_at(c, step)) {
                    *o += a / w as f64;
                }
            }
        }
        out
    }

    /// Every distribution (each α row, each β_k, δ, γ), for invariant checks.
    pub fn distributions(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for c in 0..self.communities {
            for step in 0..self.window {
                out.push(self.alpha_at(c, step));
            }
            out.push(self.beta_of(c));
        }
        out.push(&self.delta);
        if self.communities > 0 {
            out.push(&self.gamma);
        }
        out
    }
}
