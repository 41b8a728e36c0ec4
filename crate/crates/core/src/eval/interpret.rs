//! Community memberships, community contributions and input-feature importance.

use serde::{Deserialize, Serialize};

use crate::data::samples::{SampleRef, SampleSplits};
use crate::error::{Error, Result};
use crate::model::{CastNet, InputComponent};

/// `[K×L]` spatial weights averaged over window steps and samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MembershipMatrix {
    pub communities: usize,
    pub locations: usize,
    pub values: Vec<f64>,
}

impl MembershipMatrix {
    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.locations..(k + 1) * self.locations]
    }

    pub fn to_csv(&self, location_names: &[String]) -> String {
        let mut out = String::from("community");
        for name in location_names {
            out.push(',');
            out.push_str(&csv_field(name));
        }
        out.push('\n');
        for k in 0..self.communities {
            out.push_str(&format!("community{k}"));
            for v in self.row(k) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// `[L×K]` community weights averaged over the samples of each target location.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContributionMatrix {
    pub locations: usize,
    pub communities: usize,
    pub values: Vec<f64>,
    /// Samples behind each row; rows with 0 samples hold a uniform row.
    pub counts: Vec<usize>,
}

impl ContributionMatrix {
    pub fn row(&self, d: usize) -> &[f64] {
        &self.values[d * self.communities..(d + 1) * self.communities]
    }

    pub fn to_csv(&self, location_names: &[String]) -> String {
        let mut out = String::from("location");
        for k in 0..self.communities {
            out.push_str(&format!(",community{k}"));
        }
        out.push_str(",samples\n");
        for (d, name) in location_names.iter().enumerate().take(self.locations) {
            out.push_str(&csv_field(name));
            for v in self.row(d) {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{}\n", self.counts[d]));
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Membership and contribution averages over `samples` in one eval-mode pass.
pub fn export_attention(
    model: &CastNet,
    splits: &SampleSplits,
    samples: &[SampleRef],
) -> Result<(MembershipMatrix, ContributionMatrix)> {
    if samples.is_empty() {
        return Err(Error::contract("interpretation needs at least one sample"));
    }
    let (k, l) = (model.config.communities, model.config.num_locations);
    let mut membership = vec![0.0; k * l];
    let mut contribution = vec![0.0; l * k];
    let mut counts = vec![0usize; l];
    // Dropout is off in eval mode, so this rng is never drawn from.
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    for batch in splits.panel.window_batches(samples) {
        let (_, traces) = model.predict_batch(&batch, false, &mut rng)?;
        for (trace, &d) in traces.iter().zip(&batch.targets) {
            for (m, v) in membership.iter_mut().zip(trace.memberships()) {
                *m += v;
            }
            for (c, g) in contribution[d * k..(d + 1) * k].iter_mut().zip(&trace.gamma) {
                *c += g;
            }
            counts[d] += 1;
        }
    }
    let total = samples.len() as f64;
    membership.iter_mut().for_each(|m| *m /= total);
    for d in 0..l {
        let row = &mut contribution[d * k..(d + 1) * k];
        if counts[d] == 0 {
            row.iter_mut().for_each(|v| *v = 1.0 / k as f64);
        } else {
            row.iter_mut().for_each(|v| *v /= counts[d] as f64);
        }
    }
    Ok((
        MembershipMatrix {
            communities: k,
            locations: l,
            values: membership,
        },
        ContributionMatrix {
            locations: l,
            communities: k,
            values: contribution,
            counts,
        },
    ))
}

/// Mean absolute input weight per feature group of one regularized matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentImportance {
    pub component: InputComponent,
    pub importance: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub dynamic_names: Vec<String>,
    pub static_names: Vec<String>,
    pub components: Vec<ComponentImportance>,
}

/// Per-feature mean |w| over the matrices with Group Lasso groups. When the
/// community input is the flattened `[L·n]` vector, the columns of a feature
/// across all locations form its group.
pub fn export_feature_importance(model: &CastNet, dynamic_names: &[String], static_names: &[String]) -> Result<FeatureImportance> {
    let (n, ns) = (model.config.num_features, model.config.num_static);
    if dynamic_names.len() != n || static_names.len() != ns {
        return Err(Error::contract("feature names do not match the model's input widths"));
    }
    let components = model
        .group_lasso_matrices()
        .into_iter()
        .map(|(component, id)| {
            let t = model.params.get(id);
            let (rows, cols) = (t.rows(), t.cols());
            let groups = if matches!(component, InputComponent::Static) { ns } else { n };
            let mut sums = vec![0.0; groups];
            let mut sizes = vec![0usize; groups];
            for r in 0..rows {
                for c in 0..cols {
                    sums[c % groups] += t.values()[r * cols + c].abs();
                    sizes[c % groups] += 1;
                }
            }
            let importance = sums.iter().zip(&sizes).map(|(s, &z)| s / z.max(1) as f64).collect();
            ComponentImportance { component, importance }
        })
        .collect();
    Ok(FeatureImportance {
        dynamic_names: dynamic_names.to_vec(),
        static_names: static_names.to_vec(),
        components,
    })
}

impl FeatureImportance {
    /// Per dynamic feature, the mean importance over the local and every
    /// community component.
    pub fn dynamic_importance(&self) -> Vec<f64> {
        let dynamic: Vec<_> = self
            .components
            .iter()
            .filter(|c| !matches!(c.component, InputComponent::Static))
            .collect();
        let mut out = vec![0.0; self.dynamic_names.len()];
        for c in &dynamic {
            for (o, v) in out.iter_mut().zip(&c.importance) {
                *o += v / dynamic.len() as f64;
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("component,feature,importance\n");
        for c in &self.components {
            let (label, names) = match c.component {
                InputComponent::Community(k) => (format!("community{k}"), &self.dynamic_names),
                InputComponent::Local => ("local".to_string(), &self.dynamic_names),
                InputComponent::Static => ("static".to_string(), &self.static_names),
            };
            for (name, v) in names.iter().zip(&c.importance) {
                out.push_str(&format!("{label},{},{v}\n", csv_field(name)));
            }
        }
        out
    }
}
