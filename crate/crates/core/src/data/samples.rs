//! Sliding-window samples, chronological splits and z-score standardization.

use serde::{Deserialize, Serialize};

use crate::data::panel::PanelDataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.75,
            val: 0.10,
            test: 0.15,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions {parts:?} must lie in [0,1] and sum to 1"
            )));
        }
        Ok(())
    }

    /// Number of time indices per split; train and val are rounded, test takes the rest.
    pub fn counts(&self, total: usize) -> (usize, usize, usize) {
        let train = ((self.train * total as f64).round() as usize).min(total);
        let val = ((self.val * total as f64).round() as usize).min(total - train);
        (train, val, total - train - val)
    }
}

/// Per-feature mean/std computed on the training span.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub dynamic_mean: Vec<f64>,
    pub dynamic_std: Vec<f64>,
    pub static_mean: Vec<f64>,
    pub static_std: Vec<f64>,
    /// Last week index whose features entered the statistics.
    pub last_week: usize,
}

const MIN_STD: f64 = 1e-12;

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (sum, count) = values.clone().fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        return (0.0, 1.0);
    }
    let mean = sum / count as f64;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / count as f64;
    let std = var.sqrt();
    (mean, if std < MIN_STD { 1.0 } else { std })
}

impl Standardization {
    /// Statistics over weeks `0..=last_week` (all locations) and over locations for statics.
    pub fn fit(panel: &PanelDataset, last_week: usize) -> Self {
        let (n, ns, l) = (panel.num_features(), panel.num_static(), panel.num_locations);
        let rows = (last_week + 1) * l;
        let mut dynamic_mean = Vec::with_capacity(n);
        let mut dynamic_std = Vec::with_capacity(n);
        for f in 0..n {
            let (m, s) = mean_std((0..rows).map(|r| panel.dynamic[r * n + f]));
            dynamic_mean.push(m);
            dynamic_std.push(s);
        }
        let mut static_mean = Vec::with_capacity(ns);
        let mut static_std = Vec::with_capacity(ns);
        for f in 0..ns {
            let (m, s) = mean_std((0..l).map(|r| panel.statics[r * ns + f]));
            static_mean.push(m);
            static_std.push(s);
        }
        Self {
            dynamic_mean,
            dynamic_std,
            static_mean,
            static_std,
            last_week,
        }
    }

    fn apply(values: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
        let n = mean.len();
        values
            .iter()
            .enumerate()
            .map(|(i, v)| (v - mean[i % n]) / std[i % n])
            .collect()
    }
}

/// A standardized panel from which samples are cut. Targets stay raw counts.
#[derive(Clone, Debug)]
pub struct PreparedPanel {
    pub window: usize,
    pub lead: usize,
    pub num_weeks: usize,
    pub num_locations: usize,
    pub num_features: usize,
    pub num_static: usize,
    pub dynamic: Vec<f64>,
    pub statics: Vec<f64>,
    pub targets: Vec<f64>,
    pub proximity: Vec<f64>,
}

/// Identifies one sample: observation window ends at week `t`, target location `d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleRef {
    pub t: usize,
    pub d: usize,
}

/// A fully materialized training instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[w×L×n]`
    pub global: Vec<f64>,
    /// `[w×n]`
    pub local: Vec<f64>,
    pub statics: Vec<f64>,
    pub one_hot: Vec<f64>,
    pub proximity: Vec<f64>,
    pub target: f64,
    pub t: usize,
    pub d: usize,
}

/// All targets sharing one observation window. Global dynamics are stored
/// once as `[w·L×n]` (step-major) since they do not depend on the target.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    pub t: usize,
    pub window: usize,
    pub num_locations: usize,
    pub num_features: usize,
    pub global: Vec<f64>,
    pub targets: Vec<usize>,
    /// `[B×n_s]`
    pub statics: Vec<f64>,
    /// `[B×L]`
    pub proximity: Vec<f64>,
    pub y: Vec<f64>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn from_sample(sample: &Sample, num_locations: usize, num_features: usize) -> Result<Self> {
        let (l, n) = (num_locations, num_features);
        if sample.one_hot.len() != l || sample.proximity.len() != l {
            return Err(Error::contract("sample location vectors do not match L"));
        }
        let hot: Vec<_> = sample.one_hot.iter().enumerate().filter(|(_, v)| **v != 0.0).collect();
        if hot.len() != 1 || *hot[0].1 != 1.0 {
            return Err(Error::contract("location one-hot must contain exactly one 1"));
        }
        let d = hot[0].0;
        let w = if n == 0 { 0 } else { sample.local.len() / n };
        if w == 0 || sample.local.len() != w * n || sample.global.len() != w * l * n {
            return Err(Error::contract("sample windows are inconsistent with L and n"));
        }
        Ok(Self {
            t: sample.t,
            window: w,
            num_locations: l,
            num_features: n,
            global: sample.global.clone(),
            targets: vec![d],
            statics: sample.statics.clone(),
            proximity: sample.proximity.clone(),
            y: vec![sample.target],
        })
    }

    pub fn local(&self, step: usize, b: usize) -> &[f64] {
        let (l, n) = (self.num_locations, self.num_features);
        let start = (step * l + self.targets[b]) * n;
        &self.global[start..start + n]
    }
}

impl PreparedPanel {
    fn global_window(&self, t: usize) -> &[f64] {
        let row = self.num_locations * self.num_features;
        &self.dynamic[(t + 1 - self.window) * row..(t + 1) * row]
    }

    pub fn target(&self, s: SampleRef) -> f64 {
        self.targets[(s.t + self.lead) * self.num_locations + s.d]
    }

    pub fn sample(&self, s: SampleRef) -> Sample {
        let (l, n, ns) = (self.num_locations, self.num_features, self.num_static);
        let global = self.global_window(s.t).to_vec();
        let local = (0..self.window)
            .flat_map(|step| global[(step * l + s.d) * n..(step * l + s.d + 1) * n].iter().copied())
            .collect();
        let mut one_hot = vec![0.0; l];
        one_hot[s.d] = 1.0;
        Sample {
            global,
            local,
            statics: self.statics[s.d * ns..(s.d + 1) * ns].to_vec(),
            one_hot,
            proximity: self.proximity[s.d * l..(s.d + 1) * l].to_vec(),
            target: self.target(s),
            t: s.t,
            d: s.d,
        }
    }

    /// Groups samples by window end `t`, preserving first-seen order of `t`.
    pub fn window_batches(&self, samples: &[SampleRef]) -> Vec<WindowBatch> {
        let mut order: Vec<usize> = Vec::new();
        let mut groups: std::collections::HashMap<usize, Vec<usize>> = Default::default();
        for s in samples {
            groups
                .entry(s.t)
                .or_insert_with(|| {
                    order.push(s.t);
                    Vec::new()
                })
                .push(s.d);
        }
        order
            .into_iter()
            .map(|t| self.window_batch(t, &groups[&t]))
            .collect()
    }

    pub fn window_batch(&self, t: usize, targets: &[usize]) -> WindowBatch {
        let (l, ns) = (self.num_locations, self.num_static);
        WindowBatch {
            t,
            window: self.window,
            num_locations: l,
            num_features: self.num_features,
            global: self.global_window(t).to_vec(),
            targets: targets.to_vec(),
            statics: targets
                .iter()
                .flat_map(|&d| self.statics[d * ns..(d + 1) * ns].iter().copied())
                .collect(),
            proximity: targets
                .iter()
                .flat_map(|&d| self.proximity[d * l..(d + 1) * l].iter().copied())
                .collect(),
            y: targets.iter().map(|&d| self.target(SampleRef { t, d })).collect(),
        }
    }

    /// Raw target history `y[0..=last_week]` for location `d`.
    pub fn target_history(&self, d: usize, last_week: usize) -> Vec<f64> {
        (0..=last_week).map(|w| self.targets[w * self.num_locations + d]).collect()
    }
}

#[derive(Clone, Debug)]
pub struct SampleSplits {
    pub panel: PreparedPanel,
    pub train: Vec<SampleRef>,
    pub val: Vec<SampleRef>,
    pub test: Vec<SampleRef>,
    pub stats: Standardization,
}

impl SampleSplits {
    pub fn train_t_range(&self) -> Option<(usize, usize)> {
        t_range(&self.train)
    }
}

fn t_range(samples: &[SampleRef]) -> Option<(usize, usize)> {
    let min = samples.iter().map(|s| s.t).min()?;
    let max = samples.iter().map(|s| s.t).max()?;
    Some((min, max))
}

/// One sample per `(t, d)` with `t ∈ [w−1, T−τ−1]`, split chronologically on `t`.
pub fn make_samples(panel: &PanelDataset, window: usize, lead: usize, split: SplitSpec) -> Result<SampleSplits> {
    split.validate()?;
    if window == 0 || lead == 0 {
        return Err(Error::Config("window and lead time must be positive".into()));
    }
    let t_total = panel.num_weeks;
    if t_total < window + lead {
        return Err(Error::Config(format!(
            "panel has {t_total} weeks, need at least w + τ = {}",
            window + lead
        )));
    }
    let first = window - 1;
    let ts: Vec<usize> = (first..=t_total - lead - 1).collect();
    let (n_train, n_val, _) = split.counts(ts.len());
    if n_train == 0 {
        return Err(Error::Config("training split is empty".into()));
    }
    let last_train_week = ts[n_train - 1];
    let stats = Standardization::fit(panel, last_train_week);
    let prepared = PreparedPanel {
        window,
        lead,
        num_weeks: t_total,
        num_locations: panel.num_locations,
        num_features: panel.num_features(),
        num_static: panel.num_static(),
        dynamic: Standardization::apply(&panel.dynamic, &stats.dynamic_mean, &stats.dynamic_std),
        statics: Standardization::apply(&panel.statics, &stats.static_mean, &stats.static_std),
        targets: panel.targets.clone(),
        proximity: panel.proximity.clone(),
    };
    let refs = |range: &[usize]| {
        range
            .iter()
            .flat_map(|&t| (0..panel.num_locations).map(move |d| SampleRef { t, d }))
            .collect::<Vec<_>>()
    };
    Ok(SampleSplits {
        train: refs(&ts[..n_train]),
        val: refs(&ts[n_train..n_train + n_val]),
        test: refs(&ts[n_train + n_val..]),
        panel: prepared,
        stats,
    })
}
