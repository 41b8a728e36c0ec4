use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::data::panel::PanelDataset;
use crate::data::samples::{make_samples, SampleSplits, SplitSpec};
use crate::error::{Error, Result};
use crate::training::trainer::{train, TrainConfig, TrainReport};

/// λ grid: 0.001 followed by 0.005 to 0.05 in steps of 0.005.
pub fn default_lambda_grid() -> Vec<f64> {
    std::iter::once(0.001).chain((1..=10).map(|i| i as f64 * 0.005)).collect()
}

/// η grid: 0.001 to 0.01 in steps of 0.0005.
pub fn default_eta_grid() -> Vec<f64> {
    (0..=18).map(|i| 0.001 + i as f64 * 0.0005).collect()
}

pub fn default_window_grid() -> Vec<usize> {
    vec![5, 10, 15, 20]
}

pub fn default_hidden_grid() -> Vec<usize> {
    vec![8, 16, 32, 64]
}

/// Cartesian product of candidate values around a base config. An empty
/// axis keeps the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfigSpace {
    pub communities: Vec<usize>,
    pub windows: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub etas: Vec<f64>,
    pub hidden: Vec<usize>,
    pub seeds: Vec<u64>,
}

fn axis<T: Copy>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

impl ConfigSpace {
    /// The full search space: every grid above, K from 0 to 6.
    pub fn full() -> Self {
        Self {
            communities: (0..=6).collect(),
            windows: default_window_grid(),
            lambdas: default_lambda_grid(),
            etas: default_eta_grid(),
            hidden: default_hidden_grid(),
            seeds: Vec::new(),
        }
    }

    pub fn expand(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &window in &axis(&self.windows, base.window) {
            for &communities in &axis(&self.communities, base.communities) {
                for &hidden in &axis(&self.hidden, base.hidden) {
                    for &lambda in &axis(&self.lambdas, base.lambda) {
                        for &eta in &axis(&self.etas, base.eta) {
                            for &seed in &axis(&self.seeds, base.seed) {
                                let mut c = base.clone();
                                c.window = window;
                                c.communities = communities;
                                c.hidden = hidden;
                                c.local_hidden = hidden;
                                c.lambda = lambda;
                                c.eta = eta;
                                c.seed = seed;
                                out.push(c);
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRun {
    pub config: TrainConfig,
    pub report: Option<TrainReport>,
    pub error: Option<String>,
}

impl GridRun {
    pub fn val_mae(&self) -> f64 {
        self.report.as_ref().map_or(f64::INFINITY, TrainReport::best_val_mae)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    /// Successful runs by ascending val MAE, failed runs last in expansion order.
    pub runs: Vec<GridRun>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KSweepRow {
    pub communities: usize,
    pub runs: usize,
    pub best_val_mae: f64,
    pub best_val_rmse: f64,
    pub test_mae: Option<f64>,
    pub test_rmse: Option<f64>,
}

impl GridReport {
    pub fn best(&self) -> Option<&GridRun> {
        self.runs.first().filter(|r| r.report.is_some())
    }

    /// Best run per K, ascending in K. K values whose runs all failed still
    /// get a row, with infinite errors.
    pub fn k_sweep(&self) -> Vec<KSweepRow> {
        let mut by_k: BTreeMap<usize, Vec<&GridRun>> = BTreeMap::new();
        for r in &self.runs {
            by_k.entry(r.config.communities).or_default().push(r);
        }
        by_k.into_iter()
            .map(|(k, runs)| {
                let best = runs
                    .iter()
                    .filter_map(|r| r.report.as_ref())
                    .min_by(|a, b| a.best_val_mae().total_cmp(&b.best_val_mae()));
                KSweepRow {
                    communities: k,
                    runs: runs.len(),
                    best_val_mae: best.map_or(f64::INFINITY, |b| b.val.mae),
                    best_val_rmse: best.map_or(f64::INFINITY, |b| b.val.rmse),
                    test_mae: best.and_then(|b| b.test.as_ref().map(|t| t.mae)),
                    test_rmse: best.and_then(|b| b.test.as_ref().map(|t| t.rmse)),
                }
            })
            .collect()
    }

    pub fn k_sweep_csv(&self) -> String {
        let mut out = String::from("k,runs,val_mae,val_rmse,test_mae,test_rmse\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for row in self.k_sweep() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.communities,
                row.runs,
                row.best_val_mae,
                row.best_val_rmse,
                opt(row.test_mae),
                opt(row.test_rmse)
            ));
        }
        out
    }
}

/// Trains every configuration of `space` on `panel`, using up to `threads`
/// workers. Failed runs are recorded and the search continues.
pub fn grid_search(
    panel: &PanelDataset,
    split: SplitSpec,
    base: &TrainConfig,
    space: &ConfigSpace,
    threads: usize,
) -> Result<GridReport> {
    let configs = space.expand(base);
    if configs.is_empty() {
        return Err(Error::Config("empty configuration space".into()));
    }
    // Samples depend only on (w, τ); cut them once per pair.
    let mut splits: BTreeMap<(usize, usize), std::result::Result<SampleSplits, String>> = BTreeMap::new();
    for c in &configs {
        splits
            .entry((c.window, c.lead))
            .or_insert_with(|| make_samples(panel, c.window, c.lead, split).map_err(|e| e.to_string()));
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<GridRun>>> = Mutex::new(vec![None; configs.len()]);
    let workers = threads.clamp(1, configs.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(config) = configs.get(i) else { break };
                let outcome = match &splits[&(config.window, config.lead)] {
                    Ok(s) => train(s, config).map_err(|e| e.to_string()),
                    Err(e) => Err(e.clone()),
                };
                let run = match outcome {
                    Ok(o) => GridRun {
                        config: config.clone(),
                        report: Some(o.report),
                        error: None,
                    },
                    Err(e) => GridRun {
                        config: config.clone(),
                        report: None,
                        error: Some(e),
                    },
                };
                results.lock().expect("grid worker panicked")[i] = Some(run);
            });
        }
    });

    let mut runs: Vec<GridRun> = results
        .into_inner()
        .expect("grid worker panicked")
        .into_iter()
        .map(|r| r.expect("every configuration is visited"))
        .collect();
    // Stable sort keeps expansion order among ties and among failures.
    runs.sort_by(|a, b| a.val_mae().total_cmp(&b.val_mae()));
    Ok(GridReport { runs })
}
