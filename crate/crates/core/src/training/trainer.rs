use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::data::samples::{SampleRef, SampleSplits, WindowBatch};
use crate::error::{Error, Result};
use crate::eval::metrics::{ErrorPair, MetricsReport};
use crate::model::{Ablation, CastNet, ModelConfig, OutputScale};
use crate::training::loss::{total_loss, LossBreakdown, LossWeights};

/// Hyperparameters of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub window: usize,
    pub lead: usize,
    pub communities: usize,
    pub hidden: usize,
    pub local_hidden: usize,
    pub static_hidden: usize,
    pub dropout: f64,
    pub lambda: f64,
    pub eta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub patience: usize,
    /// Target samples per optimizer step; rounded to whole observation windows.
    pub batch_size: usize,
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            window: 10,
            lead: 1,
            communities: 4,
            hidden: 16,
            local_hidden: 16,
            static_hidden: 8,
            dropout: 0.1,
            lambda: 0.01,
            eta: 0.005,
            learning_rate: 1e-3,
            epochs: 200,
            patience: 15,
            batch_size: 64,
            seed: 0,
            ablation: Ablation::default(),
        }
    }
}

/// Mean and standard deviation of the training targets (scale 1 when constant).
fn target_scale(splits: &SampleSplits) -> OutputScale {
    let y: Vec<f64> = splits.train.iter().map(|&s| splits.panel.target(s)).collect();
    if y.is_empty() {
        return OutputScale::default();
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let std = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64).sqrt();
    OutputScale {
        shift: mean,
        scale: if std > 1e-12 { std } else { 1.0 },
    }
}

impl TrainConfig {
    pub fn model_config(&self, splits: &SampleSplits) -> ModelConfig {
        let p = &splits.panel;
        ModelConfig {
            num_locations: p.num_locations,
            num_features: p.num_features,
            num_static: p.num_static,
            window: self.window,
            communities: self.communities,
            hidden: self.hidden,
            local_hidden: self.local_hidden,
            static_hidden: self.static_hidden,
            dropout: self.dropout,
            ablation: self.ablation,
            output: target_scale(splits),
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda: if self.ablation.no_ortho { 0.0 } else { self.lambda },
            eta: if self.ablation.no_gl { 0.0 } else { self.eta },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || self.lambda < 0.0 || self.eta < 0.0 {
            return Err(Error::Config("learning rate must be positive, penalties non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val_mse: f64,
    pub val_mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum StopReason {
    EpochLimit,
    Patience,
    Diverged { diagnostic: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (lowest validation MSE); 0 means the
    /// initial parameters.
    pub best_epoch: usize,
    pub stop: StopReason,
    pub val: MetricsReport,
    pub test: Option<MetricsReport>,
}

impl TrainReport {
    pub fn best_val_mae(&self) -> f64 {
        self.val.mae
    }

    /// `epoch,mse,ortho,gl,val_mse` rows with a header.
    pub fn loss_curve_csv(&self) -> String {
        let mut out = String::from("epoch,mse,ortho,gl,val_mse\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.train.mse, e.train.ortho, e.train.gl, e.val_mse
            ));
        }
        out
    }
}

pub struct TrainOutcome {
    pub model: CastNet,
    pub report: TrainReport,
}

/// Predictions for `samples` in eval mode, in the order given.
pub fn predict_samples(model: &CastNet, splits: &SampleSplits, samples: &[SampleRef]) -> Result<Vec<f64>> {
    let mut rng = StdRng::seed_from_u64(0);
    let mut out = vec![0.0; samples.len()];
    let mut pos: std::collections::HashMap<SampleRef, Vec<usize>> = Default::default();
    for (i, s) in samples.iter().enumerate() {
        pos.entry(*s).or_default().push(i);
    }
    for batch in splits.panel.window_batches(samples) {
        let (pred, _) = model.predict_batch(&batch, false, &mut rng)?;
        for (&d, p) in batch.targets.iter().zip(pred) {
            for &i in &pos[&SampleRef { t: batch.t, d }] {
                out[i] = p;
            }
        }
    }
    Ok(out)
}

pub fn evaluate(model: &CastNet, splits: &SampleSplits, samples: &[SampleRef]) -> Result<MetricsReport> {
    let pred = predict_samples(model, splits, samples)?;
    let target: Vec<f64> = samples.iter().map(|&s| splits.panel.target(s)).collect();
    let locs: Vec<usize> = samples.iter().map(|s| s.d).collect();
    MetricsReport::compute(&pred, &target, &locs, splits.panel.num_locations)
}

fn windows_per_step(config: &TrainConfig, targets_per_window: usize) -> usize {
    (config.batch_size as f64 / targets_per_window.max(1) as f64).round().max(1.0) as usize
}

/// Mini-batch Adam with best-validation checkpointing and early stopping.
pub fn train(splits: &SampleSplits, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if splits.train.is_empty() || splits.val.is_empty() {
        return Err(Error::contract("training needs non-empty train and validation splits"));
    }
    if config.window != splits.panel.window || config.lead != splits.panel.lead {
        return Err(Error::Config(format!(
            "samples were cut with w={}, τ={} but config asks for w={}, τ={}",
            splits.panel.window, splits.panel.lead, config.window, config.lead
        )));
    }
    let model_config = config.model_config(splits);
    let mut rng = StdRng::seed_from_u64(config.seed);
    let mut model = CastNet::new(model_config.clone(), &mut rng)?;
    let mut adam = AdamState::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let weights = config.loss_weights();
    let mut windows: Vec<WindowBatch> = splits.panel.window_batches(&splits.train);
    let per_step = windows_per_step(config, splits.panel.num_locations);

    let val_mse = |m: &CastNet| -> Result<(f64, f64)> {
        let r = evaluate(m, splits, &splits.val)?;
        Ok((r.rmse * r.rmse, r.mae))
    };
    let (mut best_mse, _) = val_mse(&model)?;
    let mut best_params = model.params.clone();
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut epochs = Vec::new();
    let mut stop = StopReason::EpochLimit;

    'epochs: for epoch in 1..=config.epochs {
        windows.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        let mut seen = 0usize;
        for chunk in windows.chunks(per_step) {
            let graph = total_loss(&model, chunk, weights, true, &mut rng)?;
            if !graph.breakdown.total.is_finite() {
                stop = StopReason::Diverged {
                    diagnostic: format!("non-finite loss {:?} in epoch {epoch}", graph.breakdown),
                };
                break 'epochs;
            }
            let grads = graph.tape.backward(graph.loss)?;
            model.params.zero_grad();
            grads.write_into(&graph.tape, &mut model.params);
            if let Err(e) = adam.step(&mut model.params) {
                stop = StopReason::Diverged {
                    diagnostic: format!("{e} in epoch {epoch}"),
                };
                break 'epochs;
            }
            let b = graph.breakdown;
            let n = graph.samples as f64;
            sums.mse += b.mse * n;
            sums.ortho += b.ortho * n;
            sums.gl += b.gl * n;
            seen += graph.samples;
        }
        let s = seen as f64;
        let train = LossBreakdown::compose(sums.mse / s, sums.ortho / s, sums.gl / s, weights);
        let (vm, vmae) = val_mse(&model)?;
        epochs.push(EpochRecord {
            epoch,
            train,
            val_mse: vm,
            val_mae: vmae,
        });
        if !vm.is_finite() {
            stop = StopReason::Diverged {
                diagnostic: format!("non-finite validation MSE in epoch {epoch}"),
            };
            break;
        }
        if vm < best_mse {
            best_mse = vm;
            best_params = model.params.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                stop = StopReason::Patience;
                break;
            }
        }
    }

    model.params = best_params;
    let val = evaluate(&model, splits, &splits.val)?;
    let test = if splits.test.is_empty() {
        None
    } else {
        Some(evaluate(&model, splits, &splits.test)?)
    };
    Ok(TrainOutcome {
        report: TrainReport {
            config: config.clone(),
            model: model_config,
            epochs,
            best_epoch,
            stop,
            val,
            test,
        },
        model,
    })
}

/// Convenience for metrics on a fixed prediction/target pair.
pub fn error_pair(pred: &[f64], target: &[f64]) -> Result<ErrorPair> {
    ErrorPair::of(pred, target)
}
