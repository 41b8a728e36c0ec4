use serde::{Deserialize, Serialize};

use crate::data::samples::{SampleRef, SampleSplits};
use crate::error::{Error, Result};
use crate::eval::metrics::MetricsReport;
use crate::training::trainer::TrainConfig;

/// Predicts each location's mean weekly count over the training period.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoricalAverage {
    pub means: Vec<f64>,
}

impl HistoricalAverage {
    pub fn from_histories(histories: &[Vec<f64>]) -> Result<Self> {
        let means = histories
            .iter()
            .enumerate()
            .map(|(d, h)| {
                if h.is_empty() {
                    Err(Error::contract(format!("location {d} has no training history")))
                } else {
                    Ok(h.iter().sum::<f64>() / h.len() as f64)
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { means })
    }

    /// Histories run up to the last week that is a training target.
    pub fn fit(splits: &SampleSplits) -> Result<Self> {
        let (_, last_t) = splits
            .train_t_range()
            .ok_or_else(|| Error::contract("historical average needs training samples"))?;
        let last_week = last_t + splits.panel.lead;
        let histories: Vec<Vec<f64>> = (0..splits.panel.num_locations)
            .map(|d| splits.panel.target_history(d, last_week))
            .collect();
        Self::from_histories(&histories)
    }

    pub fn predict(&self, d: usize) -> f64 {
        self.means[d]
    }

    pub fn predict_samples(&self, samples: &[SampleRef]) -> Vec<f64> {
        samples.iter().map(|s| self.predict(s.d)).collect()
    }
}

/// `ŷ_{t+τ,d} = y_{t,d}`.
pub fn persistence_predict(splits: &SampleSplits, samples: &[SampleRef]) -> Vec<f64> {
    let l = splits.panel.num_locations;
    samples.iter().map(|s| splits.panel.targets[s.t * l + s.d]).collect()
}

/// Persistence forecasts for a single series: element `i` predicts `y[i + lead]`.
pub fn persistence_series(y: &[f64], lead: usize) -> Vec<f64> {
    y[..y.len().saturating_sub(lead)].to_vec()
}

/// The plain-LSTM baseline: no global component, hidden states concatenated,
/// static path kept.
pub fn lstm_baseline_config(base: &TrainConfig) -> TrainConfig {
    let mut c = base.clone();
    c.communities = 0;
    c.ablation = Default::default();
    c.ablation.no_ta = true;
    c
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineMetrics {
    pub historical_average: MetricsReport,
    pub persistence: MetricsReport,
}

pub fn baseline_metrics(splits: &SampleSplits, samples: &[SampleRef]) -> Result<BaselineMetrics> {
    let target: Vec<f64> = samples.iter().map(|&s| splits.panel.target(s)).collect();
    let locs: Vec<usize> = samples.iter().map(|s| s.d).collect();
    let l = splits.panel.num_locations;
    let ha = HistoricalAverage::fit(splits)?;
    Ok(BaselineMetrics {
        historical_average: MetricsReport::compute(&ha.predict_samples(samples), &target, &locs, l)?,
        persistence: MetricsReport::compute(&persistence_predict(splits, samples), &target, &locs, l)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ha_examples() {
        let ha = HistoricalAverage::from_histories(&[vec![2.0, 4.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(ha.predict(0), 3.0);
        assert_eq!(ha.predict(1), 0.0);
        assert!(HistoricalAverage::from_histories(&[vec![]]).is_err());
    }

    #[test]
    fn persistence_examples() {
        assert_eq!(persistence_series(&[1.0, 2.0, 3.0], 1), vec![1.0, 2.0]);
        let constant = [5.0; 6];
        let pred = persistence_series(&constant, 2);
        assert!(pred.iter().zip(&constant[2..]).all(|(p, y)| p == y));
    }

    #[test]
    fn lstm_config() {
        let mut base = TrainConfig::default();
        base.ablation.no_sc = true;
        let c = lstm_baseline_config(&base);
        assert_eq!(c.communities, 0);
        assert!(c.ablation.no_ta && !c.ablation.no_sc);
    }
}
