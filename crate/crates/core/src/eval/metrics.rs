use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.is_empty() || pred.len() != target.len() {
        return Err(Error::contract(format!(
            "metrics need equal non-empty lengths, got {} and {}",
            pred.len(),
            target.len()
        )));
    }
    Ok(())
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    check(pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, y)| (p - y).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check(pred, target)?;
    let mse = pred.iter().zip(target).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / pred.len() as f64;
    Ok(mse.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorPair {
    pub mae: f64,
    pub rmse: f64,
    pub count: usize,
}

impl ErrorPair {
    pub fn of(pred: &[f64], target: &[f64]) -> Result<Self> {
        Ok(Self {
            mae: mae(pred, target)?,
            rmse: rmse(pred, target)?,
            count: pred.len(),
        })
    }
}

/// Error summary over a prediction set. `raw` uses the model output as is;
/// `clamped` first replaces negative predictions with 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    pub count: usize,
    pub clamped: ErrorPair,
    /// Indexed by location; `None` where a location has no samples.
    pub per_location: Vec<Option<ErrorPair>>,
}

impl MetricsReport {
    pub fn compute(pred: &[f64], target: &[f64], locations: &[usize], num_locations: usize) -> Result<Self> {
        check(pred, target)?;
        if locations.len() != pred.len() {
            return Err(Error::contract("one location per prediction required"));
        }
        let overall = ErrorPair::of(pred, target)?;
        let clamped_pred: Vec<f64> = pred.iter().map(|p| p.max(0.0)).collect();
        let clamped = ErrorPair::of(&clamped_pred, target)?;
        let mut grouped: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); num_locations];
        for ((&p, &y), &d) in pred.iter().zip(target).zip(locations) {
            let g = grouped
                .get_mut(d)
                .ok_or_else(|| Error::contract(format!("location {d} out of range")))?;
            g.0.push(p);
            g.1.push(y);
        }
        let per_location = grouped
            .into_iter()
            .map(|(p, y)| if p.is_empty() { None } else { ErrorPair::of(&p, &y).ok() })
            .collect();
        Ok(Self {
            mae: overall.mae,
            rmse: overall.rmse,
            count: overall.count,
            clamped,
            per_location,
        })
    }
}
