//! Prediction, orthogonality and Group Lasso terms of the training objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::samples::WindowBatch;
use crate::error::{Error, Result};
use crate::model::CastNet;
use crate::tape::{column_group_norm, Tape, Var};
use crate::tensor::Tensor;

pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != target.len() {
        return Err(Error::contract(format!(
            "mse needs equal non-empty lengths, got {} and {}",
            pred.len(),
            target.len()
        )));
    }
    Ok(pred.iter().zip(target).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / pred.len() as f64)
}

/// `‖ΔΔᵀ − I‖²_F` for a row-major `[K×L]` membership matrix; 0 when K = 0.
pub fn ortho_loss(delta: &[f64], communities: usize) -> f64 {
    if communities == 0 {
        return 0.0;
    }
    let l = delta.len() / communities;
    let mut total = 0.0;
    for i in 0..communities {
        for j in 0..communities {
            let g: f64 = (0..l).map(|x| delta[i * l + x] * delta[j * l + x]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            total += (g - target).powi(2);
        }
    }
    total
}

/// ℓ2,1 norm of one `[out × in]` matrix with a group per input column.
pub fn group_lasso_matrix(values: &[f64], rows: usize, cols: usize) -> f64 {
    column_group_norm(values, rows, cols)
}

/// Sum of the ℓ2,1 norms of the model's designated input-weight matrices.
pub fn group_lasso(model: &CastNet) -> f64 {
    model
        .group_lasso_matrices()
        .into_iter()
        .map(|(_, id)| {
            let t = model.params.get(id);
            group_lasso_matrix(t.values(), t.rows(), t.cols())
        })
        .sum()
}

/// Orthogonality penalty on the tape from per-community `[w×L]` spatial weights.
pub fn ortho_on_tape(tape: &mut Tape, alphas: &[Var]) -> Result<Option<Var>> {
    if alphas.is_empty() {
        return Ok(None);
    }
    let rows: Vec<Var> = alphas.iter().map(|&a| tape.mean_rows(a)).collect();
    let delta = tape.concat_rows(&rows)?;
    let gram = tape.matmul_t(delta, delta)?;
    let eye = tape.constant(Tensor::identity(alphas.len()))?;
    let diff = tape.sub(gram, eye)?;
    let sq = tape.mul(diff, diff)?;
    Ok(Some(tape.sum(sq)))
}

pub fn group_lasso_on_tape(tape: &mut Tape, model: &CastNet) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    for (_, id) in model.group_lasso_matrices() {
        let z = tape.param(&model.params, id);
        let g = tape.group_norm(z)?;
        total = Some(match total {
            None => g,
            Some(t) => tape.add(t, g)?,
        });
    }
    Ok(total)
}

/// Weights of the penalty terms after ablations are applied.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub eta: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub ortho: f64,
    pub gl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(mse: f64, ortho: f64, gl: f64, w: LossWeights) -> Self {
        Self {
            mse,
            ortho,
            gl,
            total: mse + w.lambda * ortho + w.eta * gl,
        }
    }
}

pub struct LossGraph {
    pub tape: Tape,
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub predictions: Vec<f64>,
    pub samples: usize,
}

/// `MSE + λ·mean-over-samples(ortho) + η·GL` over a set of windows.
pub fn total_loss<R: Rng + ?Sized>(
    model: &CastNet,
    batches: &[WindowBatch],
    weights: LossWeights,
    train: bool,
    rng: &mut R,
) -> Result<LossGraph> {
    let n: usize = batches.iter().map(WindowBatch::len).sum();
    if n == 0 {
        return Err(Error::contract("loss over an empty batch"));
    }
    let mut tape = Tape::new();
    let mut sq_terms = Vec::with_capacity(batches.len());
    let mut ortho_terms = Vec::new();
    let mut predictions = Vec::with_capacity(n);
    for batch in batches {
        let fwd = model.forward(&mut tape, batch, train, rng)?;
        predictions.extend_from_slice(tape.value(fwd.prediction));
        let y = tape.constant(Tensor::matrix(batch.len(), 1, batch.y.clone())?)?;
        let resid = tape.sub(fwd.prediction, y)?;
        sq_terms.push(tape.dot(resid, resid)?);
        if let Some(o) = ortho_on_tape(&mut tape, &fwd.alpha)? {
            // Every target of a window shares the same memberships.
            ortho_terms.push(tape.scale(o, batch.len() as f64));
        }
    }
    let sq = tape.concat(&sq_terms)?;
    let sq = tape.sum(sq);
    let mse = tape.scale(sq, 1.0 / n as f64);
    let mut loss = mse;
    let mut ortho_value = 0.0;
    if !ortho_terms.is_empty() {
        let o = tape.concat(&ortho_terms)?;
        let o = tape.sum(o);
        let o = tape.scale(o, 1.0 / n as f64);
        ortho_value = tape.item(o);
        if weights.lambda != 0.0 {
            let term = tape.scale(o, weights.lambda);
            loss = tape.add(loss, term)?;
        }
    }
    let mut gl_value = 0.0;
    if let Some(g) = group_lasso_on_tape(&mut tape, model)? {
        gl_value = tape.item(g);
        if weights.eta != 0.0 {
            let term = tape.scale(g, weights.eta);
            loss = tape.add(loss, term)?;
        }
    }
    let breakdown = LossBreakdown::compose(tape.item(mse), ortho_value, gl_value, weights);
    Ok(LossGraph {
        tape,
        loss,
        breakdown,
        predictions,
        samples: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[0.0, 0.0], &[1.0, 3.0]).unwrap(), 5.0);
        assert!(mse_loss(&[], &[]).is_err());
    }

    #[test]
    fn ortho_examples() {
        assert_eq!(ortho_loss(&[1.0, 0.0, 1.0, 0.0], 2), 2.0);
        assert_eq!(ortho_loss(&[1.0, 0.0, 0.0, 1.0], 2), 0.0);
        assert_eq!(ortho_loss(&[0.0, 1.0, 0.0], 1), 0.0);
        assert_eq!(ortho_loss(&[], 0), 0.0);
    }

    #[test]
    fn group_lasso_examples() {
        // [[3,0],[4,0]]: column norms 5 and 0, |g| = 2.
        let v = group_lasso_matrix(&[3.0, 0.0, 4.0, 0.0], 2, 2);
        assert!((v - 5.0 * 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(group_lasso_matrix(&[0.0; 6], 2, 3), 0.0);
        let doubled = group_lasso_matrix(&[6.0, 0.0, 8.0, 0.0], 2, 2);
        assert!((doubled - 2.0 * v).abs() < 1e-12);
    }

    #[test]
    fn tape_ortho_matches_plain() {
        let mut tape = Tape::new();
        let a1 = tape.constant(Tensor::from_rows(&[vec![0.2, 0.8], vec![0.6, 0.4]]).unwrap()).unwrap();
        let a2 = tape.constant(Tensor::from_rows(&[vec![0.5, 0.5], vec![0.1, 0.9]]).unwrap()).unwrap();
        let o = ortho_on_tape(&mut tape, &[a1, a2]).unwrap().unwrap();
        let delta = [0.4, 0.6, 0.3, 0.7];
        assert!((tape.item(o) - ortho_loss(&delta, 2)).abs() < 1e-15);
    }
}
