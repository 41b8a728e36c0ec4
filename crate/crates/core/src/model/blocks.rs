//! Building blocks of the forward pass, expressed as tape operations.
//!
//! Weight matrices are stored `[out × in]`, so a batch of row inputs `X`
//! maps through `X · Wᵀ`.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Spatial attention over `steps` consecutive location sets.
///
/// `x` is `[steps·L × n]` (step-major). Each location is scored as
/// `e = v · tanh(W x_l + b)`, scores are normalized over locations, and the
/// context is the attention-weighted sum of location features.
/// Returns `(alpha [steps×L], context [steps×n])`.
pub fn spatial_attention(
    tape: &mut Tape,
    x: Var,
    steps: usize,
    w: Var,
    b: Var,
    v: Var,
) -> Result<(Var, Var)> {
    let rows = tape.shape(x)[0];
    let locations = rows / steps;
    let proj = tape.matmul_t(x, w)?;
    let proj = tape.add_row(proj, b)?;
    let act = tape.tanh(proj);
    let scores = tape.matmul_t(act, v)?;
    let scores = tape.reshape(scores, &[steps, locations])?;
    let alpha = tape.softmax(scores)?;
    let context = tape.block_mix(alpha, x)?;
    Ok((alpha, context))
}

/// LSTM weights: `input [4m × in]`, `hidden [4m × m]`, `bias [4m]`, gate
/// blocks ordered input, forget, candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmWeights {
    pub input: Var,
    pub hidden: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmWeights {
    pub fn hidden_size(&self, tape: &Tape) -> usize {
        tape.shape(self.hidden)[1]
    }

    pub fn zero_state(&self, tape: &mut Tape, batch: usize) -> Result<LstmState> {
        let m = self.hidden_size(tape);
        let h = tape.constant(Tensor::zeros([batch, m]))?;
        let c = tape.constant(Tensor::zeros([batch, m]))?;
        Ok(LstmState { h, c })
    }

    /// One step from already-projected inputs `pre_x = x·W_inᵀ + b`.
    fn step_projected(&self, tape: &mut Tape, state: LstmState, pre_x: Var, first: bool) -> Result<LstmState> {
        let m = self.hidden_size(tape);
        let pre = if first {
            // h₀ = 0 contributes nothing.
            pre_x
        } else {
            let rec = tape.matmul_t(state.h, self.hidden)?;
            tape.add(pre_x, rec)?
        };
        let out = tape.lstm_cell(pre, state.c)?;
        let h = tape.slice_cols(out, 0, m)?;
        let c = tape.slice_cols(out, m, 2 * m)?;
        Ok(LstmState { h, c })
    }

    /// `(h, c) ← LSTM((h, c), x)` for a `[B × in]` input batch.
    pub fn step(&self, tape: &mut Tape, state: LstmState, x: Var) -> Result<LstmState> {
        let pre_x = tape.matmul_t(x, self.input)?;
        let pre_x = tape.add_row(pre_x, self.bias)?;
        self.step_projected(tape, state, pre_x, false)
    }

    /// Runs over `inputs [steps·B × in]` (step-major) from a zero state and
    /// returns the hidden state `[B × m]` of every step.
    pub fn sequence(&self, tape: &mut Tape, inputs: Var, steps: usize) -> Result<Vec<Var>> {
        let batch = tape.shape(inputs)[0] / steps;
        let pre_all = tape.matmul_t(inputs, self.input)?;
        let pre_all = tape.add_row(pre_all, self.bias)?;
        let mut state = self.zero_state(tape, batch)?;
        let mut hidden = Vec::with_capacity(steps);
        for s in 0..steps {
            let pre_x = if steps == 1 {
                pre_all
            } else {
                tape.slice_rows(pre_all, s * batch, (s + 1) * batch)?
            };
            state = self.step_projected(tape, state, pre_x, s == 0)?;
            hidden.push(state.h);
        }
        Ok(hidden)
    }
}

/// Proximity-queried temporal attention for one community.
///
/// `hidden [w×m]`, `alpha [w×L]`, `prox [B×L]`. The query at step `i` is
/// `prox_d · alpha_i`; weights are normalized over steps.
/// Returns `(nu [B×m], beta [B×w])`.
pub fn temporal_attention(tape: &mut Tape, hidden: Var, alpha: Var, prox: Var) -> Result<(Var, Var)> {
    let q = tape.matmul_t(prox, alpha)?;
    let beta = tape.softmax(q)?;
    let nu = tape.matmul(beta, hidden)?;
    Ok((nu, beta))
}

/// Community attention with the target embedding as query.
///
/// Each `nus[k]` is `[B×d]`, `emb` is `[B×m]`, `v` is `[m×d]`, `r` is `[m]`.
/// `u_k = r · tanh(V ν_k + emb)`; returns `(gamma [B×K], nu [B×d])`.
pub fn community_attention(tape: &mut Tape, nus: &[Var], emb: Var, v: Var, r: Var) -> Result<(Var, Var)> {
    let mut scores = Vec::with_capacity(nus.len());
    for &nu in nus {
        let proj = tape.matmul_t(nu, v)?;
        let proj = tape.add(proj, emb)?;
        let act = tape.tanh(proj);
        scores.push(tape.matmul_t(act, r)?);
    }
    let scores = tape.concat(&scores)?;
    let gamma = tape.softmax(scores)?;
    let nu = weighted_sum(tape, nus, gamma)?;
    Ok((gamma, nu))
}

/// `Σ_k weights[:, k] ⊙ parts[k]` for `weights [B×K]` and parts `[B×d]`.
pub fn weighted_sum(tape: &mut Tape, parts: &[Var], weights: Var) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (k, &p) in parts.iter().enumerate() {
        let wk = tape.slice_cols(weights, k, k + 1)?;
        let term = tape.mul_col(p, wk)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    acc.ok_or_else(|| crate::error::Error::contract("weighted sum over no parts"))
}

/// Additive self-attention over a sequence of `[B×m]` states:
/// `δ_t = softmax_t(v · tanh(W s_t + b))`, returns `(xi [B×m], delta [B×w])`.
pub fn additive_attention(tape: &mut Tape, states: &[Var], w: Var, b: Var, v: Var) -> Result<(Var, Var)> {
    let mut scores = Vec::with_capacity(states.len());
    for &s in states {
        let proj = tape.matmul_t(s, w)?;
        let proj = tape.add_row(proj, b)?;
        let act = tape.tanh(proj);
        scores.push(tape.matmul_t(act, v)?);
    }
    let scores = tape.concat(&scores)?;
    let delta = tape.softmax(scores)?;
    let xi = weighted_sum(tape, states, delta)?;
    Ok((xi, delta))
}

/// Static latent `tanh(S Wᵀ + b)` for `statics [B×n_s]`.
pub fn static_latent(tape: &mut Tape, statics: Var, w: Var, b: Var) -> Result<Var> {
    let proj = tape.matmul_t(statics, w)?;
    let proj = tape.add_row(proj, b)?;
    Ok(tape.tanh(proj))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(tape: &mut Tape, rows: &[Vec<f64>]) -> Var {
        tape.constant(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    fn v(tape: &mut Tape, vals: &[f64]) -> Var {
        tape.constant(Tensor::vector(vals.to_vec())).unwrap()
    }

    #[test]
    fn single_location_gets_all_attention() {
        let mut tape = Tape::new();
        let x = c(&mut tape, &[vec![0.3, -1.2]]);
        let w = c(&mut tape, &[vec![0.5, 0.1], vec![-0.2, 0.4]]);
        let b = v(&mut tape, &[0.1, 0.0]);
        let vv = v(&mut tape, &[1.0, -1.0]);
        let (alpha, ctx) = spatial_attention(&mut tape, x, 1, w, b, vv).unwrap();
        assert_eq!(tape.value(alpha), &[1.0]);
        assert_eq!(tape.value(ctx), &[0.3, -1.2]);
    }

    #[test]
    fn identical_rows_give_uniform_attention() {
        let mut tape = Tape::new();
        let x = c(&mut tape, &[vec![0.7, 0.2], vec![0.7, 0.2], vec![0.7, 0.2], vec![0.7, 0.2]]);
        let w = c(&mut tape, &[vec![0.5, 0.1], vec![-0.2, 0.4]]);
        let b = v(&mut tape, &[0.1, 0.3]);
        let vv = v(&mut tape, &[0.9, -0.4]);
        let (alpha, _) = spatial_attention(&mut tape, x, 1, w, b, vv).unwrap();
        assert!(tape.value(alpha).iter().all(|a| (a - 0.25).abs() < 1e-15));
    }

    #[test]
    fn zero_lstm_weights_keep_hidden_zero() {
        let mut tape = Tape::new();
        let weights = LstmWeights {
            input: tape.constant(Tensor::zeros([8, 3])).unwrap(),
            hidden: tape.constant(Tensor::zeros([8, 2])).unwrap(),
            bias: tape.constant(Tensor::zeros([8])).unwrap(),
        };
        let x = c(&mut tape, &[vec![5.0, -3.0, 1.0], vec![0.1, 0.2, 0.3]]);
        let hs = weights.sequence(&mut tape, x, 2).unwrap();
        for h in hs {
            assert_eq!(tape.value(h), &[0.0, 0.0]);
        }
    }

    #[test]
    fn large_forget_bias_preserves_cell() {
        let mut tape = Tape::new();
        let mut bias = vec![0.0; 4];
        bias[1] = 50.0;
        let weights = LstmWeights {
            input: tape.constant(Tensor::zeros([4, 1])).unwrap(),
            hidden: tape.constant(Tensor::zeros([4, 1])).unwrap(),
            bias: v(&mut tape, &bias),
        };
        let h = c(&mut tape, &[vec![0.0]]);
        let cell = c(&mut tape, &[vec![0.8]]);
        let x = c(&mut tape, &[vec![1.0]]);
        let next = weights.step(&mut tape, LstmState { h, c: cell }, x).unwrap();
        assert!((tape.item(next.c) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn single_step_temporal_attention() {
        let mut tape = Tape::new();
        let h = c(&mut tape, &[vec![0.4, -0.6]]);
        let alpha = c(&mut tape, &[vec![0.2, 0.8]]);
        let prox = c(&mut tape, &[vec![1.0, 0.3]]);
        let (nu, beta) = temporal_attention(&mut tape, h, alpha, prox).unwrap();
        assert_eq!(tape.value(beta), &[1.0]);
        assert_eq!(tape.value(nu), &[0.4, -0.6]);
    }

    #[test]
    fn uniform_query_gives_uniform_beta() {
        let mut tape = Tape::new();
        let h = c(&mut tape, &[vec![0.4], vec![1.0], vec![-2.0]]);
        let alpha = c(&mut tape, &[vec![0.2, 0.8], vec![0.2, 0.8], vec![0.2, 0.8]]);
        let prox = c(&mut tape, &[vec![0.5, 0.5]]);
        let (_, beta) = temporal_attention(&mut tape, h, alpha, prox).unwrap();
        assert!(tape.value(beta).iter().all(|b| (b - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn one_community_passes_through() {
        let mut tape = Tape::new();
        let nu1 = c(&mut tape, &[vec![0.1, 0.2]]);
        let emb = c(&mut tape, &[vec![0.3, -0.3]]);
        let vm = c(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let r = v(&mut tape, &[0.5, 0.5]);
        let (gamma, nu) = community_attention(&mut tape, &[nu1], emb, vm, r).unwrap();
        assert_eq!(tape.value(gamma), &[1.0]);
        assert_eq!(tape.value(nu), &[0.1, 0.2]);
    }

    #[test]
    fn identical_communities_give_that_vector() {
        let mut tape = Tape::new();
        let nu1 = c(&mut tape, &[vec![0.1, 0.2]]);
        let nu2 = c(&mut tape, &[vec![0.1, 0.2]]);
        let emb = c(&mut tape, &[vec![0.3, -0.3]]);
        let vm = c(&mut tape, &[vec![1.0, 0.5], vec![0.2, 1.0]]);
        let r = v(&mut tape, &[0.5, -0.7]);
        let (_, nu) = community_attention(&mut tape, &[nu1, nu2], emb, vm, r).unwrap();
        assert!(tape.value(nu).iter().zip([0.1, 0.2]).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn single_state_local_attention() {
        let mut tape = Tape::new();
        let s = c(&mut tape, &[vec![0.5, 0.25]]);
        let w = c(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let b = v(&mut tape, &[0.0, 0.0]);
        let vv = v(&mut tape, &[1.0, 1.0]);
        let (xi, delta) = additive_attention(&mut tape, &[s], w, b, vv).unwrap();
        assert_eq!(tape.value(delta), &[1.0]);
        assert_eq!(tape.value(xi), &[0.5, 0.25]);
    }
}
