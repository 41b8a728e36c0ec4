//! The community-attentive forecasting network.
//!
//! Three components feed a linear output head:
//!
//! * **global**: `K` community blocks, each running spatial attention over
//!   locations, an LSTM over the attended context, and temporal attention
//!   queried by the target's proximity-weighted memberships; community
//!   attention (queried by the target embedding) merges the `K` vectors.
//! * **local**: an LSTM over the target's own dynamics with additive
//!   temporal attention.
//! * **static**: the target's location embedding plus a `tanh` projection of
//!   its static features.
//!
//! Everything that does not depend on the target (spatial attention and the
//! community LSTMs) is computed once per observation window and shared by
//! all targets in a [`WindowBatch`].

pub mod blocks;
pub mod config;
pub mod trace;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::samples::{Sample, WindowBatch};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use blocks::LstmWeights;
pub use config::{Ablation, ModelConfig, OutputScale};
pub use trace::AttentionTrace;

#[derive(Clone, Copy, Debug)]
struct LstmIds {
    input: ParamId,
    hidden: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct SpatialIds {
    w: ParamId,
    b: ParamId,
    v: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct CommunityIds {
    spatial: Option<SpatialIds>,
    lstm: LstmIds,
}

#[derive(Clone, Copy, Debug)]
struct AttentionIds {
    w: ParamId,
    b: ParamId,
    v: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    communities: Vec<CommunityIds>,
    community_attention: Option<(ParamId, ParamId)>,
    local_lstm: LstmIds,
    local_attention: Option<AttentionIds>,
    embedding: ParamId,
    static_fc: Option<(ParamId, ParamId)>,
    head: (ParamId, ParamId),
}

/// Which input-weight matrix a Group Lasso group belongs to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputComponent {
    Community(usize),
    Local,
    Static,
}

/// Model parameters plus their configuration.
#[derive(Clone, Debug)]
pub struct CastNet {
    pub config: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
}

/// Tape handles produced by one forward pass over a [`WindowBatch`].
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[B×1]`
    pub prediction: Var,
    /// Per community `[w×L]`; empty when spatial attention is ablated or K=0.
    pub alpha: Vec<Var>,
    /// Per community `[B×w]`; empty when temporal attention is ablated.
    pub beta: Vec<Var>,
    /// `[B×w]`; `None` when temporal attention is ablated.
    pub delta: Option<Var>,
    /// `[B×K]`; `None` when K=0 or community attention is ablated.
    pub gamma: Option<Var>,
}

fn lstm_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    input: usize,
    hidden: usize,
    rng: &mut R,
) -> Result<LstmIds> {
    Ok(LstmIds {
        input: store.insert(format!("{prefix}.W_input"), Tensor::glorot([4 * hidden, input], rng))?,
        hidden: store.insert(format!("{prefix}.W_hidden"), Tensor::glorot([4 * hidden, hidden], rng))?,
        bias: store.insert(format!("{prefix}.bias"), Tensor::zeros([4 * hidden]))?,
    })
}

impl CastNet {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let (n, m) = (c.num_features, c.hidden);
        let mut store = ParamStore::new();

        let mut communities = Vec::with_capacity(c.communities);
        for k in 0..c.communities {
            let prefix = format!("global.community{k}");
            let spatial = if c.ablation.no_sa {
                None
            } else {
                Some(SpatialIds {
                    w: store.insert(format!("{prefix}.spatial.W_sp"), Tensor::glorot([n, n], rng))?,
                    b: store.insert(format!("{prefix}.spatial.b_sp"), Tensor::zeros([n]))?,
                    v: store.insert(format!("{prefix}.spatial.v_sp"), Tensor::glorot([n], rng))?,
                })
            };
            let lstm = lstm_params(&mut store, &format!("{prefix}.lstm"), c.global_input_dim(), m, rng)?;
            communities.push(CommunityIds { spatial, lstm });
        }
        let community_attention = if c.communities > 0 && !c.ablation.no_ca {
            Some((
                store.insert("global.community_attention.V", Tensor::glorot([m, c.community_dim()], rng))?,
                store.insert("global.community_attention.r", Tensor::glorot([m], rng))?,
            ))
        } else {
            None
        };

        let ml = c.local_hidden;
        let local_lstm = lstm_params(&mut store, "local.lstm", n, ml, rng)?;
        let local_attention = if c.ablation.no_ta {
            None
        } else {
            Some(AttentionIds {
                w: store.insert("local.attention.W_loc", Tensor::glorot([ml, ml], rng))?,
                b: store.insert("local.attention.b_loc", Tensor::zeros([ml]))?,
                v: store.insert("local.attention.v_loc", Tensor::glorot([ml], rng))?,
            })
        };

        let embedding = store.insert("static.embedding", Tensor::glorot([c.num_locations, m], rng))?;
        let static_fc = if c.ablation.no_sc {
            None
        } else {
            Some((
                store.insert("static.fc.W", Tensor::glorot([c.static_hidden, c.num_static], rng))?,
                store.insert("static.fc.b", Tensor::zeros([c.static_hidden]))?,
            ))
        };
        let head = (
            store.insert("head.W", Tensor::glorot([1, c.head_dim()], rng))?,
            store.insert("head.b", Tensor::zeros([1]))?,
        );

        Ok(Self {
            layout: Layout {
                communities,
                community_attention,
                local_lstm,
                local_attention,
                embedding,
                static_fc,
                head,
            },
            params: store,
            config,
        })
    }

    /// Rebuilds a model from a checkpoint produced by [`ParamStore::to_checkpoint`].
    pub fn from_checkpoint(config: ModelConfig, params: &serde_json::Value) -> Result<Self> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut model = Self::new(config, &mut rng)?;
        model.params.load_checkpoint(params)?;
        Ok(model)
    }

    /// The input-weight matrices regularized by Group Lasso, `[out × in]`,
    /// one group per input column.
    pub fn group_lasso_matrices(&self) -> Vec<(InputComponent, ParamId)> {
        let mut out: Vec<_> = self
            .layout
            .communities
            .iter()
            .enumerate()
            .map(|(k, ids)| (InputComponent::Community(k), ids.lstm.input))
            .collect();
        out.push((InputComponent::Local, self.layout.local_lstm.input));
        if let Some((w, _)) = self.layout.static_fc {
            out.push((InputComponent::Static, w));
        }
        out
    }

    fn check_batch(&self, batch: &WindowBatch) -> Result<()> {
        let c = &self.config;
        let ok = batch.window == c.window
            && batch.num_locations == c.num_locations
            && batch.num_features == c.num_features
            && batch.global.len() == c.window * c.num_locations * c.num_features
            && batch.statics.len() == batch.len() * c.num_static
            && batch.proximity.len() == batch.len() * c.num_locations
            && batch.y.len() == batch.len()
            && !batch.is_empty()
            && batch.targets.iter().all(|&d| d < c.num_locations);
        if ok {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "window batch (w={}, L={}, n={}, B={}) does not match model config",
                batch.window,
                batch.num_locations,
                batch.num_features,
                batch.len()
            )))
        }
    }

    fn lstm(&self, tape: &mut Tape, ids: LstmIds) -> LstmWeights {
        LstmWeights {
            input: tape.param(&self.params, ids.input),
            hidden: tape.param(&self.params, ids.hidden),
            bias: tape.param(&self.params, ids.bias),
        }
    }

    /// Forward pass for every target of one observation window.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        batch: &WindowBatch,
        train: bool,
        rng: &mut R,
    ) -> Result<Forward> {
        self.check_batch(batch)?;
        let c = &self.config;
        let (w, l, n, b) = (c.window, c.num_locations, c.num_features, batch.len());
        let p = c.dropout;
        let x = tape.constant(Tensor::matrix(w * l, n, batch.global.clone())?)?;
        let prox = tape.constant(Tensor::matrix(b, l, batch.proximity.clone())?)?;
        let emb_table = tape.param(&self.params, self.layout.embedding);
        let emb = tape.gather_rows(emb_table, &batch.targets)?;

        let mut alpha_out = Vec::new();
        let mut beta_out = Vec::new();
        let mut nus = Vec::with_capacity(c.communities);
        for ids in &self.layout.communities {
            let (alpha, context) = match ids.spatial {
                Some(s) => {
                    let (ws, bs, vs) = (
                        tape.param(&self.params, s.w),
                        tape.param(&self.params, s.b),
                        tape.param(&self.params, s.v),
                    );
                    let (alpha, ctx) = blocks::spatial_attention(tape, x, w, ws, bs, vs)?;
                    alpha_out.push(alpha);
                    (alpha, ctx)
                }
                None => {
                    let uniform = tape.constant(Tensor::filled([w, l], 1.0 / l as f64))?;
                    (uniform, tape.reshape(x, &[w, l * n])?)
                }
            };
            let lstm = self.lstm(tape, ids.lstm);
            let hs = lstm.sequence(tape, context, w)?;
            let hidden = tape.concat_rows(&hs)?;
            let hidden = tape.dropout(hidden, p, train, rng)?;
            let nu = if c.ablation.no_ta {
                let flat = tape.reshape(hidden, &[1, w * c.hidden])?;
                tape.gather_rows(flat, &vec![0; b])?
            } else {
                let (nu, beta) = blocks::temporal_attention(tape, hidden, alpha, prox)?;
                beta_out.push(beta);
                nu
            };
            nus.push(nu);
        }

        let mut gamma = None;
        let global = match (c.communities, self.layout.community_attention) {
            (0, _) => None,
            (_, Some((v, r))) => {
                let (v, r) = (tape.param(&self.params, v), tape.param(&self.params, r));
                let (g, nu) = blocks::community_attention(tape, &nus, emb, v, r)?;
                gamma = Some(g);
                Some(nu)
            }
            (_, None) => Some(tape.concat(&nus)?),
        };

        // Local component over the target rows of every step.
        let rows: Vec<usize> = (0..w)
            .flat_map(|s| batch.targets.iter().map(move |&d| s * l + d))
            .collect();
        let local_x = tape.gather_rows(x, &rows)?;
        let lstm = self.lstm(tape, self.layout.local_lstm);
        let states = lstm
            .sequence(tape, local_x, w)?
            .into_iter()
            .map(|s| tape.dropout(s, p, train, rng))
            .collect::<Result<Vec<_>>>()?;
        let (xi, delta) = match self.layout.local_attention {
            Some(a) => {
                let (aw, ab, av) = (
                    tape.param(&self.params, a.w),
                    tape.param(&self.params, a.b),
                    tape.param(&self.params, a.v),
                );
                let (xi, delta) = blocks::additive_attention(tape, &states, aw, ab, av)?;
                (xi, Some(delta))
            }
            None => (tape.concat(&states)?, None),
        };

        let mut parts = Vec::with_capacity(4);
        parts.extend(global);
        parts.push(xi);
        parts.push(emb);
        if let Some((fw, fb)) = self.layout.static_fc {
            let s = tape.constant(Tensor::matrix(b, c.num_static, batch.statics.clone())?)?;
            let (fw, fb) = (tape.param(&self.params, fw), tape.param(&self.params, fb));
            parts.push(blocks::static_latent(tape, s, fw, fb)?);
        }
        let features = tape.concat(&parts)?;
        let (hw, hb) = (
            tape.param(&self.params, self.layout.head.0),
            tape.param(&self.params, self.layout.head.1),
        );
        let out = tape.matmul_t(features, hw)?;
        let out = tape.add_row(out, hb)?;
        let prediction = if c.output == OutputScale::default() {
            out
        } else {
            let scaled = tape.scale(out, c.output.scale);
            let shift = tape.constant(Tensor::vector(vec![c.output.shift]))?;
            tape.add_row(scaled, shift)?
        };

        Ok(Forward {
            prediction,
            alpha: alpha_out,
            beta: beta_out,
            delta,
            gamma,
        })
    }

    /// `(emb_d, Ψ_d)` for a single target: the embedding row and its
    /// concatenation with the static latent (when the static path is on).
    pub fn static_forward(&self, statics: &[f64], one_hot: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let c = &self.config;
        let hot: Vec<_> = one_hot.iter().enumerate().filter(|(_, v)| **v != 0.0).collect();
        if one_hot.len() != c.num_locations || hot.len() != 1 || *hot[0].1 != 1.0 {
            return Err(Error::contract("location one-hot must contain exactly one 1"));
        }
        if statics.len() != c.num_static {
            return Err(Error::shape("static_forward", &[c.num_static], &[statics.len()]));
        }
        let mut tape = Tape::new();
        let table = tape.param(&self.params, self.layout.embedding);
        let emb = tape.gather_rows(table, &[hot[0].0])?;
        let mut psi = vec![emb];
        if let Some((fw, fb)) = self.layout.static_fc {
            let s = tape.constant(Tensor::matrix(1, c.num_static, statics.to_vec())?)?;
            let (fw, fb) = (tape.param(&self.params, fw), tape.param(&self.params, fb));
            psi.push(blocks::static_latent(&mut tape, s, fw, fb)?);
        }
        let psi = tape.concat(&psi)?;
        Ok((tape.value(emb).to_vec(), tape.value(psi).to_vec()))
    }

    /// Predictions and attention traces for one window, no gradients.
    pub fn predict_batch<R: Rng + ?Sized>(
        &self,
        batch: &WindowBatch,
        train: bool,
        rng: &mut R,
    ) -> Result<(Vec<f64>, Vec<AttentionTrace>)> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, batch, train, rng)?;
        let traces = AttentionTrace::collect(&tape, &fwd, &self.config, batch.len());
        Ok((tape.value(fwd.prediction).to_vec(), traces))
    }

    /// Prediction and trace for a single sample.
    pub fn predict<R: Rng + ?Sized>(&self, sample: &Sample, train: bool, rng: &mut R) -> Result<(f64, AttentionTrace)> {
        let batch = WindowBatch::from_sample(sample, self.config.num_locations, self.config.num_features)?;
        let (mut y, mut traces) = self.predict_batch(&batch, train, rng)?;
        Ok((y.remove(0), traces.remove(0)))
    }

    /// Same model with community blocks reordered: block `k` of the result
    /// carries the parameters of block `perm[k]` of `self`.
    pub fn permute_communities(&self, perm: &[usize]) -> Result<Self> {
        let k = self.config.communities;
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..k).collect::<Vec<_>>() {
            return Err(Error::contract(format!("{perm:?} is not a permutation of 0..{k}")));
        }
        let mut out = self.clone();
        let global_dim = self.config.global_dim();
        let d = self.config.community_dim();
        for (new_k, &old_k) in perm.iter().enumerate() {
            let prefix_old = format!("global.community{old_k}.");
            let prefix_new = format!("global.community{new_k}.");
            for (_, name, t) in self.params.iter() {
                if let Some(rest) = name.strip_prefix(&prefix_old) {
                    out.params.set_values(&format!("{prefix_new}{rest}"), t.values())?;
                }
            }
        }
        // Concatenated community vectors feed the head in block order.
        if self.config.ablation.no_ca && k > 0 {
            let head = self.params.get(self.layout.head.0).values();
            let mut new_head = head.to_vec();
            for (new_k, &old_k) in perm.iter().enumerate() {
                new_head[new_k * d..(new_k + 1) * d].copy_from_slice(&head[old_k * d..(old_k + 1) * d]);
            }
            debug_assert!(global_dim == k * d);
            out.params.set_values("head.W", &new_head)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            num_locations: 3,
            num_features: 2,
            num_static: 2,
            window: 2,
            communities: 2,
            hidden: 2,
            local_hidden: 2,
            static_hidden: 2,
            dropout: 0.0,
            ablation: Ablation::default(),
            output: Default::default(),
        }
    }

    fn batch(config: &ModelConfig, targets: &[usize], rng: &mut StdRng) -> WindowBatch {
        let (w, l, n, ns) = (config.window, config.num_locations, config.num_features, config.num_static);
        let b = targets.len();
        WindowBatch {
            t: 0,
            window: w,
            num_locations: l,
            num_features: n,
            global: (0..w * l * n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            targets: targets.to_vec(),
            statics: (0..b * ns).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            proximity: targets
                .iter()
                .flat_map(|&d| (0..l).map(move |j| if j == d { 1.0 } else { 0.5 }))
                .collect(),
            y: vec![1.0; b],
        }
    }

    #[test]
    fn parameter_names_cover_every_symbol() {
        let mut rng = StdRng::seed_from_u64(0);
        let model = CastNet::new(tiny_config(), &mut rng).unwrap();
        for name in [
            "global.community0.spatial.W_sp",
            "global.community1.spatial.b_sp",
            "global.community1.spatial.v_sp",
            "global.community0.lstm.W_input",
            "global.community_attention.V",
            "global.community_attention.r",
            "static.embedding",
            "local.lstm.W_input",
            "local.attention.v_loc",
            "static.fc.W",
            "head.W",
            "head.b",
        ] {
            assert!(model.params.by_name(name).is_some(), "missing {name}");
        }
        assert_eq!(model.params.by_name("head.W").unwrap().shape(), &[1, 2 + 2 + 2 + 2]);
    }

    #[test]
    fn zero_parameters_predict_head_bias() {
        let mut rng = StdRng::seed_from_u64(1);
        let mut model = CastNet::new(tiny_config(), &mut rng).unwrap();
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            model.params.get_mut(id).values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        model.params.set_values("head.b", &[0.37]).unwrap();
        let b = batch(&model.config, &[0, 2], &mut rng);
        let (y, _) = model.predict_batch(&b, false, &mut rng).unwrap();
        assert_eq!(y, vec![0.37, 0.37]);
    }

    #[test]
    fn batched_matches_single_sample() {
        let mut rng = StdRng::seed_from_u64(2);
        let model = CastNet::new(tiny_config(), &mut rng).unwrap();
        let b = batch(&model.config, &[0, 1, 2], &mut rng);
        let (ys, traces) = model.predict_batch(&b, false, &mut rng).unwrap();
        for (i, &d) in b.targets.iter().enumerate() {
            let mut single = b.clone();
            single.targets = vec![d];
            single.statics = b.statics[i * 2..(i + 1) * 2].to_vec();
            single.proximity = b.proximity[i * 3..(i + 1) * 3].to_vec();
            single.y = vec![b.y[i]];
            let (y1, t1) = model.predict_batch(&single, false, &mut rng).unwrap();
            assert!((y1[0] - ys[i]).abs() < 1e-12);
            assert_eq!(t1[0].gamma.len(), traces[i].gamma.len());
        }
    }

    #[test]
    fn mismatched_batch_is_contract_error() {
        let mut rng = StdRng::seed_from_u64(3);
        let model = CastNet::new(tiny_config(), &mut rng).unwrap();
        let mut b = batch(&model.config, &[0], &mut rng);
        b.global.pop();
        assert!(matches!(model.predict_batch(&b, false, &mut rng), Err(Error::Contract(_))));
    }

    #[test]
    fn static_forward_shapes_and_one_hot_check() {
        let mut rng = StdRng::seed_from_u64(4);
        let model = CastNet::new(tiny_config(), &mut rng).unwrap();
        let (emb, psi) = model.static_forward(&[0.1, 0.2], &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(emb, model.params.by_name("static.embedding").unwrap().row(1));
        assert_eq!(psi.len(), 2 + 2);
        assert!(model.static_forward(&[0.1, 0.2], &[1.0, 1.0, 0.0]).is_err());
        assert!(model.static_forward(&[0.1, 0.2], &[0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn zero_fc_weights_give_tanh_bias() {
        let mut rng = StdRng::seed_from_u64(5);
        let mut model = CastNet::new(tiny_config(), &mut rng).unwrap();
        model.params.set_values("static.fc.W", &[0.0; 4]).unwrap();
        model.params.set_values("static.fc.b", &[0.5, -1.0]).unwrap();
        let (_, psi) = model.static_forward(&[3.0, -7.0], &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(&psi[2..], &[0.5f64.tanh(), (-1.0f64).tanh()]);
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let mut rng = StdRng::seed_from_u64(6);
        let mut cfg = tiny_config();
        cfg.dropout = 0.5;
        let model = CastNet::new(cfg, &mut rng).unwrap();
        let b = batch(&model.config, &[0, 1], &mut rng);
        let (e1, _) = model.predict_batch(&b, false, &mut StdRng::seed_from_u64(1)).unwrap();
        let (e2, _) = model.predict_batch(&b, false, &mut StdRng::seed_from_u64(2)).unwrap();
        assert_eq!(e1, e2);
        let (t1, _) = model.predict_batch(&b, true, &mut StdRng::seed_from_u64(1)).unwrap();
        let (t2, _) = model.predict_batch(&b, true, &mut StdRng::seed_from_u64(2)).unwrap();
        assert_ne!(t1, t2);
    }
}
