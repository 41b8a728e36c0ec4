//! Helpers shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use castnet::data::WindowBatch;
use castnet::model::{Ablation, CastNet, ModelConfig};
use castnet::training::{total_loss, LossWeights};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub fn tiny_config(ablation: Ablation, communities: usize) -> ModelConfig {
    ModelConfig {
        num_locations: 3,
        num_features: 2,
        num_static: 2,
        window: 2,
        communities,
        hidden: 2,
        local_hidden: 2,
        static_hidden: 2,
        dropout: 0.1,
        ablation,
        output: Default::default(),
    }
}

/// A window batch with random standardized-looking inputs and all targets.
pub fn random_batch(config: &ModelConfig, rng: &mut impl Rng) -> WindowBatch {
    let (l, n, w, ns) = (config.num_locations, config.num_features, config.window, config.num_static);
    let targets: Vec<usize> = (0..l).collect();
    let mut proximity = Vec::new();
    for d in 0..l {
        for j in 0..l {
            proximity.push(if d == j { 1.0 } else { rng.gen_range(0.2..0.9) });
        }
    }
    WindowBatch {
        t: w - 1,
        window: w,
        num_locations: l,
        num_features: n,
        global: (0..w * l * n).map(|_| rng.gen_range(-1.5..1.5)).collect(),
        targets,
        statics: (0..l * ns).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        proximity,
        y: (0..l).map(|_| rng.gen_range(0.0..4.0)).collect(),
    }
}

pub struct GradCheck {
    pub checked: usize,
    pub passed: usize,
    pub worst: f64,
}

/// `|a − n| / max(|a|, |n|, floor)`; the floor keeps gradients that are
/// zero up to rounding from reporting huge relative errors.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
}

/// Central differences over every parameter scalar of the eval-mode loss.
pub fn gradient_check(model: &mut CastNet, batches: &[WindowBatch], weights: LossWeights, tol: f64) -> GradCheck {
    let mut rng = StdRng::seed_from_u64(0);
    let graph = total_loss(model, batches, weights, false, &mut rng).unwrap();
    let grads = graph.tape.backward(graph.loss).unwrap();
    model.params.zero_grad();
    grads.write_into(&graph.tape, &mut model.params);
    let loss_at = |m: &CastNet| {
        let mut rng = StdRng::seed_from_u64(0);
        let g = total_loss(m, batches, weights, false, &mut rng).unwrap();
        g.tape.item(g.loss)
    };
    let h = 1e-5;
    let ids: Vec<_> = model.params.ids().collect();
    let mut out = GradCheck { checked: 0, passed: 0, worst: 0.0 };
    for id in ids {
        let len = model.params.get(id).len();
        for i in 0..len {
            let analytic = model.params.get(id).grad().unwrap()[i];
            let orig = model.params.get(id).values()[i];
            model.params.get_mut(id).values_mut()[i] = orig + h;
            let up = loss_at(model);
            model.params.get_mut(id).values_mut()[i] = orig - h;
            let down = loss_at(model);
            model.params.get_mut(id).values_mut()[i] = orig;
            let err = relative_error(analytic, (up - down) / (2.0 * h));
            out.checked += 1;
            if err < tol {
                out.passed += 1;
            }
            out.worst = out.worst.max(err);
        }
    }
    out
}

pub fn seeded_model(config: ModelConfig, seed: u64) -> CastNet {
    CastNet::new(config, &mut StdRng::seed_from_u64(seed)).unwrap()
}
