//! Scripted oracles: each expected value below is recomputed here from its
//! definition, independently of the library's implementation.

use castnet::adam::{AdamConfig, AdamState};
use castnet::data::geo::{haversine_km, proximity, LatLon};
use castnet::data::make_samples;
use castnet::data::samples::SplitSpec;
use castnet::eval::{mae, persistence_predict, rmse, HistoricalAverage};
use castnet::model::blocks::{spatial_attention, temporal_attention, LstmWeights};
use castnet::synth::{generate, SynthSpec};
use castnet::training::{group_lasso_matrix, mse_loss, ortho_loss};
use castnet::{ParamStore, Tape, Tensor};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn penalty_examples() {
    assert_eq!(ortho_loss(&[1.0, 0.0, 1.0, 0.0], 2), 2.0);
    assert!(close(group_lasso_matrix(&[3.0, 0.0, 4.0, 0.0], 2, 2), 5.0 * 2f64.sqrt(), 1e-12));
    // A rotation's rows are orthonormal.
    let (s, c) = (0.3f64.sin(), 0.3f64.cos());
    assert!(ortho_loss(&[c, -s, s, c], 2) < 1e-12);
}

#[test]
fn regression_metrics() {
    let p = [1.0, 2.0, 5.0];
    let y = [2.0, 2.0, 1.0];
    assert!(close(mse_loss(&p, &y).unwrap(), 17.0 / 3.0, 1e-12));
    assert!(close(mae(&p, &y).unwrap(), 5.0 / 3.0, 1e-12));
    assert!(close(rmse(&p, &y).unwrap(), (17.0f64 / 3.0).sqrt(), 1e-12));
    assert!(mae(&[], &[]).is_err());
    assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn haversine_reference_distances() {
    // One degree of arc along the equator on the IUGG mean-radius sphere.
    let d = haversine_km(LatLon::new(0.0, 0.0), LatLon::new(0.0, 1.0));
    assert!(close(d, 6371.0088 * std::f64::consts::PI / 180.0, 1e-9));
    // Pole to pole.
    let d = haversine_km(LatLon::new(90.0, 0.0), LatLon::new(-90.0, 0.0));
    assert!(close(d, 6371.0088 * std::f64::consts::PI, 1e-6));
    assert_eq!(proximity(0.0), 1.0);
    assert!(close(proximity(3.0), 0.5, 1e-15));
}

#[test]
fn adam_matches_hand_updates() {
    let mut store = ParamStore::new();
    let id = store.insert("w", Tensor::vector(vec![1.0, -2.0])).unwrap();
    let config = AdamConfig::default();
    let mut adam = AdamState::new(config, &store);
    let grads_seq = [[0.5, -1.0], [0.1, 2.0], [-0.3, 0.0]];
    let (mut m, mut v, mut w) = ([0.0f64; 2], [0.0f64; 2], [1.0f64, -2.0]);
    for (step, g) in grads_seq.iter().enumerate() {
        // loss = g · w has gradient g.
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let c = tape.constant(Tensor::vector(g.to_vec())).unwrap();
        let loss = tape.dot(p, c).unwrap();
        let grads = tape.backward(loss).unwrap();
        store.zero_grad();
        grads.write_into(&tape, &mut store);
        adam.step(&mut store).unwrap();

        let t = (step + 1) as i32;
        for i in 0..2 {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            let mh = m[i] / (1.0 - 0.9f64.powi(t));
            let vh = v[i] / (1.0 - 0.999f64.powi(t));
            w[i] -= 1e-3 * mh / (vh.sqrt() + 1e-8);
        }
        for i in 0..2 {
            assert!(close(store.get(id).values()[i], w[i], 1e-15), "step {step}");
        }
    }
}

#[test]
fn lstm_step_matches_gate_equations() {
    let (m, input) = (2, 3);
    let w_in: Vec<f64> = (0..4 * m * input).map(|i| ((i * 7 % 11) as f64 - 5.0) / 10.0).collect();
    let w_h: Vec<f64> = (0..4 * m * m).map(|i| ((i * 5 % 7) as f64 - 3.0) / 8.0).collect();
    let bias: Vec<f64> = (0..4 * m).map(|i| i as f64 / 20.0 - 0.1).collect();
    let x = [0.4, -1.2, 0.7];
    let (h0, c0) = ([0.3, -0.5], [0.8, 0.1]);

    let mut tape = Tape::new();
    let weights = LstmWeights {
        input: tape.constant(Tensor::matrix(4 * m, input, w_in.clone()).unwrap()).unwrap(),
        hidden: tape.constant(Tensor::matrix(4 * m, m, w_h.clone()).unwrap()).unwrap(),
        bias: tape.constant(Tensor::vector(bias.clone())).unwrap(),
    };
    let state = castnet::model::blocks::LstmState {
        h: tape.constant(Tensor::matrix(1, m, h0.to_vec()).unwrap()).unwrap(),
        c: tape.constant(Tensor::matrix(1, m, c0.to_vec()).unwrap()).unwrap(),
    };
    let xv = tape.constant(Tensor::matrix(1, input, x.to_vec()).unwrap()).unwrap();
    let next = weights.step(&mut tape, state, xv).unwrap();

    let pre: Vec<f64> = (0..4 * m)
        .map(|r| {
            bias[r]
                + (0..input).map(|j| w_in[r * input + j] * x[j]).sum::<f64>()
                + (0..m).map(|j| w_h[r * m + j] * h0[j]).sum::<f64>()
        })
        .collect();
    for j in 0..m {
        let (i, f, g, o) = (sigmoid(pre[j]), sigmoid(pre[m + j]), pre[2 * m + j].tanh(), sigmoid(pre[3 * m + j]));
        let c = f * c0[j] + i * g;
        assert!(close(tape.value(next.c)[j], c, 1e-14));
        assert!(close(tape.value(next.h)[j], o * c.tanh(), 1e-14));
    }
}

#[test]
fn spatial_attention_matches_scored_softmax() {
    let (l, n) = (3, 2);
    let x = [0.5, -1.0, 1.5, 0.2, -0.3, 0.9];
    let w = [0.4, -0.2, 0.1, 0.7];
    let b = [0.05, -0.1];
    let v = [1.3, -0.6];
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::matrix(l, n, x.to_vec()).unwrap()).unwrap();
    let wv = tape.constant(Tensor::matrix(n, n, w.to_vec()).unwrap()).unwrap();
    let bv = tape.constant(Tensor::vector(b.to_vec())).unwrap();
    let vv = tape.constant(Tensor::matrix(1, n, v.to_vec()).unwrap()).unwrap();
    let (alpha, ctx) = spatial_attention(&mut tape, xv, 1, wv, bv, vv).unwrap();

    let scores: Vec<f64> = (0..l)
        .map(|loc| {
            (0..n)
                .map(|o| v[o] * (b[o] + (0..n).map(|i| w[o * n + i] * x[loc * n + i]).sum::<f64>()).tanh())
                .sum()
        })
        .collect();
    let a = softmax(&scores);
    for loc in 0..l {
        assert!(close(tape.value(alpha)[loc], a[loc], 1e-14));
    }
    for f in 0..n {
        let expected: f64 = (0..l).map(|loc| a[loc] * x[loc * n + f]).sum();
        assert!(close(tape.value(ctx)[f], expected, 1e-14));
    }
}

#[test]
fn temporal_attention_uses_proximity_weighted_membership() {
    let (w, l, m) = (3, 2, 2);
    let hidden = [1.0, 0.0, 0.0, 1.0, 0.5, 0.5];
    let alpha = [0.9, 0.1, 0.5, 0.5, 0.2, 0.8];
    let prox = [1.0, 0.4];
    let mut tape = Tape::new();
    let h = tape.constant(Tensor::matrix(w, m, hidden.to_vec()).unwrap()).unwrap();
    let a = tape.constant(Tensor::matrix(w, l, alpha.to_vec()).unwrap()).unwrap();
    let p = tape.constant(Tensor::matrix(1, l, prox.to_vec()).unwrap()).unwrap();
    let (nu, beta) = temporal_attention(&mut tape, h, a, p).unwrap();
    let q: Vec<f64> = (0..w).map(|i| prox[0] * alpha[i * l] + prox[1] * alpha[i * l + 1]).collect();
    let b = softmax(&q);
    for i in 0..w {
        assert!(close(tape.value(beta)[i], b[i], 1e-14));
    }
    for j in 0..m {
        let expected: f64 = (0..w).map(|i| b[i] * hidden[i * m + j]).sum();
        assert!(close(tape.value(nu)[j], expected, 1e-14));
    }
}

fn small_synth() -> (castnet::data::PanelDataset, castnet::synth::GroundTruth) {
    generate(&SynthSpec { num_weeks: 80, seed: 11, ..Default::default() }).unwrap()
}

#[test]
fn historical_average_matches_brute_force_means() {
    let (panel, _) = small_synth();
    let splits = make_samples(&panel, 10, 1, SplitSpec::default()).unwrap();
    let ha = HistoricalAverage::fit(&splits).unwrap();
    let last_train_t = splits.train.iter().map(|s| s.t).max().unwrap();
    // Every target week visible to training: weeks up to last_t + lead.
    for d in 0..panel.num_locations {
        let weeks = 0..=last_train_t + 1;
        let n = weeks.clone().count() as f64;
        let mean = weeks.map(|t| panel.targets[t * panel.num_locations + d]).sum::<f64>() / n;
        assert!(close(ha.predict(d), mean, 1e-12), "location {d}");
    }
}

#[test]
fn persistence_repeats_the_window_end() {
    let (panel, _) = small_synth();
    let splits = make_samples(&panel, 10, 2, SplitSpec::default()).unwrap();
    let pred = persistence_predict(&splits, &splits.test);
    for (s, p) in splits.test.iter().zip(pred) {
        assert_eq!(p, panel.targets[s.t * panel.num_locations + s.d]);
    }
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

#[test]
fn planted_source_beats_every_irrelevant_feature_at_lag_one() {
    let spec = SynthSpec::default();
    let (panel, truth) = generate(&spec).unwrap();
    let (t, l, n) = (panel.num_weeks, panel.num_locations, panel.num_features());
    // Exhaustive scan: lag-1 correlation between each feature summed over a
    // candidate source community and each target, best over communities.
    let mut best = vec![0.0f64; n];
    for d in 0..l {
        let y: Vec<f64> = (1..t).map(|w| panel.targets[w * l + d]).collect();
        for c in 0..truth.communities {
            let members: Vec<usize> = (0..l).filter(|&s| truth.membership[c * l + s] > 0.0).collect();
            for (f, b) in best.iter_mut().enumerate() {
                let x: Vec<f64> = (0..t - 1)
                    .map(|w| members.iter().map(|&s| panel.dynamic[(w * l + s) * n + f]).sum())
                    .collect();
                *b = b.max(correlation(&x, &y));
            }
        }
    }
    let informative_min = (0..n).filter(|&f| truth.informative[f]).map(|f| best[f]).fold(f64::INFINITY, f64::min);
    let irrelevant_max = (0..n).filter(|&f| !truth.informative[f]).map(|f| best[f]).fold(0.0, f64::max);
    assert!(informative_min > irrelevant_max, "{best:?}");
}
