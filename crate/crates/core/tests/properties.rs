//! Property tests for the invariants of the numeric core, the model and the
//! interpretation helpers.

mod common;

use castnet::data::geo::{haversine_km, proximity, LatLon};
use castnet::eval::{mae, rmse, MembershipMatrix};
use castnet::model::Ablation;
use castnet::synth::{score_recovery, GroundTruth};
use castnet::training::{group_lasso_matrix, ortho_loss};
use castnet::{Tape, Tensor};
use common::{random_batch, seeded_model, tiny_config};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::SeedableRng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-5.0f64..5.0, rows * cols)
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..7, seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let values: Vec<f64> = (0..rows * cols).map(|_| rand::Rng::gen_range(&mut rng, -50.0..50.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(rows, cols, values).unwrap()).unwrap();
        let s = tape.softmax(x).unwrap();
        for r in tape.value(s).chunks(cols) {
            prop_assert!(r.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ortho_is_non_negative(k in 1usize..4, l in 1usize..6, seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let delta: Vec<f64> = (0..k * l).map(|_| rand::Rng::gen_range(&mut rng, 0.0..1.0)).collect();
        prop_assert!(ortho_loss(&delta, k) >= 0.0);
    }

    #[test]
    fn ortho_vanishes_on_disjoint_indicator_rows(l in 2usize..8, seed in any::<u64>()) {
        // Rows that are indicators of distinct locations are orthonormal.
        let mut rng = StdRng::seed_from_u64(seed);
        let mut locs: Vec<usize> = (0..l).collect();
        rand::seq::SliceRandom::shuffle(locs.as_mut_slice(), &mut rng);
        let k = l.min(3);
        let mut delta = vec![0.0; k * l];
        for (c, &loc) in locs.iter().take(k).enumerate() {
            delta[c * l + loc] = 1.0;
        }
        prop_assert!(ortho_loss(&delta, k) < 1e-12);
    }

    #[test]
    fn group_lasso_is_invariant_to_column_order_and_sign(w in matrix(3, 4), perm_seed in any::<u64>()) {
        let (rows, cols) = (3, 4);
        let base = group_lasso_matrix(&w, rows, cols);
        let mut rng = StdRng::seed_from_u64(perm_seed);
        let mut perm: Vec<usize> = (0..cols).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let permuted: Vec<f64> = (0..rows * cols).map(|i| w[(i / cols) * cols + perm[i % cols]]).collect();
        let flipped: Vec<f64> = w.iter().map(|v| -v).collect();
        prop_assert!((group_lasso_matrix(&permuted, rows, cols) - base).abs() < 1e-9);
        prop_assert!((group_lasso_matrix(&flipped, rows, cols) - base).abs() < 1e-12);
    }

    #[test]
    fn group_lasso_is_absolutely_homogeneous(w in matrix(2, 3), c in -4.0f64..4.0) {
        let scaled: Vec<f64> = w.iter().map(|v| c * v).collect();
        let lhs = group_lasso_matrix(&scaled, 2, 3);
        let rhs = c.abs() * group_lasso_matrix(&w, 2, 3);
        prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs.max(1.0));
    }

    #[test]
    fn mae_never_exceeds_rmse(pairs in proptest::collection::vec((-20.0f64..20.0, -20.0f64..20.0), 1..40)) {
        let (p, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assert!(mae(&p, &y).unwrap() <= rmse(&p, &y).unwrap() + 1e-12);
    }

    #[test]
    fn haversine_is_a_symmetric_premetric(
        a in (-80.0f64..80.0, -179.0f64..179.0),
        b in (-80.0f64..80.0, -179.0f64..179.0),
        c in (-80.0f64..80.0, -179.0f64..179.0),
    ) {
        let (a, b, c) = (LatLon::new(a.0, a.1), LatLon::new(b.0, b.1), LatLon::new(c.0, c.1));
        let ab = haversine_km(a, b);
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - haversine_km(b, a)).abs() < 1e-9);
        prop_assert!(haversine_km(a, a).abs() < 1e-9);
        prop_assert!(ab <= haversine_km(a, c) + haversine_km(c, b) + 1e-6);
        let p = proximity(ab);
        prop_assert!(p > 0.0 && p <= 1.0);
    }

    #[test]
    fn recovery_ignores_row_order(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let (k, l) = (3, 6);
        let mut values: Vec<f64> = (0..k * l).map(|_| rand::Rng::gen_range(&mut rng, 0.0..1.0)).collect();
        for row in values.chunks_mut(l) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let mut truth_rows = vec![0.0; k * l];
        for loc in 0..l {
            truth_rows[(loc % k) * l + loc] = 0.5;
        }
        let truth = GroundTruth {
            communities: k,
            locations: l,
            membership: truth_rows,
            contribution: vec![0.0; l * k],
            informative: vec![true],
        };
        let m = MembershipMatrix { communities: k, locations: l, values: values.clone() };
        let base = score_recovery(&m, &truth).unwrap();
        let mut perm: Vec<usize> = (0..k).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let shuffled: Vec<f64> = perm.iter().flat_map(|&r| values[r * l..(r + 1) * l].to_vec()).collect();
        let m2 = MembershipMatrix { communities: k, locations: l, values: shuffled };
        prop_assert!((score_recovery(&m2, &truth).unwrap() - base).abs() < 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&base));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_attention_is_a_distribution(seed in any::<u64>(), variant in 0usize..5, k in 0usize..4) {
        let ablation = [
            Ablation::default(),
            Ablation { no_sa: true, ..Default::default() },
            Ablation { no_ta: true, ..Default::default() },
            Ablation { no_ca: true, ..Default::default() },
            Ablation { no_sc: true, ..Default::default() },
        ][variant];
        let config = tiny_config(ablation, k);
        let model = seeded_model(config.clone(), seed);
        let mut rng = StdRng::seed_from_u64(seed ^ 0x5eed);
        let batch = random_batch(&config, &mut rng);
        let (_, traces) = model.predict_batch(&batch, true, &mut rng).unwrap();
        for trace in &traces {
            for dist in trace.distributions() {
                prop_assert!(dist.iter().all(|&p| p >= 0.0));
                prop_assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn community_order_does_not_change_predictions(seed in any::<u64>(), no_ca in any::<bool>()) {
        let ablation = Ablation { no_ca, ..Default::default() };
        let config = tiny_config(ablation, 3);
        let model = seeded_model(config.clone(), seed);
        let mut rng = StdRng::seed_from_u64(seed.wrapping_add(1));
        let batch = random_batch(&config, &mut rng);
        let (y, _) = model.predict_batch(&batch, false, &mut rng).unwrap();
        for perm in [[1, 2, 0], [2, 1, 0], [0, 2, 1]] {
            let permuted = model.permute_communities(&perm).unwrap();
            let (yp, _) = permuted.predict_batch(&batch, false, &mut rng).unwrap();
            for (a, b) in y.iter().zip(&yp) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn a_targets_prediction_ignores_other_static_rows(seed in any::<u64>()) {
        let config = tiny_config(Ablation::default(), 2);
        let model = seeded_model(config.clone(), seed);
        let mut rng = StdRng::seed_from_u64(seed.wrapping_mul(3));
        let batch = random_batch(&config, &mut rng);
        let (y, _) = model.predict_batch(&batch, false, &mut rng).unwrap();
        let mut other = batch.clone();
        let ns = config.num_static;
        // Scramble every static row except target 0's.
        for v in other.statics[ns..].iter_mut() {
            *v = -*v + 0.37;
        }
        let (y2, _) = model.predict_batch(&other, false, &mut rng).unwrap();
        prop_assert!((y[0] - y2[0]).abs() < 1e-12);
    }
}
