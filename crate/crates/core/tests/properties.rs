mod common;

use latentwave::crossval::predict_items;
use latentwave::data::{normalize_weights, split_folds};
use latentwave::gp::{self, gram, KernelParams};
use latentwave::inference::{
    class_membership, covariate_effects, equal_tailed, population_proportions, TimePoint,
};
use latentwave::model::{mixture_weights, weighted_loglik, ModelConfig};
use latentwave::sampler::PosteriorDraws;
use nalgebra::DMatrix;
use ndarray::Array2;
use proptest::prelude::*;

fn small_config() -> impl Strategy<Value = ModelConfig> {
    (1usize..=3, 1usize..=4, 2usize..=4, 1usize..=3, 1usize..=5)
        .prop_map(|(h, p, d, m, t)| common::config(h, p, d, m, t))
}

fn kernel() -> impl Strategy<Value = KernelParams> {
    (0.1f64..5.0, 1.0f64..500.0, 0.01f64..1.0).prop_map(|(v, l, n)| KernelParams::new(v, l, n).unwrap())
}

fn times(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.5f64..15.0, len).prop_map(|gaps| {
        gaps.iter()
            .scan(0.0, |acc, g| {
                let t = *acc;
                *acc += g;
                Some(t)
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mixture_weights_sum_to_one_and_ignore_shifts(
        lin in prop::collection::vec(-30.0f64..30.0, 1..5),
        x in prop::collection::vec(-3.0f64..3.0, 1..4),
        shift in -50.0f64..50.0,
        seed in any::<u64>(),
    ) {
        let h = lin.len();
        let mut r = common::rng(seed);
        let beta = Array2::from_shape_fn((x.len(), h), |_| common::normal(&mut r));
        let nu = mixture_weights(&lin, &beta, &x).unwrap();
        prop_assert!((nu.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = lin.iter().map(|v| v + shift).collect();
        let nu2 = mixture_weights(&shifted, &beta, &x).unwrap();
        for (a, b) in nu.iter().zip(&nu2) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn loglik_is_linear_in_each_weight(cfg in small_config(), seed in any::<u64>(), factor in 0.1f64..5.0) {
        let mut r = common::rng(seed);
        let params = common::random_params(&mut r, &cfg);
        let mut ds = common::random_dataset(&mut r, &cfg, &params, 3);
        let base = weighted_loglik(&ds, &params, &cfg).unwrap();
        prop_assert!(base.is_finite());
        let w0 = ds.weights[0];
        ds.weights[0] = 0.0;
        let without = weighted_loglik(&ds, &params, &cfg).unwrap();
        ds.weights[0] = w0 * factor;
        let scaled = weighted_loglik(&ds, &params, &cfg).unwrap();
        let contribution = base - without;
        prop_assert!((scaled - without - factor * contribution).abs() < 1e-9 * (1.0 + base.abs()));
    }

    #[test]
    fn normalization_is_idempotent(cfg in small_config(), seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let params = common::random_params(&mut r, &cfg);
        let ds = normalize_weights(common::random_dataset(&mut r, &cfg, &params, 4));
        let sizes = ds.wave_sizes();
        let mut sums = vec![0.0; ds.waves()];
        for (&t, &w) in ds.wave_of_row.iter().zip(&ds.weights) {
            sums[t] += w;
        }
        for (s, n) in sums.iter().zip(&sizes) {
            prop_assert!((s - *n as f64).abs() <= 1e-10 * *n as f64);
        }
        let again = normalize_weights(ds.clone());
        for (a, b) in again.weights.iter().zip(&ds.weights) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn folds_partition_rows(cfg in small_config(), seed in any::<u64>(), k in 2usize..6) {
        let mut r = common::rng(seed);
        let params = common::random_params(&mut r, &cfg);
        let ds = common::random_dataset(&mut r, &cfg, &params, 7);
        let folds = split_folds(&ds, k, seed).unwrap();
        let mut seen = vec![0; ds.rows()];
        for f in 0..k {
            let test = folds.test_rows(f);
            let train = folds.train_rows(f);
            prop_assert_eq!(test.len() + train.len(), ds.rows());
            prop_assert!(test.iter().all(|i| !train.contains(i)));
            for i in test {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&s| s == 1));
    }

    #[test]
    fn gram_symmetric_with_noise_floor(kp in kernel(), ts in times(6)) {
        let c = gram(&ts, &kp);
        let n = ts.len();
        for a in 0..n {
            for b in 0..n {
                prop_assert_eq!(c[[a, b]], c[[b, a]]);
            }
        }
        let dense = DMatrix::from_fn(n, n, |a, b| c[[a, b]]);
        let min = dense.symmetric_eigen().eigenvalues.min();
        prop_assert!(min >= kp.noise - 1e-10, "min eigenvalue {min}");
    }

    #[test]
    fn logpdf_ignores_joint_permutation(kp in kernel(), ts in times(5), seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let eta: Vec<f64> = (0..5).map(|_| common::normal(&mut r)).collect();
        let order = [3, 0, 4, 1, 2];
        let pt: Vec<f64> = order.iter().map(|&i| ts[i]).collect();
        let pe: Vec<f64> = order.iter().map(|&i| eta[i]).collect();
        let a = gp::gp_logpdf(&eta, &ts, &kp).unwrap();
        let b = gp::gp_logpdf(&pe, &pt, &kp).unwrap();
        prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
    }

    #[test]
    fn predictive_variance_bounded_and_mean_linear(
        kp in kernel(),
        ts in times(5),
        new in prop::collection::vec(-20.0f64..90.0, 1..8),
        scale in -4.0f64..4.0,
        seed in any::<u64>(),
    ) {
        let mut r = common::rng(seed);
        let eta: Vec<f64> = (0..5).map(|_| common::normal(&mut r)).collect();
        let pred = gp::gp_predict(&eta, &ts, &kp, &new).unwrap();
        for v in &pred.variance {
            prop_assert!(*v >= 0.0 && *v <= kp.variance + 1e-10);
        }
        let scaled: Vec<f64> = eta.iter().map(|v| v * scale).collect();
        let pred2 = gp::gp_predict(&scaled, &ts, &kp, &new).unwrap();
        for (a, b) in pred.mean.iter().zip(&pred2.mean) {
            prop_assert!((scale * a - b).abs() < 1e-9 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn simulated_data_has_finite_loglik(cfg in small_config(), seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let params = common::random_params(&mut r, &cfg);
        let ds = common::random_dataset(&mut r, &cfg, &params, 5);
        prop_assert!(weighted_loglik(&ds, &params, &cfg).unwrap().is_finite());
    }

    #[test]
    fn odds_ratio_interval_is_exp_of_interval(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let cfg = common::config(3, 2, 3, 2, 3);
        let draws: Vec<_> = (0..50).map(|_| common::random_params(&mut r, &cfg)).collect();
        let post = PosteriorDraws::from_chains(cfg, vec![draws]);
        for e in covariate_effects(&post, 0.95).unwrap() {
            prop_assert!((e.odds_ratio_lower - e.lower.exp()).abs() < 1e-12 * e.odds_ratio_lower.max(1.0));
            prop_assert!((e.odds_ratio_upper - e.upper.exp()).abs() < 1e-12 * e.odds_ratio_upper.max(1.0));
            prop_assert!(e.lower <= e.upper);
        }
    }

    #[test]
    fn membership_ignores_shared_psi_scale(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let mut r = common::rng(seed);
        let cfg = common::config(3, 4, 3, 1, 2);
        let params = common::random_params(&mut r, &cfg);
        let mut scaled = params.clone();
        scaled.psi.mapv_inplace(|v| v * scale);
        let y = [1u8, 3, 2, 2];
        let a = class_membership(&PosteriorDraws::from_chains(cfg.clone(), vec![vec![params]]), &y, &[0.2], TimePoint::Wave(1)).unwrap();
        let b = class_membership(&PosteriorDraws::from_chains(cfg, vec![vec![scaled]]), &y, &[0.2], TimePoint::Wave(1)).unwrap();
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() < 1e-12);
        }
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn predicted_marginals_sum_to_one(seed in any::<u64>(), t in 0.0f64..30.0) {
        let mut r = common::rng(seed);
        let cfg = common::config(3, 3, 4, 2, 4);
        let draws: Vec<_> = (0..5).map(|_| common::random_params(&mut r, &cfg)).collect();
        let post = PosteriorDraws::from_chains(cfg, vec![draws]);
        let pred = predict_items(&post, &[0.3, 1.0], TimePoint::Days(t)).unwrap();
        for row in &pred.probabilities {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }
}

#[test]
fn trajectories_average_softmax_per_draw() {
    let mut r = common::rng(5);
    let cfg = common::config(3, 3, 3, 2, 4);
    let truth = common::random_params(&mut r, &cfg);
    let ds = common::random_dataset(&mut r, &cfg, &truth, 10);
    let mut draws: Vec<_> = (0..2).map(|_| common::random_params(&mut r, &cfg)).collect();
    // widely separated draws make mean-of-softmax differ from softmax-of-mean
    draws[0].eta.mapv_inplace(|v| v + 4.0);
    draws[1].eta.mapv_inplace(|v| v - 4.0);
    let post = PosteriorDraws::from_chains(cfg.clone(), vec![draws.clone()]);
    let grid = cfg.wave_times.clone();
    let traj = population_proportions(&post, &ds, &grid, 0.95, false).unwrap();
    let xbar = ds.weighted_mean_covariates();
    for (s, &t) in grid.iter().enumerate() {
        let mut expected = [0.0; 3];
        for d in &draws {
            let mut eta = vec![0.0; 3];
            for a in 1..3 {
                let col: Vec<f64> = d.eta.column(a).to_vec();
                eta[a] = gp::gp_predict(&col, &cfg.wave_times, &d.kernel_params(a), &[t]).unwrap().mean[0];
            }
            let nu = mixture_weights(&eta, &d.beta, &xbar).unwrap();
            for a in 0..3 {
                expected[a] += nu[a] / 2.0;
            }
        }
        for a in 0..3 {
            assert!((traj.mean[[a, s]] - expected[a]).abs() < 1e-12);
        }
    }
}

#[test]
fn trajectory_guard_rejects_far_extrapolation() {
    let mut r = common::rng(6);
    let cfg = common::config(2, 2, 3, 1, 3);
    let params = common::random_params(&mut r, &cfg);
    let ds = common::random_dataset(&mut r, &cfg, &params, 5);
    let post = PosteriorDraws::from_chains(cfg.clone(), vec![vec![params]]);
    let last = *cfg.wave_times.last().unwrap();
    assert!(population_proportions(&post, &ds, &[last + 14.0], 0.95, false).is_ok());
    assert!(population_proportions(&post, &ds, &[last + 15.0], 0.95, false).is_err());
    assert!(population_proportions(&post, &ds, &[last + 15.0], 0.95, true).is_ok());
    let single = population_proportions(&post, &ds, &[1.0], 0.95, false).unwrap();
    assert_eq!(single.mean.dim(), (2, 1));
}

#[test]
fn interval_of_constant_draws_is_degenerate() {
    assert_eq!(equal_tailed(&[0.3; 20], 0.95), (0.3, 0.3));
}
