#![allow(dead_code)]

use latentwave::data::{simulate, CovariateDistribution, IndependentCovariates, SurveyDataset};
use latentwave::gp::{self, KernelParams};
use latentwave::model::{
    from_unconstrained, to_unconstrained, weighted_loglik, ModelConfig, Parameters, Posterior, Whitened,
};
use latentwave::sampler::LogDensity;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn config(h: usize, p: usize, d: usize, m: usize, t: usize) -> ModelConfig {
    ModelConfig {
        profiles: h,
        items: p,
        categories: d,
        covariates: m,
        wave_times: (0..t).map(|i| 7.0 * i as f64 + (i % 3) as f64).collect(),
    }
}

pub fn dirichlet_row(rng: &mut ChaCha8Rng, d: usize, concentration: f64) -> Vec<f64> {
    let g = Gamma::new(concentration, 1.0).unwrap();
    let mut row: Vec<f64> = (0..d).map(|_| g.sample(rng) + 1e-6).collect();
    let s: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= s);
    row
}

/// Random valid parameters with well-conditioned kernels.
pub fn random_params(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Parameters {
    let mut params = Parameters::neutral(cfg);
    for a in 0..cfg.profiles {
        for j in 0..cfg.items {
            let row = dirichlet_row(rng, cfg.categories, 2.0);
            for c in 0..cfg.categories {
                params.psi[[a, j, c]] = row[c];
            }
        }
    }
    let gap = (cfg.wave_times.last().unwrap() / (cfg.waves().max(2) - 1) as f64).max(1.0);
    for a in 1..cfg.profiles {
        for k in 0..cfg.covariates {
            params.beta[[k, a]] = 0.7 * normal(rng);
        }
        for t in 0..cfg.waves() {
            params.eta[[t, a]] = normal(rng);
        }
        let variance = rng.random_range(0.5..2.0);
        params.theta[[0, a]] = variance;
        params.theta[[1, a]] = (gap * rng.random_range(0.5..3.0)).powi(2);
        params.theta[[2, a]] = variance * rng.random_range(0.05..0.5);
    }
    params
}

/// Simulated data with random positive weights.
pub fn random_dataset(rng: &mut ChaCha8Rng, cfg: &ModelConfig, params: &Parameters, per_wave: usize) -> SurveyDataset {
    let mut gen = IndependentCovariates(
        (0..cfg.covariates)
            .map(|k| {
                if k % 2 == 0 {
                    CovariateDistribution::Normal { mean: 0.0, sd: 1.0 }
                } else {
                    CovariateDistribution::Bernoulli { p: 0.4 }
                }
            })
            .collect(),
    );
    let sizes = vec![per_wave; cfg.waves()];
    let mut ds = simulate(params, cfg, &mut gen, &sizes, rng.random()).unwrap().dataset;
    for w in ds.weights.iter_mut() {
        *w = rng.random_range(0.2..2.0);
    }
    ds
}

/// Norm-wise relative error of the analytic gradient against central
/// differences at one point.
pub fn gradient_error<T: LogDensity>(target: &T, point: &[f64]) -> f64 {
    let mut grad = vec![0.0; point.len()];
    let mut scratch = vec![0.0; point.len()];
    target.log_density_and_grad(point, &mut grad).unwrap();
    let step = 1e-5;
    let mut diff = 0.0;
    let mut norm = 0.0;
    let mut x = point.to_vec();
    for k in 0..point.len() {
        x[k] = point[k] + step;
        let up = target.log_density_and_grad(&x, &mut scratch).unwrap();
        x[k] = point[k] - step;
        let down = target.log_density_and_grad(&x, &mut scratch).unwrap();
        x[k] = point[k];
        let fd = (up - down) / (2.0 * step);
        diff += (grad[k] - fd).powi(2);
        norm += fd * fd;
    }
    diff.sqrt() / norm.sqrt().max(1e-8)
}

/// Largest gradient error over `points` random positions for one design.
pub fn gradient_check(dims: (usize, usize, usize, usize, usize), points: usize, seed: u64) -> f64 {
    let (h, p, d, m, t) = dims;
    let mut r = rng(seed);
    let cfg = config(h, p, d, m, t);
    let truth = random_params(&mut r, &cfg);
    let ds = random_dataset(&mut r, &cfg, &truth, 6);
    let posterior = Posterior::new(&ds, cfg.clone()).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let mut at = random_params(&mut r, &cfg);
        // also visit rough intercept paths
        for v in at.eta.iter_mut() {
            *v *= 1.5;
        }
        let point = to_unconstrained(&at, &cfg).unwrap().values;
        worst = worst.max(gradient_error(&posterior, &point));
    }
    worst
}

/// Brute-force pseudo-likelihood: explicit probabilities, no log-space tricks.
pub fn naive_loglik(ds: &SurveyDataset, params: &Parameters) -> f64 {
    let (h, p, _) = params.psi.dim();
    let mut total = 0.0;
    for i in 0..ds.rows() {
        let t = ds.wave_of_row[i];
        let x = ds.covariates.row(i);
        let scores: Vec<f64> = (0..h)
            .map(|a| {
                let lin: f64 = params.eta[[t, a]] + (0..x.len()).map(|k| params.beta[[k, a]] * x[k]).sum::<f64>();
                lin.exp()
            })
            .collect();
        let z: f64 = scores.iter().sum();
        let mut like = 0.0;
        for a in 0..h {
            let mut prod = scores[a] / z;
            for j in 0..p {
                prod *= params.psi[[a, j, ds.responses[[i, j]] as usize - 1]];
            }
            like += prod;
        }
        total += ds.weights[i] * like.ln();
    }
    total
}

pub fn loglik_oracle_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let h = r.random_range(1..=3);
    let p = r.random_range(1..=3);
    let d = r.random_range(2..=3);
    let m = r.random_range(1..=2);
    let t = r.random_range(1..=3);
    let cfg = config(h, p, d, m, t);
    let params = random_params(&mut r, &cfg);
    let n_per = r.random_range(1..=(10 / t).max(1));
    let ds = random_dataset(&mut r, &cfg, &params, n_per);
    let fast = weighted_loglik(&ds, &params, &cfg).unwrap();
    (fast - naive_loglik(&ds, &params)).abs()
}

fn dense_gram(times: &[f64], kp: &KernelParams) -> DMatrix<f64> {
    DMatrix::from_fn(times.len(), times.len(), |a, b| {
        let lag = times[a] - times[b];
        let nugget = if a == b { kp.noise } else { 0.0 };
        kp.variance * (-lag * lag / (2.0 * kp.length_scale)).exp() + nugget
    })
}

/// Errors of the GP log-density, predictive mean and predictive variance
/// against dense-inverse formulas on one random 5-point instance.
pub fn gp_oracle_errors(seed: u64) -> [f64; 3] {
    let mut r = rng(seed);
    let mut times: Vec<f64> = (0..5).map(|_| r.random_range(0.0..60.0)).collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let kp = KernelParams::new(
        r.random_range(0.3..3.0),
        r.random_range(5.0..400.0),
        r.random_range(0.05..0.5),
    )
    .unwrap();
    let eta: Vec<f64> = (0..5).map(|_| normal(&mut r)).collect();
    let new_times: Vec<f64> = (0..7).map(|_| r.random_range(-10.0..70.0)).collect();

    let c = dense_gram(&times, &kp);
    let inv = c.clone().try_inverse().unwrap();
    let e = DVector::from_vec(eta.clone());
    let quad = (e.transpose() * &inv * &e)[(0, 0)];
    let logpdf = -0.5 * quad - 0.5 * c.determinant().ln() - 2.5 * (2.0 * std::f64::consts::PI).ln();
    let lp_err = (gp::gp_logpdf(&eta, &times, &kp).unwrap() - logpdf).abs();

    let pred = gp::gp_predict(&eta, &times, &kp, &new_times).unwrap();
    let mut mean_err: f64 = 0.0;
    let mut var_err: f64 = 0.0;
    for (s, &ts) in new_times.iter().enumerate() {
        let k = DVector::from_fn(5, |a, _| {
            let lag = ts - times[a];
            kp.variance * (-lag * lag / (2.0 * kp.length_scale)).exp()
        });
        let mean = (k.transpose() * &inv * &e)[(0, 0)];
        let var = (kp.variance - (k.transpose() * &inv * &k)[(0, 0)]).max(0.0);
        mean_err = mean_err.max((pred.mean[s] - mean).abs());
        var_err = var_err.max((pred.variance[s] - var).abs());
    }
    [lp_err, mean_err, var_err]
}

/// Max abs error of the unconstrained round trip for one random draw.
pub fn roundtrip_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let cfg = config(
        r.random_range(1..=4),
        r.random_range(1..=6),
        r.random_range(2..=5),
        r.random_range(1..=3),
        r.random_range(1..=8),
    );
    let mut params = random_params(&mut r, &cfg);
    for a in 1..cfg.profiles {
        for q in 0..3 {
            params.theta[[q, a]] = (3.0 * normal(&mut r)).exp();
        }
    }
    let u = to_unconstrained(&params, &cfg).unwrap();
    let back = from_unconstrained(&u.values, &cfg).unwrap();
    params
        .flatten()
        .iter()
        .zip(back.flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}


/// Largest gradient error of the whitened target, and largest round-trip
/// error of its coordinate map, over `points` random positions.
pub fn whitened_check(dims: (usize, usize, usize, usize, usize), points: usize, seed: u64) -> (f64, f64) {
    let (h, p, d, m, t) = dims;
    let mut r = rng(seed);
    let cfg = config(h, p, d, m, t);
    let truth = random_params(&mut r, &cfg);
    let ds = random_dataset(&mut r, &cfg, &truth, 6);
    let target = Whitened::new(Posterior::new(&ds, cfg.clone()).unwrap());
    let (mut grad_err, mut trip_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..points {
        let at = random_params(&mut r, &cfg);
        let u = to_unconstrained(&at, &cfg).unwrap().values;
        let w = target.from_unconstrained(&u).unwrap();
        let back = target.to_unconstrained(&w).unwrap();
        trip_err = trip_err.max(u.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        grad_err = grad_err.max(gradient_error(&target, &w));
    }
    (grad_err, trip_err)
}
