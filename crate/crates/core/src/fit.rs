//! Fitting entry point: builds the posterior target, chooses starting points
//! and runs the sampler.
//!
//! The default starting points come from a weighted EM fit of a latent class
//! model with wave-specific class proportions and no covariates. Its profiles
//! are sorted by descending top-category score, so every chain starts in the
//! same labeling and table/trajectory outputs follow a stable profile order.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::data::SurveyDataset;
use crate::error::{Error, Result};
use crate::model::{to_unconstrained, ModelConfig, Parameters, Posterior, Whitened};
use crate::sampler::{self, canonical_permutation, Init, PosteriorDraws, SamplerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitStrategy {
    /// Unconstrained coordinates uniform on `[-radius, radius]`.
    Random { radius: f64 },
    /// EM point estimate plus uniform jitter of half-width `jitter` per chain.
    Em { starts: usize, iterations: usize, jitter: f64 },
}

impl Default for InitStrategy {
    fn default() -> Self {
        InitStrategy::Em {
            starts: 8,
            iterations: 200,
            jitter: 0.3,
        }
    }
}

/// Point estimate from [`em_estimate`].
#[derive(Debug, Clone)]
pub struct EmEstimate {
    pub psi: Array3<f64>,
    /// `T × H` class proportions per wave.
    pub proportions: Vec<Vec<f64>>,
    pub loglik: f64,
}

fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
}

/// Weighted EM for a latent class model with per-wave mixing proportions.
///
/// The best of `starts` random restarts is returned with profiles sorted by
/// descending mean top-category probability.
pub fn em_estimate(
    dataset: &SurveyDataset,
    profiles: usize,
    starts: usize,
    iterations: usize,
    seed: u64,
) -> Result<EmEstimate> {
    let (n, p, d, t_count) = (dataset.rows(), dataset.items(), dataset.categories, dataset.waves());
    let h = profiles;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirichlet = Gamma::new(1.0, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let mut best: Option<EmEstimate> = None;
    for _ in 0..starts.max(1) {
        let mut psi = Array3::<f64>::zeros((h, p, d));
        for a in 0..h {
            for j in 0..p {
                let mut row: Vec<f64> = (0..d).map(|_| dirichlet.sample(&mut rng) + 0.1).collect();
                normalize(&mut row);
                for c in 0..d {
                    psi[[a, j, c]] = row[c];
                }
            }
        }
        let mut props = vec![vec![1.0 / h as f64; h]; t_count];
        let mut resp = vec![0.0; h];
        let mut loglik = f64::NEG_INFINITY;
        for _ in 0..iterations {
            let mut counts = Array3::<f64>::zeros((h, p, d));
            let mut wave_mass = vec![vec![0.0; h]; t_count];
            let mut ll = 0.0;
            for i in 0..n {
                let t = dataset.wave_of_row[i];
                let w = dataset.weights[i];
                let y = dataset.responses.row(i);
                for a in 0..h {
                    let mut l = props[t][a].max(1e-300).ln();
                    for j in 0..p {
                        l += psi[[a, j, y[j] as usize - 1]].max(1e-300).ln();
                    }
                    resp[a] = l;
                }
                let max = resp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for r in resp.iter_mut() {
                    *r = (*r - max).exp();
                    total += *r;
                }
                ll += w * (max + total.ln());
                for a in 0..h {
                    let r = w * resp[a] / total;
                    wave_mass[t][a] += r;
                    for j in 0..p {
                        counts[[a, j, y[j] as usize - 1]] += r;
                    }
                }
            }
            for a in 0..h {
                for j in 0..p {
                    let mut row: Vec<f64> = (0..d).map(|c| counts[[a, j, c]] + 1e-3).collect();
                    normalize(&mut row);
                    for c in 0..d {
                        psi[[a, j, c]] = row[c];
                    }
                }
            }
            for t in 0..t_count {
                let mut row: Vec<f64> = wave_mass[t].iter().map(|m| m + 1e-3).collect();
                normalize(&mut row);
                props[t] = row;
            }
            let converged = (ll - loglik).abs() < 1e-8 * ll.abs().max(1.0);
            loglik = ll;
            if converged {
                break;
            }
        }
        if best.as_ref().map_or(true, |b| loglik > b.loglik) {
            best = Some(EmEstimate {
                psi,
                proportions: props,
                loglik,
            });
        }
    }
    let mut est = best.expect("at least one start");
    let probe = Parameters {
        psi: est.psi.clone(),
        ..Parameters::neutral(&dataset.model_config(h))
    };
    let order = canonical_permutation(&probe);
    let mut psi = est.psi.clone();
    for (new, &old) in order.iter().enumerate() {
        psi.index_axis_mut(ndarray::Axis(0), new)
            .assign(&est.psi.index_axis(ndarray::Axis(0), old));
    }
    est.psi = psi;
    est.proportions = est
        .proportions
        .iter()
        .map(|row| order.iter().map(|&old| row[old]).collect())
        .collect();
    Ok(est)
}

/// Converts an EM estimate into model parameters: log-ratio intercepts,
/// zero coefficients and kernel parameters scaled to the intercept paths.
pub fn parameters_from_em(est: &EmEstimate, config: &ModelConfig) -> Parameters {
    let mut params = Parameters::neutral(config);
    let (h, p, d) = est.psi.dim();
    for a in 0..h {
        for j in 0..p {
            let mut row: Vec<f64> = (0..d).map(|c| est.psi[[a, j, c]].max(1e-3)).collect();
            normalize(&mut row);
            for c in 0..d {
                params.psi[[a, j, c]] = row[c];
            }
        }
    }
    let times = &config.wave_times;
    let span = times.last().unwrap() - times[0];
    let typical_gap = if times.len() > 1 {
        span / (times.len() - 1) as f64
    } else {
        1.0
    };
    for a in 1..h {
        let path: Vec<f64> = est
            .proportions
            .iter()
            .map(|row| (row[a].max(1e-4) / row[0].max(1e-4)).ln().clamp(-8.0, 8.0))
            .collect();
        let mean = path.iter().sum::<f64>() / path.len() as f64;
        let var = path.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / path.len() as f64;
        for (t, v) in path.iter().enumerate() {
            params.eta[[t, a]] = *v;
        }
        let variance = (mean * mean + var).max(0.1);
        params.theta[[0, a]] = variance;
        params.theta[[1, a]] = (3.0 * typical_gap).max(1.0).powi(2);
        params.theta[[2, a]] = 0.05 * variance;
    }
    params
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub profiles: usize,
    pub sampler: SamplerConfig,
    pub init: InitStrategy,
}

/// Samples the posterior of an `profiles`-class model for `dataset`.
pub fn fit(dataset: &SurveyDataset, options: &FitOptions) -> Result<PosteriorDraws> {
    let config = dataset.model_config(options.profiles);
    let target = Whitened::new(Posterior::new(dataset, config.clone())?);
    let init = match options.init {
        InitStrategy::Random { radius } => Init::Random { radius },
        InitStrategy::Em {
            starts,
            iterations,
            jitter,
        } => {
            let est = em_estimate(dataset, options.profiles, starts, iterations, options.sampler.seed)?;
            let centre = to_unconstrained(&parameters_from_em(&est, &config), &config)?.values;
            let centre = target.from_unconstrained(&centre)?;
            let mut rng = ChaCha8Rng::seed_from_u64(options.sampler.seed ^ 0x9e37_79b9_7f4a_7c15);
            let points = (0..options.sampler.n_chains)
                .map(|_| {
                    centre
                        .iter()
                        .map(|v| v + if jitter > 0.0 { rng.random_range(-jitter..=jitter) } else { 0.0 })
                        .collect()
                })
                .collect();
            Init::Points(points)
        }
    };
    let mut output = sampler::run(&target, &init, &options.sampler)?;
    for chain in output.draws.iter_mut() {
        for q in chain.iter_mut() {
            *q = target.to_unconstrained(q)?;
        }
    }
    PosteriorDraws::from_output(output, &config, &options.sampler)
}
