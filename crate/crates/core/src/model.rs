//! Parameter blocks, the unconstrained reparameterization and the weighted
//! log-posterior of the dynamic latent-class regression.
//!
//! Profile 1 is the reference: its intercept path and its covariate
//! coefficients are pinned to zero, and it carries no kernel parameters.

use std::collections::HashMap;
use std::ops::Range;

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SurveyDataset;
use crate::error::{Error, Result};
use crate::gp::{self, KernelParams};
use crate::sampler::LogDensity;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Floor applied to probabilities inside logarithms only.
pub const PROB_FLOOR: f64 = 1e-300;
/// Standard deviation of the log-normal hyperprior on kernel parameters, on the log scale.
pub const HYPER_LOG_SD: f64 = 10.0;
/// Rows per partial sum in the likelihood reduction.
const ROW_CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub profiles: usize,
    pub items: usize,
    pub categories: usize,
    pub covariates: usize,
    pub wave_times: Vec<f64>,
}

impl ModelConfig {
    pub fn waves(&self) -> usize {
        self.wave_times.len()
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.profiles < 1 {
            problems.push("profiles must be at least 1".to_string());
        }
        if self.items < 1 {
            problems.push("items must be at least 1".to_string());
        }
        if self.categories < 2 {
            problems.push("categories must be at least 2".to_string());
        }
        if self.covariates < 1 {
            problems.push("covariates must be at least 1".to_string());
        }
        if self.wave_times.is_empty() {
            problems.push("at least one wave is required".to_string());
        }
        if self.wave_times.iter().any(|t| !t.is_finite()) {
            problems.push("wave times must be finite".to_string());
        }
        if self.wave_times.windows(2).any(|w| w[1] <= w[0]) {
            problems.push("wave times must be strictly increasing".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParameters(problems))
        }
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }
}

/// Offsets of each parameter block inside the flat unconstrained vector.
///
/// Blocks are ordered `psi`, `beta`, `eta`, `theta`. Within a block the
/// profile index varies slowest.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub psi: Range<usize>,
    pub beta: Range<usize>,
    pub eta: Range<usize>,
    pub theta: Range<usize>,
    profiles: usize,
    items: usize,
    categories: usize,
    covariates: usize,
    waves: usize,
}

impl Layout {
    fn new(c: &ModelConfig) -> Self {
        let free = c.profiles.saturating_sub(1);
        let n_psi = c.profiles * c.items * (c.categories - 1);
        let n_beta = c.covariates * free;
        let n_eta = c.waves() * free;
        let n_theta = 3 * free;
        let psi = 0..n_psi;
        let beta = psi.end..psi.end + n_beta;
        let eta = beta.end..beta.end + n_eta;
        let theta = eta.end..eta.end + n_theta;
        Layout {
            psi,
            beta,
            eta,
            theta,
            profiles: c.profiles,
            items: c.items,
            categories: c.categories,
            covariates: c.covariates,
            waves: c.waves(),
        }
    }

    pub fn len(&self) -> usize {
        self.theta.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Logit coordinate `c < d - 1` of the response row `(h, j)`.
    pub fn psi_index(&self, h: usize, j: usize, c: usize) -> usize {
        self.psi.start + (h * self.items + j) * (self.categories - 1) + c
    }

    /// Coefficient `k` of profile `h >= 1` (zero-based).
    pub fn beta_index(&self, k: usize, h: usize) -> usize {
        self.beta.start + (h - 1) * self.covariates + k
    }

    pub fn eta_index(&self, t: usize, h: usize) -> usize {
        self.eta.start + (h - 1) * self.waves + t
    }

    /// Log kernel parameter `q` of profile `h >= 1`.
    pub fn theta_index(&self, q: usize, h: usize) -> usize {
        self.theta.start + (h - 1) * 3 + q
    }

    /// Human-readable names of the unconstrained coordinates.
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.len());
        for h in 0..self.profiles {
            for j in 0..self.items {
                for c in 0..self.categories - 1 {
                    names.push(format!("logit_psi[{},{},{}]", h + 1, j + 1, c + 1));
                }
            }
        }
        for h in 1..self.profiles {
            for k in 0..self.covariates {
                names.push(format!("beta[{},{}]", k + 1, h + 1));
            }
        }
        for h in 1..self.profiles {
            for t in 0..self.waves {
                names.push(format!("eta[{},{}]", t + 1, h + 1));
            }
        }
        for h in 1..self.profiles {
            for q in 0..3 {
                names.push(format!("log_theta[{},{}]", q + 1, h + 1));
            }
        }
        names
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnconstrainedVector {
    pub values: Vec<f64>,
    pub layout: Layout,
}

/// Constrained model parameters.
///
/// `beta[.., 0]`, `eta[.., 0]` are identically zero and `theta[.., 0]` is
/// unused (kept at zero).
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    /// `H × p × d`, each `(h, j)` row a probability vector.
    pub psi: Array3<f64>,
    /// `m × H`.
    pub beta: Array2<f64>,
    /// `T × H`, intercepts at the wave times.
    pub eta: Array2<f64>,
    /// `3 × H`: variance, length-scale, noise.
    pub theta: Array2<f64>,
}

impl Parameters {
    /// Uniform response rows, zero effects and unit kernel parameters.
    pub fn neutral(config: &ModelConfig) -> Self {
        let h = config.profiles;
        let mut theta = Array2::ones((3, h));
        theta.column_mut(0).fill(0.0);
        Parameters {
            psi: Array3::from_elem(
                (h, config.items, config.categories),
                1.0 / config.categories as f64,
            ),
            beta: Array2::zeros((config.covariates, h)),
            eta: Array2::zeros((config.waves(), h)),
            theta,
        }
    }

    pub fn profiles(&self) -> usize {
        self.psi.shape()[0]
    }

    pub fn kernel_params(&self, h: usize) -> KernelParams {
        KernelParams {
            variance: self.theta[[0, h]],
            length_scale: self.theta[[1, h]],
            noise: self.theta[[2, h]],
        }
    }

    /// Checks shapes against `config` and every block invariant, reporting
    /// the offending cells.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let (h, p, d, m, t) = (
            config.profiles,
            config.items,
            config.categories,
            config.covariates,
            config.waves(),
        );
        let mut problems = Vec::new();
        if self.psi.shape() != [h, p, d] {
            problems.push(format!("psi has shape {:?}, expected {:?}", self.psi.shape(), [h, p, d]));
        }
        if self.beta.shape() != [m, h] {
            problems.push(format!("beta has shape {:?}, expected {:?}", self.beta.shape(), [m, h]));
        }
        if self.eta.shape() != [t, h] {
            problems.push(format!("eta has shape {:?}, expected {:?}", self.eta.shape(), [t, h]));
        }
        if self.theta.shape() != [3, h] {
            problems.push(format!("theta has shape {:?}, expected {:?}", self.theta.shape(), [3, h]));
        }
        if !problems.is_empty() {
            return Err(Error::InvalidParameters(problems));
        }
        for a in 0..h {
            for j in 0..p {
                let row = self.psi.slice(ndarray::s![a, j, ..]);
                for (c, &v) in row.iter().enumerate() {
                    if !(v >= 0.0) || !v.is_finite() {
                        problems.push(format!("psi[{},{},{}] = {v} is not a probability", a + 1, j + 1, c + 1));
                    }
                }
                let sum: f64 = row.sum();
                if (sum - 1.0).abs() > 1e-12 {
                    problems.push(format!("psi[{},{},:] sums to {sum}", a + 1, j + 1));
                }
            }
        }
        for k in 0..m {
            if self.beta[[k, 0]] != 0.0 {
                problems.push(format!("beta[{},1] must be 0 (reference profile)", k + 1));
            }
            for a in 1..h {
                if !self.beta[[k, a]].is_finite() {
                    problems.push(format!("beta[{},{}] is not finite", k + 1, a + 1));
                }
            }
        }
        for s in 0..t {
            if self.eta[[s, 0]] != 0.0 {
                problems.push(format!("eta[{},1] must be 0 (reference profile)", s + 1));
            }
            for a in 1..h {
                if !self.eta[[s, a]].is_finite() {
                    problems.push(format!("eta[{},{}] is not finite", s + 1, a + 1));
                }
            }
        }
        for q in 0..3 {
            for a in 1..h {
                let v = self.theta[[q, a]];
                if !(v > 0.0) || !v.is_finite() {
                    problems.push(format!("theta[{},{}] = {v} must be strictly positive", q + 1, a + 1));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParameters(problems))
        }
    }

    /// Flattened constrained values in the order of [`constrained_names`].
    pub fn flatten(&self) -> Vec<f64> {
        let (h, p, d) = self.psi.dim();
        let m = self.beta.nrows();
        let t = self.eta.nrows();
        let mut out = Vec::with_capacity(h * p * d + (h - 1) * (m + t + 3));
        out.extend(self.psi.iter().copied());
        for a in 1..h {
            out.extend((0..m).map(|k| self.beta[[k, a]]));
        }
        for a in 1..h {
            out.extend((0..t).map(|s| self.eta[[s, a]]));
        }
        for a in 1..h {
            out.extend((0..3).map(|q| self.theta[[q, a]]));
        }
        out
    }

    pub fn from_flat(config: &ModelConfig, values: &[f64]) -> Result<Self> {
        let (h, p, d, m, t) = (
            config.profiles,
            config.items,
            config.categories,
            config.covariates,
            config.waves(),
        );
        let expected = h * p * d + (h - 1) * (m + t + 3);
        if values.len() != expected {
            return Err(Error::Dimension(format!(
                "flat parameter vector has length {}, expected {expected}",
                values.len()
            )));
        }
        let mut out = Parameters::neutral(config);
        let mut it = values.iter().copied();
        for v in out.psi.iter_mut() {
            *v = it.next().unwrap();
        }
        for a in 1..h {
            for k in 0..m {
                out.beta[[k, a]] = it.next().unwrap();
            }
        }
        for a in 1..h {
            for s in 0..t {
                out.eta[[s, a]] = it.next().unwrap();
            }
        }
        for a in 1..h {
            for q in 0..3 {
                out.theta[[q, a]] = it.next().unwrap();
            }
        }
        Ok(out)
    }
}

/// Column names for [`Parameters::flatten`], one-based.
pub fn constrained_names(config: &ModelConfig) -> Vec<String> {
    let mut names = Vec::new();
    for h in 0..config.profiles {
        for j in 0..config.items {
            for c in 0..config.categories {
                names.push(format!("psi[{},{},{}]", h + 1, j + 1, c + 1));
            }
        }
    }
    for h in 1..config.profiles {
        for k in 0..config.covariates {
            names.push(format!("beta[{},{}]", k + 1, h + 1));
        }
    }
    for h in 1..config.profiles {
        for t in 0..config.waves() {
            names.push(format!("eta[{},{}]", t + 1, h + 1));
        }
    }
    for h in 1..config.profiles {
        for q in 0..3 {
            names.push(format!("theta[{},{}]", q + 1, h + 1));
        }
    }
    names
}

/// Block-structured JSON form of [`Parameters`] with the configuration echoed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParametersDocument {
    pub config: ModelConfig,
    /// `psi[h][j][c]`.
    pub psi: Vec<Vec<Vec<f64>>>,
    /// `beta[k][h]`.
    pub beta: Vec<Vec<f64>>,
    /// `eta[t][h]`.
    pub eta: Vec<Vec<f64>>,
    /// `theta[q][h]`.
    pub theta: Vec<Vec<f64>>,
}

impl ParametersDocument {
    pub fn new(config: &ModelConfig, params: &Parameters) -> Self {
        let rows = |a: &Array2<f64>| a.rows().into_iter().map(|r| r.to_vec()).collect();
        ParametersDocument {
            config: config.clone(),
            psi: params
                .psi
                .outer_iter()
                .map(|m| m.rows().into_iter().map(|r| r.to_vec()).collect())
                .collect(),
            beta: rows(&params.beta),
            eta: rows(&params.eta),
            theta: rows(&params.theta),
        }
    }

    /// Rebuilds and validates the parameters.
    pub fn into_parameters(self) -> Result<(ModelConfig, Parameters)> {
        let config = self.config;
        config.validate()?;
        let to2 = |name: &str, v: Vec<Vec<f64>>, rows: usize, cols: usize| -> Result<Array2<f64>> {
            if v.len() != rows || v.iter().any(|r| r.len() != cols) {
                return Err(Error::InvalidParameters(vec![format!(
                    "{name} must be {rows} x {cols}"
                )]));
            }
            Ok(Array2::from_shape_vec((rows, cols), v.concat()).unwrap())
        };
        let (h, p, d) = (config.profiles, config.items, config.categories);
        if self.psi.len() != h
            || self.psi.iter().any(|m| m.len() != p || m.iter().any(|r| r.len() != d))
        {
            return Err(Error::InvalidParameters(vec![format!("psi must be {h} x {p} x {d}")]));
        }
        let psi = Array3::from_shape_vec((h, p, d), self.psi.concat().concat()).unwrap();
        let params = Parameters {
            psi,
            beta: to2("beta", self.beta, config.covariates, h)?,
            eta: to2("eta", self.eta, config.waves(), h)?,
            theta: to2("theta", self.theta, 3, h)?,
        };
        params.validate(&config)?;
        Ok((config, params))
    }
}

pub fn to_unconstrained(params: &Parameters, config: &ModelConfig) -> Result<UnconstrainedVector> {
    params.validate(config)?;
    let layout = config.layout();
    let mut values = vec![0.0; layout.len()];
    let (h, p, d) = params.psi.dim();
    for a in 0..h {
        for j in 0..p {
            let last = params.psi[[a, j, d - 1]].max(PROB_FLOOR).ln();
            for c in 0..d - 1 {
                values[layout.psi_index(a, j, c)] = params.psi[[a, j, c]].max(PROB_FLOOR).ln() - last;
            }
        }
    }
    for a in 1..h {
        for k in 0..config.covariates {
            values[layout.beta_index(k, a)] = params.beta[[k, a]];
        }
        for t in 0..config.waves() {
            values[layout.eta_index(t, a)] = params.eta[[t, a]];
        }
        for q in 0..3 {
            values[layout.theta_index(q, a)] = params.theta[[q, a]].ln();
        }
    }
    Ok(UnconstrainedVector { values, layout })
}

pub fn from_unconstrained(values: &[f64], config: &ModelConfig) -> Result<Parameters> {
    let layout = config.layout();
    if values.len() != layout.len() {
        return Err(Error::Dimension(format!(
            "unconstrained vector has length {}, expected {}",
            values.len(),
            layout.len()
        )));
    }
    let mut params = Parameters::neutral(config);
    let (h, p, d) = (config.profiles, config.items, config.categories);
    let mut logits = vec![0.0; d];
    for a in 0..h {
        for j in 0..p {
            for c in 0..d - 1 {
                logits[c] = values[layout.psi_index(a, j, c)];
            }
            logits[d - 1] = 0.0;
            let probs = softmax(&logits);
            for c in 0..d {
                params.psi[[a, j, c]] = probs[c];
            }
        }
    }
    for a in 1..h {
        for k in 0..config.covariates {
            params.beta[[k, a]] = values[layout.beta_index(k, a)];
        }
        for t in 0..config.waves() {
            params.eta[[t, a]] = values[layout.eta_index(t, a)];
        }
        for q in 0..3 {
            params.theta[[q, a]] = values[layout.theta_index(q, a)].exp();
        }
    }
    Ok(params)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    out
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Profile-membership probabilities for one subject.
///
/// `eta_row[h] + beta[.., h] · x` are the log-odds against profile 1.
pub fn mixture_weights(eta_row: &[f64], beta: &Array2<f64>, x: &[f64]) -> Result<Vec<f64>> {
    let h = eta_row.len();
    if beta.ncols() != h || beta.nrows() != x.len() {
        return Err(Error::Dimension(format!(
            "eta row has {h} profiles, beta is {:?}, x has {} entries",
            beta.shape(),
            x.len()
        )));
    }
    let mut lin = linear_predictor(eta_row, beta, x);
    if lin.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mixture-weight linear predictor".into()));
    }
    let lse = log_sum_exp(&lin);
    lin.iter_mut().for_each(|v| *v = (*v - lse).exp());
    Ok(lin)
}

fn linear_predictor(eta_row: &[f64], beta: &Array2<f64>, x: &[f64]) -> Vec<f64> {
    (0..eta_row.len())
        .map(|h| {
            eta_row[h]
                + x.iter()
                    .enumerate()
                    .map(|(k, xk)| beta[[k, h]] * xk)
                    .sum::<f64>()
        })
        .collect()
}

/// Log-likelihood of one response vector (categories `1..=d`) under the mixture.
pub fn loglik_subject(y: &[u8], nu: &[f64], psi: &Array3<f64>) -> f64 {
    let terms: Vec<f64> = nu
        .iter()
        .enumerate()
        .map(|(h, &v)| {
            let mut acc = if v > 0.0 { v.ln() } else { f64::NEG_INFINITY };
            for (j, &c) in y.iter().enumerate() {
                acc += psi[[h, j, c as usize - 1]].max(PROB_FLOOR).ln();
            }
            acc
        })
        .collect();
    log_sum_exp(&terms)
}

fn check_dims(dataset: &SurveyDataset, params: &Parameters, config: &ModelConfig) -> Result<()> {
    let mut problems = Vec::new();
    if dataset.items() != config.items {
        problems.push(format!("dataset has {} items, config {}", dataset.items(), config.items));
    }
    if dataset.covariate_count() != config.covariates {
        problems.push(format!(
            "dataset has {} covariates, config {}",
            dataset.covariate_count(),
            config.covariates
        ));
    }
    if dataset.waves() != config.waves() {
        problems.push(format!("dataset has {} waves, config {}", dataset.waves(), config.waves()));
    }
    if dataset.categories != config.categories {
        problems.push(format!(
            "dataset has {} categories, config {}",
            dataset.categories, config.categories
        ));
    }
    if let Err(Error::InvalidParameters(p)) = params.validate(config) {
        problems.extend(p);
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Dimension(problems.join("; ")))
    }
}

/// Survey-weighted pseudo log-likelihood `Σ_i w_i log p(y_i | x_i, t_i)`.
pub fn weighted_loglik(dataset: &SurveyDataset, params: &Parameters, config: &ModelConfig) -> Result<f64> {
    check_dims(dataset, params, config)?;
    let patterns = Patterns::new(dataset);
    let eval = Evaluator::new(dataset, &patterns, params, false);
    Ok(eval.run().value)
}

/// Log prior density of the constrained parameters.
pub fn log_prior(params: &Parameters, config: &ModelConfig) -> Result<f64> {
    params.validate(config)?;
    let h = config.profiles;
    let mut total = 0.0;
    for a in 1..h {
        let kp = params.kernel_params(a);
        let eta: Vec<f64> = params.eta.column(a).to_vec();
        total += gp::gp_logpdf(&eta, &config.wave_times, &kp)?;
        for k in 0..config.covariates {
            let b = params.beta[[k, a]];
            total += -0.5 * b * b - 0.5 * LN_2PI;
        }
        for q in 0..3 {
            total += log_normal_logpdf(params.theta[[q, a]]);
        }
    }
    total += (h * config.items) as f64 * ln_factorial(config.categories - 1);
    Ok(total)
}

fn log_normal_logpdf(v: f64) -> f64 {
    let z = v.ln() / HYPER_LOG_SD;
    -v.ln() - HYPER_LOG_SD.ln() - 0.5 * LN_2PI - 0.5 * z * z
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// Log-determinant of the Jacobian of `from_unconstrained` at `params`.
pub fn log_jacobian(params: &Parameters) -> f64 {
    let simplex: f64 = params.psi.iter().map(|v| v.max(PROB_FLOOR).ln()).sum();
    let h = params.profiles();
    let log_scale: f64 = (1..h)
        .flat_map(|a| (0..3).map(move |q| (q, a)))
        .map(|(q, a)| params.theta[[q, a]].ln())
        .sum();
    simplex + log_scale
}

/// Distinct response patterns of a dataset and the pattern of each row.
#[derive(Debug, Clone)]
struct Patterns {
    /// Flattened `U × p`, one-based categories.
    values: Vec<u8>,
    of_row: Vec<usize>,
}

impl Patterns {
    fn new(dataset: &SurveyDataset) -> Self {
        let mut index: HashMap<Vec<u8>, usize> = HashMap::new();
        let mut values = Vec::new();
        let of_row = dataset
            .responses
            .rows()
            .into_iter()
            .map(|row| {
                let key = row.to_vec();
                let next = index.len();
                *index.entry(key).or_insert_with_key(|k| {
                    values.extend_from_slice(k);
                    next
                })
            })
            .collect();
        Patterns { values, of_row }
    }

    fn len(&self, items: usize) -> usize {
        self.values.len() / items.max(1)
    }
}

struct Partial {
    value: f64,
    /// `∂/∂ log P[u, h]` summed over rows, flattened `U × H`.
    g_pattern: Vec<f64>,
    /// `∂/∂ lin[t, h]` summed over rows, flattened `T × H`.
    g_eta: Vec<f64>,
    /// `∂/∂ beta[k, h]`, flattened `m × H`.
    g_beta: Vec<f64>,
}

struct Evaluator<'a> {
    dataset: &'a SurveyDataset,
    patterns: &'a Patterns,
    h: usize,
    p: usize,
    d: usize,
    m: usize,
    /// `Σ_j log psi[h, j, y_uj]`, flattened `U × H`.
    log_pattern: Vec<f64>,
    /// `exp(log_pattern - shift[u])`.
    scaled_pattern: Vec<f64>,
    /// Largest `log_pattern` of each pattern.
    shift: Vec<f64>,
    eta: Vec<f64>,
    beta: Vec<f64>,
    with_grad: bool,
}

impl<'a> Evaluator<'a> {
    fn new(dataset: &'a SurveyDataset, patterns: &'a Patterns, params: &Parameters, with_grad: bool) -> Self {
        let (h, p, d) = params.psi.dim();
        let m = params.beta.nrows();
        let log_psi: Vec<f64> = params.psi.iter().map(|v| v.max(PROB_FLOOR).ln()).collect();
        let u_count = patterns.len(p);
        let mut log_pattern = vec![0.0; u_count * h];
        let mut scaled_pattern = vec![0.0; u_count * h];
        let mut shift = vec![0.0; u_count];
        for u in 0..u_count {
            let y = &patterns.values[u * p..(u + 1) * p];
            let lp = &mut log_pattern[u * h..(u + 1) * h];
            for (a, slot) in lp.iter_mut().enumerate() {
                let base = a * p * d;
                *slot = (0..p).map(|j| log_psi[base + j * d + y[j] as usize - 1]).sum();
            }
            let max = lp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            shift[u] = max;
            for a in 0..h {
                scaled_pattern[u * h + a] = (lp[a] - max).exp();
            }
        }
        Evaluator {
            dataset,
            patterns,
            h,
            p,
            d,
            m,
            log_pattern,
            scaled_pattern,
            shift,
            eta: params.eta.iter().copied().collect(),
            beta: params.beta.iter().copied().collect(),
            with_grad,
        }
    }

    fn run(&self) -> Partial {
        let n = self.dataset.rows();
        let chunks: Vec<Range<usize>> = (0..n)
            .step_by(ROW_CHUNK)
            .map(|s| s..(s + ROW_CHUNK).min(n))
            .collect();
        let partials: Vec<Partial> = chunks.into_par_iter().map(|r| self.chunk(r)).collect();
        let mut iter = partials.into_iter();
        let mut total = match iter.next() {
            Some(p) => p,
            None => self.empty(),
        };
        for p in iter {
            total.value += p.value;
            if self.with_grad {
                add_assign(&mut total.g_pattern, &p.g_pattern);
                add_assign(&mut total.g_eta, &p.g_eta);
                add_assign(&mut total.g_beta, &p.g_beta);
            }
        }
        total
    }

    /// Scatters the pattern gradient onto `∂/∂ log psi`, flattened `H × p × d`.
    fn grad_log_psi(&self, part: &Partial) -> Vec<f64> {
        let (h, p, d) = (self.h, self.p, self.d);
        let mut out = vec![0.0; h * p * d];
        for u in 0..self.patterns.len(p) {
            let y = &self.patterns.values[u * p..(u + 1) * p];
            for a in 0..h {
                let g = part.g_pattern[u * h + a];
                if g == 0.0 {
                    continue;
                }
                let base = a * p * d;
                for j in 0..p {
                    out[base + j * d + y[j] as usize - 1] += g;
                }
            }
        }
        out
    }

    fn empty(&self) -> Partial {
        let h = self.h;
        let (sz_pat, sz_eta, sz_beta) = if self.with_grad {
            (self.shift.len() * h, self.eta.len(), self.beta.len())
        } else {
            (0, 0, 0)
        };
        Partial {
            value: 0.0,
            g_pattern: vec![0.0; sz_pat],
            g_eta: vec![0.0; sz_eta],
            g_beta: vec![0.0; sz_beta],
        }
    }

    fn chunk(&self, rows: Range<usize>) -> Partial {
        let (h, m) = (self.h, self.m);
        let ds = self.dataset;
        let mut out = self.empty();
        let mut lin = vec![0.0; h];
        let mut nu = vec![0.0; h];
        let mut a = vec![0.0; h];
        let mut r = vec![0.0; h];
        let xs = ds.covariates.as_standard_layout();
        let xs = xs.as_slice().unwrap();
        for i in rows {
            let t = ds.wave_of_row[i];
            let w = ds.weights[i];
            let u = self.patterns.of_row[i];
            let x = &xs[i * m..(i + 1) * m];
            let eta = &self.eta[t * h..(t + 1) * h];
            for hh in 0..h {
                let mut v = eta[hh];
                for k in 0..m {
                    v += self.beta[k * h + hh] * x[k];
                }
                lin[hh] = v;
            }
            let lse_lin = softmax_into(&lin, &mut nu);
            let pat = &self.scaled_pattern[u * h..(u + 1) * h];
            let mut total = 0.0;
            for hh in 0..h {
                r[hh] = nu[hh] * pat[hh];
                total += r[hh];
            }
            let li = if total.is_normal() {
                r.iter_mut().for_each(|v| *v /= total);
                total.ln() + self.shift[u]
            } else {
                // every profile underflows in linear scale
                let lp = &self.log_pattern[u * h..(u + 1) * h];
                for hh in 0..h {
                    a[hh] = lin[hh] - lse_lin + lp[hh];
                }
                softmax_into(&a, &mut r)
            };
            out.value += w * li;
            if self.with_grad {
                for hh in 0..h {
                    let wr = w * r[hh];
                    out.g_pattern[u * h + hh] += wr;
                    let g_lin = w * (r[hh] - nu[hh]);
                    out.g_eta[t * h + hh] += g_lin;
                    for k in 0..m {
                        out.g_beta[k * h + hh] += g_lin * x[k];
                    }
                }
            }
        }
        out
    }
}

/// Writes softmax(values) into `probs` and returns log-sum-exp(values).
fn softmax_into(values: &[f64], probs: &mut [f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        probs.iter_mut().for_each(|p| *p = 0.0);
        return f64::NEG_INFINITY;
    }
    let mut total = 0.0;
    for (p, v) in probs.iter_mut().zip(values) {
        *p = (v - max).exp();
        total += *p;
    }
    probs.iter_mut().for_each(|p| *p /= total);
    max + total.ln()
}

fn add_assign(acc: &mut [f64], other: &[f64]) {
    for (a, b) in acc.iter_mut().zip(other) {
        *a += b;
    }
}

/// The unnormalized log-posterior on the unconstrained scale:
/// weighted log-likelihood, log prior and log-Jacobian of the transforms.
#[derive(Debug, Clone)]
pub struct Posterior<'a> {
    dataset: &'a SurveyDataset,
    patterns: Patterns,
    config: ModelConfig,
    layout: Layout,
}

impl<'a> Posterior<'a> {
    pub fn new(dataset: &'a SurveyDataset, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        check_dims(dataset, &Parameters::neutral(&config), &config)?;
        let layout = config.layout();
        Ok(Posterior {
            dataset,
            patterns: Patterns::new(dataset),
            config,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn dataset(&self) -> &SurveyDataset {
        self.dataset
    }

    /// Target value and gradient at `position`.
    pub fn log_posterior_and_grad(&self, position: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.layout.len()];
        let v = self.eval(position, &mut grad)?;
        Ok((v, grad))
    }

    fn eval(&self, position: &[f64], grad: &mut [f64]) -> Result<f64> {
        let params = from_unconstrained(position, &self.config)?;
        let mut value = self.shared_terms(&params, position, grad);
        let lay = &self.layout;
        for a in 1..self.config.profiles {
            let eta: Vec<f64> = params.eta.column(a).to_vec();
            let dens = gp::gp_logpdf_with_grad(&eta, &self.config.wave_times, &params.kernel_params(a))?;
            value += dens.value;
            for (t, g) in dens.grad_eta.iter().enumerate() {
                grad[lay.eta_index(t, a)] += g;
            }
            for q in 0..3 {
                grad[lay.theta_index(q, a)] += dens.grad_log_params[q];
            }
        }
        check_finite(value, grad)
    }

    /// Every term except the GP density of the intercepts: the weighted
    /// log-likelihood, the simplex and coefficient priors with their
    /// Jacobians, and the hyperprior on the log kernel parameters. The
    /// intercept block of `grad` receives the likelihood part only.
    fn shared_terms(&self, params: &Parameters, position: &[f64], grad: &mut [f64]) -> f64 {
        let cfg = &self.config;
        let lay = &self.layout;
        let (h, p, d) = (cfg.profiles, cfg.items, cfg.categories);
        let m = cfg.covariates;

        let eval = Evaluator::new(self.dataset, &self.patterns, params, true);
        let part = eval.run();
        let g_logpsi = eval.grad_log_psi(&part);
        let mut value = part.value;
        grad.iter_mut().for_each(|g| *g = 0.0);

        // Simplex block: likelihood through log psi plus the Jacobian Σ_c log psi_c.
        for a in 0..h {
            for j in 0..p {
                let base = (a * p + j) * d;
                let g = &g_logpsi[base..base + d];
                let total: f64 = g.iter().sum();
                for c in 0..d - 1 {
                    let psi = params.psi[[a, j, c]];
                    grad[lay.psi_index(a, j, c)] = g[c] - psi * total + 1.0 - d as f64 * psi;
                }
                value += params
                    .psi
                    .slice(ndarray::s![a, j, ..])
                    .iter()
                    .map(|v| v.max(PROB_FLOOR).ln())
                    .sum::<f64>();
            }
        }
        value += (h * p) as f64 * ln_factorial(d - 1);

        for a in 1..h {
            for k in 0..m {
                let b = params.beta[[k, a]];
                grad[lay.beta_index(k, a)] = part.g_beta[k * h + a] - b;
                value += -0.5 * b * b - 0.5 * LN_2PI;
            }
            for t in 0..cfg.waves() {
                grad[lay.eta_index(t, a)] = part.g_eta[t * h + a];
            }
            for q in 0..3 {
                let s = position[lay.theta_index(q, a)];
                // log-normal prior plus log-Jacobian, expressed in s = log theta
                value += -HYPER_LOG_SD.ln() - 0.5 * LN_2PI - 0.5 * (s / HYPER_LOG_SD).powi(2);
                grad[lay.theta_index(q, a)] = -s / (HYPER_LOG_SD * HYPER_LOG_SD);
            }
        }
        value
    }
}

fn check_finite(value: f64, grad: &[f64]) -> Result<f64> {
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("log-posterior or its gradient".into()));
    }
    Ok(value)
}

/// The posterior in whitened intercept coordinates.
///
/// The intercept block holds `z_h` with `eta_h = L_h z_h`, where `L_h` is the
/// Cholesky factor of the Gram matrix of profile `h` at its current kernel
/// parameters. All other coordinates are those of the unconstrained vector.
/// The density is the unconstrained log-posterior plus `Σ_h ln|L_h|`.
#[derive(Debug, Clone)]
pub struct Whitened<'a> {
    posterior: Posterior<'a>,
}

impl<'a> Whitened<'a> {
    pub fn new(posterior: Posterior<'a>) -> Self {
        Whitened { posterior }
    }

    pub fn posterior(&self) -> &Posterior<'a> {
        &self.posterior
    }

    fn factor(&self, position: &[f64], a: usize) -> Result<(KernelParams, gp::Cholesky)> {
        let lay = &self.posterior.layout;
        let s = |q: usize| position[lay.theta_index(q, a)].exp();
        let kp = KernelParams::new(s(0), s(1), s(2))?;
        let chol = gp::factor_gram(&self.posterior.config.wave_times, &kp)?;
        Ok((kp, chol))
    }

    /// Maps whitened coordinates to the unconstrained vector.
    pub fn to_unconstrained(&self, position: &[f64]) -> Result<Vec<f64>> {
        self.check_len(position)?;
        let mut out = position.to_vec();
        for a in 1..self.posterior.config.profiles {
            let (_, chol) = self.factor(position, a)?;
            let eta = lower_times(chol.lower(), &self.eta_block(position, a));
            self.set_eta_block(&mut out, a, &eta);
        }
        Ok(out)
    }

    /// Maps an unconstrained vector to whitened coordinates.
    pub fn from_unconstrained(&self, values: &[f64]) -> Result<Vec<f64>> {
        self.check_len(values)?;
        let mut out = values.to_vec();
        for a in 1..self.posterior.config.profiles {
            let (_, chol) = self.factor(values, a)?;
            let mut z = self.eta_block(values, a);
            chol.forward(&mut z);
            self.set_eta_block(&mut out, a, &z);
        }
        Ok(out)
    }

    fn check_len(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.posterior.layout.len() {
            return Err(Error::Dimension(format!(
                "position has length {}, expected {}",
                values.len(),
                self.posterior.layout.len()
            )));
        }
        Ok(())
    }

    fn eta_block(&self, values: &[f64], a: usize) -> Vec<f64> {
        let lay = &self.posterior.layout;
        (0..self.posterior.config.waves()).map(|t| values[lay.eta_index(t, a)]).collect()
    }

    fn set_eta_block(&self, values: &mut [f64], a: usize, block: &[f64]) {
        let lay = &self.posterior.layout;
        for (t, v) in block.iter().enumerate() {
            values[lay.eta_index(t, a)] = *v;
        }
    }

    fn eval(&self, position: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.check_len(position)?;
        let post = &self.posterior;
        let n = post.config.waves();
        let mut centered = position.to_vec();
        let mut factors = Vec::with_capacity(post.config.profiles);
        for a in 1..post.config.profiles {
            let (kp, chol) = self.factor(position, a)?;
            let eta = lower_times(chol.lower(), &self.eta_block(position, a));
            self.set_eta_block(&mut centered, a, &eta);
            factors.push((kp, chol));
        }
        let params = from_unconstrained(&centered, &post.config)?;
        let mut value = post.shared_terms(&params, &centered, grad);
        for (i, (kp, chol)) in factors.iter().enumerate() {
            let a = i + 1;
            let z = self.eta_block(position, a);
            let g = self.eta_block(grad, a);
            let l = chol.lower();
            // u = Lᵀ g
            let u: Vec<f64> = (0..n).map(|j| (j..n).map(|k| l[[k, j]] * g[k]).sum()).collect();
            value += -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * n as f64 * LN_2PI;
            let gz: Vec<f64> = u.iter().zip(&z).map(|(u, z)| u - z).collect();
            self.set_eta_block(grad, a, &gz);
            // dL = L Φ(L⁻¹ dC L⁻ᵀ), Φ keeps the lower triangle and halves the diagonal.
            let derivs = gp::gram_log_derivatives(&post.config.wave_times, kp);
            for (q, dc) in derivs.iter().enumerate() {
                let w = whiten_both(chol, dc);
                let mut acc = 0.0;
                for r in 0..n {
                    let mut phi_z = 0.5 * w[[r, r]] * z[r];
                    for c in 0..r {
                        phi_z += w[[r, c]] * z[c];
                    }
                    acc += u[r] * phi_z;
                }
                grad[post.layout.theta_index(q, a)] += acc;
            }
        }
        check_finite(value, grad)
    }
}

fn lower_times(l: &Array2<f64>, z: &[f64]) -> Vec<f64> {
    (0..z.len()).map(|i| (0..=i).map(|k| l[[i, k]] * z[k]).sum()).collect()
}

/// `L⁻¹ M L⁻ᵀ` for symmetric `M`.
fn whiten_both(chol: &gp::Cholesky, m: &Array2<f64>) -> Array2<f64> {
    let n = chol.dim();
    let mut x = m.clone();
    for c in 0..n {
        let mut col: Vec<f64> = x.column(c).to_vec();
        chol.forward(&mut col);
        x.column_mut(c).assign(&ndarray::Array1::from(col));
    }
    let mut y = x.t().to_owned();
    for c in 0..n {
        let mut col: Vec<f64> = y.column(c).to_vec();
        chol.forward(&mut col);
        y.column_mut(c).assign(&ndarray::Array1::from(col));
    }
    y
}

impl LogDensity for Whitened<'_> {
    fn dim(&self) -> usize {
        self.posterior.layout.len()
    }

    fn log_density_and_grad(&self, position: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.eval(position, grad)
    }
}

impl LogDensity for Posterior<'_> {
    fn dim(&self) -> usize {
        self.layout.len()
    }

    fn log_density_and_grad(&self, position: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.eval(position, grad)
    }
}
