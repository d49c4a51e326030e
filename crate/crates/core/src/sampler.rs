//! Hamiltonian Monte Carlo with dual-averaging step size and diagonal mass
//! adaptation, plus the convergence and label-switching diagnostics used on
//! its output.
//!
//! Trajectories have a fixed integration time (`path_length`, measured in
//! mass-scaled units) and the number of leapfrog steps is jittered uniformly
//! on `[0.8 L, 1.2 L]`.
//!
//! Warmup is split into an initial step-size-only buffer (15%), two mass
//! windows (15%–50% and 50%–90%) and a terminal step-size buffer. The final
//! diagonal mass comes from the variance of the draws in the second window.
//! Each chain uses its own stream of a ChaCha generator seeded with
//! `SamplerConfig::seed`, so results do not depend on thread scheduling.

use std::fs::File;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{constrained_names, from_unconstrained, ModelConfig, Parameters};

/// A differentiable log density on an unconstrained space.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Returns the log density and writes its gradient into `grad`.
    /// An `Err` or a non-finite value marks the point as outside the support.
    fn log_density_and_grad(&self, position: &[f64], grad: &mut [f64]) -> Result<f64>;
}

/// Hamiltonian error beyond which a transition counts as divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;
const MAX_LEAPFROG_STEPS: usize = 1024;
const MAX_INIT_ATTEMPTS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub n_warmup: usize,
    pub n_draws: usize,
    pub n_chains: usize,
    pub path_length: f64,
    pub target_accept: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_warmup: 1000,
            n_draws: 4000,
            n_chains: 4,
            path_length: 1.0,
            target_accept: 0.8,
            seed: 1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_warmup < 100 {
            problems.push(format!("n_warmup must be at least 100, got {}", self.n_warmup));
        }
        if self.n_draws < 1 {
            problems.push("n_draws must be at least 1".to_string());
        }
        if self.n_chains < 1 {
            problems.push("n_chains must be at least 1".to_string());
        }
        if !(self.path_length > 0.0) || !self.path_length.is_finite() {
            problems.push(format!("path_length must be positive, got {}", self.path_length));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            problems.push(format!("target_accept must lie in (0, 1), got {}", self.target_accept));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Starting points for the chains.
#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    /// Coordinates i.i.d. uniform on `[-radius, radius]`.
    Random { radius: f64 },
    /// One point per chain; a single point is shared by all chains.
    Points(Vec<Vec<f64>>),
}

impl Default for Init {
    fn default() -> Self {
        Init::Random { radius: 2.0 }
    }
}

struct DualAverage {
    log_step: f64,
    log_step_avg: f64,
    hbar: f64,
    mu: f64,
    count: f64,
    target: f64,
}

impl DualAverage {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(step: f64, target: f64) -> Self {
        DualAverage {
            log_step: step.ln(),
            log_step_avg: step.ln(),
            hbar: 0.0,
            mu: (10.0 * step).ln(),
            count: 1.0,
            target,
        }
    }

    fn advance(&mut self, accept: f64) {
        let w = 1.0 / (self.count + Self::T0);
        self.hbar = (1.0 - w) * self.hbar + w * (self.target - accept);
        self.log_step = self.mu - self.hbar * self.count.sqrt() / Self::GAMMA;
        let mk = self.count.powf(-Self::KAPPA);
        self.log_step_avg = mk * self.log_step + (1.0 - mk) * self.log_step_avg;
        self.count += 1.0;
    }

    fn current(&self) -> f64 {
        self.log_step.exp()
    }

    fn adapted(&self) -> f64 {
        self.log_step_avg.exp()
    }
}

/// Running mean/variance (Welford).
struct Welford {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Welford {
            n: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn add(&mut self, x: &[f64]) {
        self.n += 1.0;
        for i in 0..x.len() {
            let delta = x[i] - self.mean[i];
            self.mean[i] += delta / self.n;
            self.m2[i] += delta * (x[i] - self.mean[i]);
        }
    }

    /// Variance shrunk towards 1e-3 as in Stan's diagonal adaptation.
    fn regularized_variance(&self) -> Vec<f64> {
        let n = self.n;
        self.m2
            .iter()
            .map(|m2| {
                let var = if n > 1.0 { m2 / (n - 1.0) } else { 1.0 };
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}

struct State {
    q: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
}

#[derive(Debug, Clone, Copy)]
struct Transition {
    accept: f64,
    divergent: bool,
    energy_error: f64,
    steps: usize,
}

struct Chain<'a, T: LogDensity> {
    target: &'a T,
    rng: ChaCha8Rng,
    inv_mass: Vec<f64>,
    state: State,
}

impl<'a, T: LogDensity> Chain<'a, T> {
    fn evaluate(target: &T, q: &[f64], grad: &mut [f64]) -> f64 {
        match target.log_density_and_grad(q, grad) {
            Ok(v) if v.is_finite() && grad.iter().all(|g| g.is_finite()) => v,
            _ => f64::NEG_INFINITY,
        }
    }

    fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p.iter().zip(&self.inv_mass).map(|(p, m)| m * p * p).sum::<f64>()
    }

    fn sample_momentum(&mut self) -> Vec<f64> {
        let rng = &mut self.rng;
        self.inv_mass
            .iter()
            .map(|m| {
                let z: f64 = rng.sample(StandardNormal);
                z / m.sqrt()
            })
            .collect()
    }

    /// Integrates `steps` leapfrog steps from the current state.
    fn integrate(&self, p: &mut [f64], step: f64, steps: usize) -> State {
        let dim = p.len();
        let mut q = self.state.q.clone();
        let mut grad = self.state.grad.clone();
        let mut logp = self.state.logp;
        for _ in 0..steps {
            for i in 0..dim {
                p[i] += 0.5 * step * grad[i];
                q[i] += step * self.inv_mass[i] * p[i];
            }
            logp = Self::evaluate(self.target, &q, &mut grad);
            if !logp.is_finite() {
                break;
            }
            for i in 0..dim {
                p[i] += 0.5 * step * grad[i];
            }
        }
        State { q, grad, logp }
    }

    fn transition(&mut self, step: f64, path_length: f64) -> Transition {
        let nominal = (path_length / step).ceil().max(1.0);
        let lo = (0.8 * nominal).ceil().max(1.0) as usize;
        let hi = ((1.2 * nominal).floor() as usize).max(lo);
        let steps = self.rng.random_range(lo..=hi).min(MAX_LEAPFROG_STEPS);
        let mut p = self.sample_momentum();
        let h0 = -self.state.logp + self.kinetic(&p);
        let proposal = self.integrate(&mut p, step, steps);
        let h1 = -proposal.logp + self.kinetic(&p);
        let energy_error = h1 - h0;
        let divergent = !energy_error.is_finite() || energy_error > DIVERGENCE_THRESHOLD;
        let accept = if divergent {
            0.0
        } else {
            (-energy_error).exp().min(1.0)
        };
        if !divergent && self.rng.random::<f64>() < accept {
            self.state = proposal;
        }
        Transition {
            accept,
            divergent,
            energy_error,
            steps,
        }
    }

    /// Doubles or halves a trial step until a single leapfrog step crosses
    /// an acceptance probability of 0.5.
    fn find_reasonable_step(&mut self, start: f64) -> f64 {
        let mut step = start;
        let accept_of = |chain: &mut Self, step: f64| {
            let mut p = chain.sample_momentum();
            let h0 = -chain.state.logp + chain.kinetic(&p);
            let prop = chain.integrate(&mut p, step, 1);
            let h1 = -prop.logp + chain.kinetic(&p);
            let a = (h0 - h1).exp();
            if a.is_finite() {
                a
            } else {
                0.0
            }
        };
        let first = accept_of(self, step);
        let direction = if first > 0.5 { 1.0 } else { -1.0 };
        for _ in 0..100 {
            let a = accept_of(self, step);
            if (direction > 0.0 && a <= 0.5) || (direction < 0.0 && a > 0.5) {
                break;
            }
            step *= 2f64.powf(direction);
            if !(1e-12..=1e6).contains(&step) {
                break;
            }
        }
        step.clamp(1e-10, 1e3)
    }
}

/// Sampler statistics of one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    pub chain: usize,
    pub step_size: f64,
    pub inv_mass: Vec<f64>,
    pub init: Vec<f64>,
    pub accept_stat: Vec<f64>,
    pub divergent: Vec<bool>,
    pub energy_error: Vec<f64>,
    pub leapfrog_steps: Vec<usize>,
}

impl ChainStats {
    pub fn divergences(&self) -> usize {
        self.divergent.iter().filter(|d| **d).count()
    }

    pub fn mean_accept(&self) -> f64 {
        self.accept_stat.iter().sum::<f64>() / self.accept_stat.len().max(1) as f64
    }
}

/// Unconstrained draws of every chain.
#[derive(Debug, Clone)]
pub struct SamplerOutput {
    pub draws: Vec<Vec<Vec<f64>>>,
    pub stats: Vec<ChainStats>,
}

fn initial_state<T: LogDensity>(
    target: &T,
    init: &Init,
    chain: usize,
    rng: &mut ChaCha8Rng,
) -> Result<State> {
    let dim = target.dim();
    let mut grad = vec![0.0; dim];
    match init {
        Init::Random { radius } => {
            for _ in 0..MAX_INIT_ATTEMPTS {
                let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-radius..=*radius)).collect();
                let logp = Chain::evaluate(target, &q, &mut grad);
                if logp.is_finite() {
                    return Ok(State { q, grad, logp });
                }
            }
            Err(Error::Initialization(format!(
                "chain {}: no finite starting point after {MAX_INIT_ATTEMPTS} random draws",
                chain + 1
            )))
        }
        Init::Points(points) => {
            let q = match points.len() {
                0 => return Err(Error::Initialization("no initial points given".into())),
                1 => points[0].clone(),
                _ => points
                    .get(chain)
                    .cloned()
                    .ok_or_else(|| Error::Initialization(format!("no initial point for chain {}", chain + 1)))?,
            };
            if q.len() != dim {
                return Err(Error::Dimension(format!(
                    "initial point has length {}, target dimension is {dim}",
                    q.len()
                )));
            }
            let logp = Chain::evaluate(target, &q, &mut grad);
            if !logp.is_finite() {
                return Err(Error::Initialization(format!(
                    "chain {}: target is not finite at the supplied point",
                    chain + 1
                )));
            }
            Ok(State { q, grad, logp })
        }
    }
}

fn run_chain<T: LogDensity>(
    target: &T,
    init: &Init,
    config: &SamplerConfig,
    chain_id: usize,
) -> Result<(Vec<Vec<f64>>, ChainStats)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(chain_id as u64);
    let state = initial_state(target, init, chain_id, &mut rng)?;
    let init_point = state.q.clone();
    let dim = target.dim();
    let mut chain = Chain {
        target,
        rng,
        inv_mass: vec![1.0; dim],
        state,
    };

    let w = config.n_warmup;
    let window1 = (0.15 * w as f64).round() as usize;
    let window2 = (0.5 * w as f64).round() as usize;
    let term = (0.9 * w as f64).round() as usize;

    let mut step = chain.find_reasonable_step(0.1);
    let mut da = DualAverage::new(step, config.target_accept);
    let mut welford = Welford::new(dim);
    for it in 0..w {
        let tr = chain.transition(step, config.path_length);
        da.advance(tr.accept);
        step = da.current();
        if it >= window1 && it < term {
            welford.add(&chain.state.q);
        }
        if it + 1 == window2 || it + 1 == term {
            chain.inv_mass = welford.regularized_variance();
            welford = Welford::new(dim);
            step = chain.find_reasonable_step(step);
            da = DualAverage::new(step, config.target_accept);
        }
    }
    let step = da.adapted();

    let mut draws = Vec::with_capacity(config.n_draws);
    let mut stats = ChainStats {
        chain: chain_id,
        step_size: step,
        inv_mass: chain.inv_mass.clone(),
        init: init_point,
        accept_stat: Vec::with_capacity(config.n_draws),
        divergent: Vec::with_capacity(config.n_draws),
        energy_error: Vec::with_capacity(config.n_draws),
        leapfrog_steps: Vec::with_capacity(config.n_draws),
    };
    for _ in 0..config.n_draws {
        let tr = chain.transition(step, config.path_length);
        draws.push(chain.state.q.clone());
        stats.accept_stat.push(tr.accept);
        stats.divergent.push(tr.divergent);
        stats.energy_error.push(tr.energy_error);
        stats.leapfrog_steps.push(tr.steps);
    }
    Ok((draws, stats))
}

/// Runs `config.n_chains` independent chains in parallel.
pub fn run<T: LogDensity>(target: &T, init: &Init, config: &SamplerConfig) -> Result<SamplerOutput> {
    config.validate()?;
    let results: Vec<Result<(Vec<Vec<f64>>, ChainStats)>> = (0..config.n_chains)
        .into_par_iter()
        .map(|c| run_chain(target, init, config, c))
        .collect();
    let mut draws = Vec::with_capacity(config.n_chains);
    let mut stats = Vec::with_capacity(config.n_chains);
    for r in results {
        let (d, s) = r?;
        draws.push(d);
        stats.push(s);
    }
    Ok(SamplerOutput { draws, stats })
}

/// Constrained posterior draws of the latent-class model.
#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    pub config: ModelConfig,
    pub chains: Vec<Vec<Parameters>>,
    pub stats: Vec<ChainStats>,
    pub sampler: SamplerConfig,
    pub warnings: Vec<String>,
}

impl PosteriorDraws {
    pub fn from_output(output: SamplerOutput, config: &ModelConfig, sampler: &SamplerConfig) -> Result<Self> {
        let chains = output
            .draws
            .iter()
            .map(|c| c.iter().map(|q| from_unconstrained(q, config)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let mut warnings = Vec::new();
        for s in &output.stats {
            let frac = s.divergences() as f64 / s.divergent.len().max(1) as f64;
            if frac > 0.1 {
                warnings.push(format!(
                    "chain {}: {:.1}% of post-warmup transitions diverged",
                    s.chain + 1,
                    100.0 * frac
                ));
            }
        }
        Ok(PosteriorDraws {
            config: config.clone(),
            chains,
            stats: output.stats,
            sampler: sampler.clone(),
            warnings,
        })
    }

    /// Wraps already-constrained draws (no sampler statistics).
    pub fn from_chains(config: ModelConfig, chains: Vec<Vec<Parameters>>) -> Self {
        PosteriorDraws {
            config,
            chains,
            stats: Vec::new(),
            sampler: SamplerConfig::default(),
            warnings: Vec::new(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameters> {
        self.chains.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.chains.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-chain traces of every flattened constrained coordinate:
    /// `traces[coordinate][chain][draw]`.
    pub fn traces(&self) -> Vec<Vec<Vec<f64>>> {
        let names = constrained_names(&self.config).len();
        let mut out = vec![vec![Vec::new(); self.chains.len()]; names];
        for (c, chain) in self.chains.iter().enumerate() {
            for d in chain {
                for (k, v) in d.flatten().into_iter().enumerate() {
                    out[k][c].push(v);
                }
            }
        }
        out
    }

    pub fn divergences(&self) -> usize {
        self.stats.iter().map(ChainStats::divergences).sum()
    }
}

/// Effective sample size of one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EssEstimate {
    pub ess: f64,
    /// Set when the sequence is constant; `ess` is then the draw count.
    pub zero_variance: bool,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Autocorrelation-based ESS with Geyer's initial monotone positive-pair
/// truncation, capped at the number of draws.
pub fn ess(draws: &[f64]) -> EssEstimate {
    let n = draws.len();
    if n < 4 {
        return EssEstimate {
            ess: n as f64,
            zero_variance: false,
        };
    }
    let mu = mean(draws);
    let centered: Vec<f64> = draws.iter().map(|v| v - mu).collect();
    let var0 = centered.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if var0 == 0.0 || var0.sqrt() <= 1e-14 * mu.abs() {
        return EssEstimate {
            ess: n as f64,
            zero_variance: true,
        };
    }
    let acf = |lag: usize| {
        centered[..n - lag]
            .iter()
            .zip(&centered[lag..])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / (n as f64 * var0)
    };
    let mut sum_pairs = 0.0;
    let mut prev_pair = f64::INFINITY;
    let mut lag = 0;
    while lag + 1 < n {
        let mut pair = acf(lag) + acf(lag + 1);
        if pair <= 0.0 {
            break;
        }
        if pair > prev_pair {
            pair = prev_pair;
        }
        sum_pairs += pair;
        prev_pair = pair;
        lag += 2;
    }
    let tau = (2.0 * sum_pairs - 1.0).max(1.0 / n as f64);
    EssEstimate {
        ess: (n as f64 / tau).min(n as f64),
        zero_variance: false,
    }
}

/// Sum of per-chain ESS estimates.
pub fn ess_chains(chains: &[Vec<f64>]) -> EssEstimate {
    let parts: Vec<EssEstimate> = chains.iter().map(|c| ess(c)).collect();
    EssEstimate {
        ess: parts.iter().map(|e| e.ess).sum(),
        zero_variance: parts.iter().all(|e| e.zero_variance),
    }
}

/// Split-R̂ (Gelman–Rubin on half chains).
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let mut halves: Vec<&[f64]> = Vec::new();
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    let half = n / 2;
    if half < 2 {
        return f64::NAN;
    }
    for c in chains {
        halves.push(&c[..half]);
        halves.push(&c[n - half..n]);
    }
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let vars: Vec<f64> = halves
        .iter()
        .zip(&means)
        .map(|(h, m)| h.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (half as f64 - 1.0))
        .collect();
    let w = mean(&vars);
    let grand = mean(&means);
    let k = halves.len() as f64;
    let b = half as f64 * means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (k - 1.0);
    if w <= 0.0 {
        return if b <= 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (half as f64 - 1.0) / half as f64 * w + b / half as f64;
    // values below one only reflect the (n - 1) / n factor on W
    (var_plus / w).sqrt().max(1.0)
}

/// ESS and split-R̂ for every constrained coordinate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticsTable {
    pub names: Vec<String>,
    pub ess: Vec<f64>,
    pub rhat: Vec<f64>,
    pub zero_variance: Vec<bool>,
}

impl DiagnosticsTable {
    pub fn compute(draws: &PosteriorDraws) -> Self {
        let names = constrained_names(&draws.config);
        let traces = draws.traces();
        let rows: Vec<(f64, f64, bool)> = traces
            .par_iter()
            .map(|chains| {
                let e = ess_chains(chains);
                (e.ess, split_rhat(chains), e.zero_variance)
            })
            .collect();
        DiagnosticsTable {
            names,
            ess: rows.iter().map(|r| r.0).collect(),
            rhat: rows.iter().map(|r| r.1).collect(),
            zero_variance: rows.iter().map(|r| r.2).collect(),
        }
    }

    /// Largest finite R̂ over coordinates that actually vary.
    pub fn max_rhat(&self) -> f64 {
        self.rhat
            .iter()
            .zip(&self.zero_variance)
            .filter(|(_, z)| !**z)
            .map(|(r, _)| *r)
            .filter(|r| !r.is_nan())
            .fold(1.0, f64::max)
    }

    pub fn min_ess(&self) -> f64 {
        self.ess.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::file(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["parameter", "ess", "rhat"])?;
        for i in 0..self.names.len() {
            w.write_record([self.names[i].clone(), format!("{}", self.ess[i]), format!("{}", self.rhat[i])])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean over items of the probability of the top category, per profile.
pub fn profile_scores(params: &Parameters) -> Vec<f64> {
    let (h, p, d) = params.psi.dim();
    (0..h)
        .map(|a| (0..p).map(|j| params.psi[[a, j, d - 1]]).sum::<f64>() / p as f64)
        .collect()
}

/// Profiles ordered by descending score: `perm[new] = old`.
pub fn canonical_permutation(params: &Parameters) -> Vec<usize> {
    let s = profile_scores(params);
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    order
}

/// Relabels profiles so that new profile `h` is old profile `perm[h]`.
///
/// Intercepts and coefficients are re-expressed against the new reference
/// profile. Kernel parameters cannot be transferred when the reference
/// changes, so that case is rejected.
pub fn relabel(params: &Parameters, perm: &[usize]) -> Result<Parameters> {
    let h = params.profiles();
    let mut seen = vec![false; h];
    if perm.len() != h || perm.iter().any(|&a| a >= h || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::Config(format!("{perm:?} is not a permutation of {h} profiles")));
    }
    if perm[0] != 0 {
        return Err(Error::Config(
            "relabeling that moves the reference profile is not representable for kernel parameters".into(),
        ));
    }
    let mut out = params.clone();
    for (new, &old) in perm.iter().enumerate() {
        out.psi
            .index_axis_mut(ndarray::Axis(0), new)
            .assign(&params.psi.index_axis(ndarray::Axis(0), old));
        out.beta.column_mut(new).assign(&params.beta.column(old));
        out.eta.column_mut(new).assign(&params.eta.column(old));
        out.theta.column_mut(new).assign(&params.theta.column(old));
    }
    Ok(out)
}

/// Within-chain label-switching summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSwitchReport {
    pub chain: usize,
    /// Most frequent canonical permutation in the chain.
    pub modal_permutation: Vec<usize>,
    /// Fraction of draws whose ranking differs from the modal one.
    pub switch_fraction: f64,
}

pub fn label_switch_diagnostic(draws: &PosteriorDraws) -> Vec<LabelSwitchReport> {
    draws
        .chains
        .iter()
        .enumerate()
        .map(|(c, chain)| {
            let perms: Vec<Vec<usize>> = chain.iter().map(canonical_permutation).collect();
            let mut counts: Vec<(Vec<usize>, usize)> = Vec::new();
            for p in &perms {
                match counts.iter_mut().find(|(q, _)| q == p) {
                    Some(entry) => entry.1 += 1,
                    None => counts.push((p.clone(), 1)),
                }
            }
            let (modal, hits) = counts
                .into_iter()
                .fold((Vec::new(), 0), |best, cur| if cur.1 > best.1 { cur } else { best });
            LabelSwitchReport {
                chain: c,
                modal_permutation: modal,
                switch_fraction: if perms.is_empty() {
                    0.0
                } else {
                    1.0 - hits as f64 / perms.len() as f64
                },
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DrawsMetadata {
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub chains: Vec<ChainSummary>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainSummary {
    pub chain: usize,
    pub stream: u64,
    pub draws: usize,
    pub step_size: f64,
    pub inv_mass: Vec<f64>,
    pub divergences: usize,
    pub mean_accept: f64,
}

pub fn chain_file_name(chain: usize) -> String {
    format!("draws_chain{}.csv", chain + 1)
}

pub const DRAWS_METADATA: &str = "draws.json";

/// Writes one CSV per chain (header = constrained parameter names) and the
/// run metadata JSON into `dir`.
pub fn write_draws(dir: &Path, draws: &PosteriorDraws) -> Result<()> {
    let names = constrained_names(&draws.config);
    for (c, chain) in draws.chains.iter().enumerate() {
        let path = dir.join(chain_file_name(c));
        let file = File::create(&path).map_err(|e| Error::file(&path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(&names)?;
        for d in chain {
            w.write_record(d.flatten().iter().map(|v| format!("{v:e}")))?;
        }
        w.flush()?;
    }
    let meta = DrawsMetadata {
        model: draws.config.clone(),
        sampler: draws.sampler.clone(),
        chains: draws
            .stats
            .iter()
            .map(|s| ChainSummary {
                chain: s.chain + 1,
                stream: s.chain as u64,
                draws: s.accept_stat.len(),
                step_size: s.step_size,
                inv_mass: s.inv_mass.clone(),
                divergences: s.divergences(),
                mean_accept: s.mean_accept(),
            })
            .collect(),
        warnings: draws.warnings.clone(),
    };
    let path = dir.join(DRAWS_METADATA);
    let f = File::create(&path).map_err(|e| Error::file(&path, e))?;
    serde_json::to_writer_pretty(f, &meta)?;
    Ok(())
}

/// Reads draws written by [`write_draws`].
pub fn read_draws(dir: &Path) -> Result<PosteriorDraws> {
    let path = dir.join(DRAWS_METADATA);
    let f = File::open(&path).map_err(|e| Error::file(&path, e))?;
    let meta: DrawsMetadata = serde_json::from_reader(f)?;
    let names = constrained_names(&meta.model);
    let n_chains = meta.chains.len().max(meta.sampler.n_chains);
    let mut chains = Vec::new();
    for c in 0..n_chains {
        let path = dir.join(chain_file_name(c));
        if !path.exists() {
            break;
        }
        let file = File::open(&path).map_err(|e| Error::file(&path, e))?;
        let mut reader = csv::Reader::from_reader(file);
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        if header != names {
            return Err(Error::Dimension(format!(
                "{} columns do not match the model configuration's parameter blocks",
                path.display()
            )));
        }
        let mut chain = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let values: Vec<f64> = rec
                .iter()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Row {
                    row: i,
                    message: format!("non-numeric value in {}", path.display()),
                })?;
            chain.push(Parameters::from_flat(&meta.model, &values)?);
        }
        chains.push(chain);
    }
    if chains.is_empty() {
        return Err(Error::Dataset(format!("no draw files in {}", dir.display())));
    }
    Ok(PosteriorDraws {
        config: meta.model,
        chains,
        stats: Vec::new(),
        sampler: meta.sampler,
        warnings: meta.warnings,
    })
}
