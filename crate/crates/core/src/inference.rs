//! Posterior summaries: response-probability tables, covariate effects and
//! population-proportion trajectories.

use std::fs::File;
use std::path::Path;

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SurveyDataset;
use crate::error::{Error, Result};
use crate::gp::{self, GpPredictor};
use crate::model::{mixture_weights, Parameters, PROB_FLOOR};
use crate::sampler::PosteriorDraws;

/// Days allowed beyond the first and last wave before prediction counts as
/// extrapolation.
pub const EXTRAPOLATION_MARGIN: f64 = 14.0;

/// Linear-interpolation quantile of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Equal-tailed interval at credible `level`.
pub fn equal_tailed(values: &[f64], level: f64) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let tail = 0.5 * (1.0 - level);
    (quantile_sorted(&v, tail), quantile_sorted(&v, 1.0 - tail))
}

fn check_nonempty(draws: &PosteriorDraws) -> Result<()> {
    if draws.is_empty() {
        Err(Error::Dataset("no posterior draws".into()))
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileTable {
    pub mean: Array3<f64>,
    pub lower: Array3<f64>,
    pub upper: Array3<f64>,
    /// Zero-based modal category of each `(h, j)` mean row.
    pub modal: Array2<usize>,
    pub level: f64,
}

pub fn profile_summaries(draws: &PosteriorDraws, level: f64) -> Result<ProfileTable> {
    check_nonempty(draws)?;
    let cfg = &draws.config;
    let shape = (cfg.profiles, cfg.items, cfg.categories);
    let mut mean = Array3::zeros(shape);
    let mut lower = Array3::zeros(shape);
    let mut upper = Array3::zeros(shape);
    let n = draws.len() as f64;
    for ((a, j, c), m) in mean.indexed_iter_mut() {
        let values: Vec<f64> = draws.iter().map(|d| d.psi[[a, j, c]]).collect();
        *m = values.iter().sum::<f64>() / n;
        let (lo, hi) = equal_tailed(&values, level);
        lower[[a, j, c]] = lo;
        upper[[a, j, c]] = hi;
    }
    let mut modal = Array2::zeros((cfg.profiles, cfg.items));
    for a in 0..cfg.profiles {
        for j in 0..cfg.items {
            let mut best = 0;
            for c in 1..cfg.categories {
                if mean[[a, j, c]] > mean[[a, j, best]] {
                    best = c;
                }
            }
            modal[[a, j]] = best;
        }
    }
    Ok(ProfileTable {
        mean,
        lower,
        upper,
        modal,
        level,
    })
}

impl ProfileTable {
    /// One row per `(item, category)`, three columns (mean, lower, upper) per
    /// profile and an `is_modal` flag list.
    pub fn write_csv(&self, path: &Path, item_labels: &[String]) -> Result<()> {
        let (h, p, d) = self.mean.dim();
        let file = File::create(path).map_err(|e| Error::file(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let mut header = vec!["item".to_string(), "category".to_string()];
        for a in 1..=h {
            header.push(format!("profile_{a}"));
            header.push(format!("profile_{a}_lo"));
            header.push(format!("profile_{a}_hi"));
            header.push(format!("profile_{a}_modal"));
        }
        w.write_record(&header)?;
        for j in 0..p {
            for c in 0..d {
                let label = item_labels.get(j).cloned().unwrap_or_else(|| format!("item{}", j + 1));
                let mut rec = vec![label, (c + 1).to_string()];
                for a in 0..h {
                    rec.push(format!("{}", self.mean[[a, j, c]]));
                    rec.push(format!("{}", self.lower[[a, j, c]]));
                    rec.push(format!("{}", self.upper[[a, j, c]]));
                    rec.push(u8::from(self.modal[[a, j]] == c).to_string());
                }
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateEffect {
    /// Zero-based covariate index.
    pub covariate: usize,
    /// Zero-based profile index (always ≥ 1).
    pub profile: usize,
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
    pub prob_positive: f64,
    pub odds_ratio_mean: f64,
    pub odds_ratio_lower: f64,
    pub odds_ratio_upper: f64,
}

pub fn covariate_effects(draws: &PosteriorDraws, level: f64) -> Result<Vec<CovariateEffect>> {
    check_nonempty(draws)?;
    let cfg = &draws.config;
    let n = draws.len() as f64;
    let mut out = Vec::new();
    for h in 1..cfg.profiles {
        for k in 0..cfg.covariates {
            let values: Vec<f64> = draws.iter().map(|d| d.beta[[k, h]]).collect();
            let mean = values.iter().sum::<f64>() / n;
            let sd = if values.len() > 1 {
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            let (lower, upper) = equal_tailed(&values, level);
            out.push(CovariateEffect {
                covariate: k,
                profile: h,
                mean,
                sd,
                lower,
                upper,
                prob_positive: values.iter().filter(|v| **v > 0.0).count() as f64 / n,
                odds_ratio_mean: values.iter().map(|v| v.exp()).sum::<f64>() / n,
                odds_ratio_lower: lower.exp(),
                odds_ratio_upper: upper.exp(),
            });
        }
    }
    Ok(out)
}

pub fn write_covariate_effects(path: &Path, effects: &[CovariateEffect], labels: &[String]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record([
        "coefficient",
        "profile",
        "mean",
        "sd",
        "lo",
        "hi",
        "prob_positive",
        "or_mean",
        "or_lo",
        "or_hi",
    ])?;
    for e in effects {
        let label = labels
            .get(e.covariate)
            .cloned()
            .unwrap_or_else(|| format!("x{}", e.covariate + 1));
        w.write_record([
            label,
            (e.profile + 1).to_string(),
            format!("{}", e.mean),
            format!("{}", e.sd),
            format!("{}", e.lower),
            format!("{}", e.upper),
            format!("{}", e.prob_positive),
            format!("{}", e.odds_ratio_mean),
            format!("{}", e.odds_ratio_lower),
            format!("{}", e.odds_ratio_upper),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    /// Days since the first wave.
    pub times: Vec<f64>,
    /// `H × S` posterior mean proportions.
    pub mean: Array2<f64>,
    pub lower: Array2<f64>,
    pub upper: Array2<f64>,
    pub level: f64,
}

/// One point per day from the first to the last wave.
pub fn daily_grid(wave_times: &[f64]) -> Vec<f64> {
    let first = wave_times[0].floor() as i64;
    let last = wave_times[wave_times.len() - 1].ceil() as i64;
    (first..=last).map(|d| d as f64).collect()
}

/// Where in time an intercept vector is needed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimePoint {
    /// Zero-based observed wave: the sampled intercepts are used directly.
    Wave(usize),
    /// Arbitrary time (days): the GP conditional mean is used.
    Days(f64),
}

/// Intercepts of every profile for one draw at `time`.
pub fn intercepts_at(draw: &Parameters, wave_times: &[f64], time: TimePoint) -> Result<Vec<f64>> {
    let h = draw.profiles();
    match time {
        TimePoint::Wave(t) => {
            if t >= draw.eta.nrows() {
                return Err(Error::Dimension(format!("wave {} out of range", t + 1)));
            }
            Ok(draw.eta.row(t).to_vec())
        }
        TimePoint::Days(s) => {
            let mut out = vec![0.0; h];
            for (a, v) in out.iter_mut().enumerate().skip(1) {
                let eta: Vec<f64> = draw.eta.column(a).to_vec();
                *v = gp::gp_predict(&eta, wave_times, &draw.kernel_params(a), &[s])?.mean[0];
            }
            Ok(out)
        }
    }
}

/// Posterior proportions of each profile over `grid` with covariates at
/// their survey-weighted pooled means.
///
/// For each draw the intercept paths are interpolated with the GP
/// conditional mean and mapped through the softmax; means and equal-tailed
/// bands are taken over draws of the resulting proportions.
pub fn population_proportions(
    draws: &PosteriorDraws,
    dataset: &SurveyDataset,
    grid: &[f64],
    level: f64,
    allow_extrapolation: bool,
) -> Result<TrajectorySet> {
    check_nonempty(draws)?;
    let cfg = &draws.config;
    if dataset.covariate_count() != cfg.covariates || dataset.wave_times != cfg.wave_times {
        return Err(Error::Dimension(
            "dataset covariates or wave times differ from the fitted model".into(),
        ));
    }
    let times = &cfg.wave_times;
    let lower_bound = times[0] - EXTRAPOLATION_MARGIN;
    let upper_bound = times[times.len() - 1] + EXTRAPOLATION_MARGIN;
    for &s in grid {
        if !s.is_finite() {
            return Err(Error::NonFinite(format!("grid time {s}")));
        }
        if !allow_extrapolation && (s < lower_bound || s > upper_bound) {
            return Err(Error::Extrapolation {
                time: s,
                lower: lower_bound,
                upper: upper_bound,
            });
        }
    }
    let xbar = dataset.weighted_mean_covariates();
    let h = cfg.profiles;
    let all: Vec<&Parameters> = draws.iter().collect();

    // Per draw: covariate offsets and the predicted intercepts on the grid.
    let per_draw: Vec<Vec<Vec<f64>>> = all
        .par_iter()
        .map(|d| -> Result<Vec<Vec<f64>>> {
            let mut paths = vec![vec![0.0; grid.len()]; h];
            for (a, path) in paths.iter_mut().enumerate().skip(1) {
                let predictor = GpPredictor::new(times, &d.kernel_params(a))?;
                let eta: Vec<f64> = d.eta.column(a).to_vec();
                *path = predictor.predict_mean(&eta, grid)?;
            }
            let mut props = vec![vec![0.0; grid.len()]; h];
            let mut row = vec![0.0; h];
            for s in 0..grid.len() {
                for a in 0..h {
                    row[a] = paths[a][s];
                }
                let nu = mixture_weights(&row, &d.beta, &xbar)?;
                for a in 0..h {
                    props[a][s] = nu[a];
                }
            }
            Ok(props)
        })
        .collect::<Result<_>>()?;

    let n = per_draw.len() as f64;
    let mut mean = Array2::zeros((h, grid.len()));
    let mut lower = Array2::zeros((h, grid.len()));
    let mut upper = Array2::zeros((h, grid.len()));
    for a in 0..h {
        for s in 0..grid.len() {
            let values: Vec<f64> = per_draw.iter().map(|p| p[a][s]).collect();
            mean[[a, s]] = values.iter().sum::<f64>() / n;
            let (lo, hi) = equal_tailed(&values, level);
            lower[[a, s]] = lo.min(mean[[a, s]]);
            upper[[a, s]] = hi.max(mean[[a, s]]);
        }
    }
    Ok(TrajectorySet {
        times: grid.to_vec(),
        mean,
        lower,
        upper,
        level,
    })
}

impl TrajectorySet {
    /// Long-format CSV `date,profile,mean,lo,hi`; dates are ISO-8601 when the
    /// dataset has a calendar origin, otherwise day offsets.
    pub fn write_csv(&self, path: &Path, dataset: &SurveyDataset) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::file(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["date", "profile", "mean", "lo", "hi"])?;
        for a in 0..self.mean.nrows() {
            for (s, &t) in self.times.iter().enumerate() {
                let date = dataset
                    .date_of(t)
                    .map(|d| d.to_string())
                    .unwrap_or_else(|| format!("{t}"));
                w.write_record([
                    date,
                    (a + 1).to_string(),
                    format!("{}", self.mean[[a, s]]),
                    format!("{}", self.lower[[a, s]]),
                    format!("{}", self.upper[[a, s]]),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Posterior probability of each profile for a respondent, averaged over draws.
pub fn class_membership(
    draws: &PosteriorDraws,
    y: &[u8],
    x: &[f64],
    time: TimePoint,
) -> Result<Vec<f64>> {
    check_nonempty(draws)?;
    let cfg = &draws.config;
    if y.len() != cfg.items || x.len() != cfg.covariates {
        return Err(Error::Dimension(format!(
            "respondent has {} responses and {} covariates, model expects {} and {}",
            y.len(),
            x.len(),
            cfg.items,
            cfg.covariates
        )));
    }
    if let Some(&c) = y.iter().find(|&&c| c < 1 || c as usize > cfg.categories) {
        return Err(Error::Dimension(format!("response {c} outside 1..={}", cfg.categories)));
    }
    let h = cfg.profiles;
    let mut acc = vec![0.0; h];
    for d in draws.iter() {
        let eta = intercepts_at(d, &cfg.wave_times, time)?;
        let nu = mixture_weights(&eta, &d.beta, x)?;
        let logs: Vec<f64> = (0..h)
            .map(|a| {
                nu[a].max(PROB_FLOOR).ln()
                    + y.iter()
                        .enumerate()
                        .map(|(j, &c)| d.psi[[a, j, c as usize - 1]].max(PROB_FLOOR).ln())
                        .sum::<f64>()
            })
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        for a in 0..h {
            acc[a] += weights[a] / total;
        }
    }
    let n = draws.len() as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn cfg(h: usize) -> ModelConfig {
        ModelConfig {
            profiles: h,
            items: 2,
            categories: 3,
            covariates: 1,
            wave_times: vec![0.0, 10.0, 20.0],
        }
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_sorted(&v, 0.5), 3.0);
        assert_eq!(quantile_sorted(&v, 0.125), 1.5);
        assert_eq!(equal_tailed(&[5.0, 1.0, 3.0, 2.0, 4.0], 0.5), (2.0, 4.0));
    }

    #[test]
    fn single_draw_table_is_the_draw() {
        let c = cfg(2);
        let mut p = Parameters::neutral(&c);
        p.psi[[1, 0, 0]] = 0.6;
        p.psi[[1, 0, 1]] = 0.1;
        p.psi[[1, 0, 2]] = 0.3;
        let draws = PosteriorDraws::from_chains(c, vec![vec![p.clone()]]);
        let table = profile_summaries(&draws, 0.95).unwrap();
        assert_eq!(table.mean, p.psi);
        assert_eq!(table.lower, p.psi);
        assert_eq!(table.modal[[1, 0]], 0);
        // uniform rows break ties toward the lowest category
        assert_eq!(table.modal[[0, 1]], 0);
    }

    #[test]
    fn constant_coefficient_odds_ratio() {
        let c = cfg(3);
        let mut p = Parameters::neutral(&c);
        p.beta[[0, 1]] = 0.328;
        p.beta[[0, 2]] = -0.676;
        let draws = PosteriorDraws::from_chains(c, vec![vec![p; 10]]);
        let eff = covariate_effects(&draws, 0.95).unwrap();
        assert_eq!(eff.len(), 2);
        assert!((eff[0].odds_ratio_mean - 1.388).abs() < 5e-4);
        assert!((eff[1].odds_ratio_mean - (-0.676f64).exp()).abs() < 1e-12);
        assert_eq!(eff[0].prob_positive, 1.0);
        assert_eq!(eff[1].prob_positive, 0.0);
        assert!(eff[0].sd.abs() < 1e-15);
    }

    #[test]
    fn membership_uninformative_psi_returns_prior() {
        let c = cfg(2);
        let mut p = Parameters::neutral(&c);
        p.eta[[1, 1]] = 1.0;
        p.beta[[0, 1]] = 0.5;
        let draws = PosteriorDraws::from_chains(c, vec![vec![p.clone()]]);
        let post = class_membership(&draws, &[1, 3], &[0.4], TimePoint::Wave(1)).unwrap();
        let nu = mixture_weights(&p.eta.row(1).to_vec(), &p.beta, &[0.4]).unwrap();
        for a in 0..2 {
            assert!((post[a] - nu[a]).abs() < 1e-14);
        }
    }

    #[test]
    fn single_profile_membership() {
        let c = cfg(1);
        let draws = PosteriorDraws::from_chains(c.clone(), vec![vec![Parameters::neutral(&c)]]);
        assert_eq!(
            class_membership(&draws, &[2, 2], &[0.0], TimePoint::Days(3.0)).unwrap(),
            vec![1.0]
        );
    }

    #[test]
    fn daily_grid_spans_waves() {
        let g = daily_grid(&[0.0, 6.0, 14.0]);
        assert_eq!(g.len(), 15);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[14], 14.0);
    }
}
