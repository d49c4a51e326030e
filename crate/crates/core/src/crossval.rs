//! Per-wave K-fold cross-validation of the number of profiles.

use std::fs::File;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split_folds, SurveyDataset};
use crate::error::{Error, Result};
use crate::fit::{fit, FitOptions, InitStrategy};
use crate::inference::{intercepts_at, TimePoint};
use crate::model::mixture_weights;
use crate::sampler::{PosteriorDraws, SamplerConfig};

/// Minimum per-item accuracy gain that justifies one more profile.
pub const SELECTION_THRESHOLD: f64 = 0.005;

#[derive(Debug, Clone, PartialEq)]
pub struct ItemPrediction {
    /// `p × d` marginal category probabilities.
    pub probabilities: Vec<Vec<f64>>,
    /// One-based predicted category per item.
    pub predicted: Vec<u8>,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for c in 1..v.len() {
        if v[c] > v[best] {
            best = c;
        }
    }
    best
}

/// Monte-Carlo marginal response probabilities for a respondent with
/// covariates `x` at `time`, and the modal category of each item.
pub fn predict_items(draws: &PosteriorDraws, x: &[f64], time: TimePoint) -> Result<ItemPrediction> {
    if draws.is_empty() {
        return Err(Error::Dataset("no posterior draws".into()));
    }
    let cfg = &draws.config;
    let (h, p, d) = (cfg.profiles, cfg.items, cfg.categories);
    let mut probabilities = vec![vec![0.0; d]; p];
    for draw in draws.iter() {
        let eta = intercepts_at(draw, &cfg.wave_times, time)?;
        let nu = mixture_weights(&eta, &draw.beta, x)?;
        for (j, row) in probabilities.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v += (0..h).map(|a| nu[a] * draw.psi[[a, j, c]]).sum::<f64>();
            }
        }
    }
    let n = draws.len() as f64;
    for row in probabilities.iter_mut() {
        row.iter_mut().for_each(|v| *v /= n);
    }
    let predicted = probabilities.iter().map(|row| argmax(row) as u8 + 1).collect();
    Ok(ItemPrediction {
        probabilities,
        predicted,
    })
}

/// Per-item fraction of exact matches between rows of predictions and truth.
pub fn accuracy(predictions: &[Vec<u8>], truth: &[Vec<u8>]) -> Result<Vec<f64>> {
    if predictions.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} observations",
            predictions.len(),
            truth.len()
        )));
    }
    let Some(first) = truth.first() else {
        return Err(Error::Dataset("no rows to score".into()));
    };
    let p = first.len();
    let mut hits = vec![0usize; p];
    for (pred, obs) in predictions.iter().zip(truth) {
        if pred.len() != p || obs.len() != p {
            return Err(Error::Dimension("rows have differing item counts".into()));
        }
        for j in 0..p {
            hits[j] += usize::from(pred[j] == obs[j]);
        }
    }
    Ok(hits.iter().map(|&h| h as f64 / truth.len() as f64).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOptions {
    pub h_grid: Vec<usize>,
    pub folds: usize,
    pub sampler: SamplerConfig,
    pub init: InitStrategy,
    pub seed: u64,
}

impl Default for CvOptions {
    fn default() -> Self {
        CvOptions {
            h_grid: vec![2, 3, 4],
            folds: 4,
            sampler: SamplerConfig {
                n_warmup: 1000,
                n_draws: 1000,
                ..SamplerConfig::default()
            },
            init: InitStrategy::default(),
            seed: 1,
        }
    }
}

impl CvOptions {
    pub fn validate(&self) -> Result<()> {
        if self.h_grid.is_empty() {
            return Err(Error::Config("the profile grid is empty".into()));
        }
        if let Some(h) = self.h_grid.iter().find(|&&h| h == 0) {
            return Err(Error::Config(format!("profile count {h} in grid must be positive")));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!("fold count must be at least 2, got {}", self.folds)));
        }
        self.sampler.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub profiles: usize,
    /// Zero-based fold.
    pub fold: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub item_labels: Vec<String>,
    pub h_grid: Vec<usize>,
    /// `items × grid`; `None` where any fold failed.
    pub accuracy: Vec<Vec<Option<f64>>>,
    /// Test-set size of each fold.
    pub fold_sizes: Vec<usize>,
    pub selected: Option<usize>,
    pub threshold: f64,
    pub sampler: SamplerConfig,
    pub failures: Vec<CellFailure>,
}

/// Smallest grid value after which no item gains at least `threshold` in
/// accuracy. Columns with missing cells are skipped.
pub fn select_profiles(h_grid: &[usize], accuracy: &[Vec<Option<f64>>], threshold: f64) -> Option<usize> {
    let mut order: Vec<usize> = (0..h_grid.len()).collect();
    order.sort_by_key(|&g| h_grid[g]);
    let complete: Vec<usize> = order
        .into_iter()
        .filter(|&g| accuracy.iter().all(|row| row[g].is_some()))
        .collect();
    for pair in complete.windows(2) {
        let (g, next) = (pair[0], pair[1]);
        let gains = accuracy
            .iter()
            .any(|row| row[next].unwrap() - row[g].unwrap() >= threshold);
        if !gains {
            return Some(h_grid[g]);
        }
    }
    complete.last().map(|&g| h_grid[g])
}

/// Fits every `(H, fold)` cell on the training rows and scores modal
/// predictions of the held-out responses.
pub fn run_cv(dataset: &SurveyDataset, options: &CvOptions) -> Result<AccuracyTable> {
    options.validate()?;
    dataset.validate()?;
    let assignment = split_folds(dataset, options.folds, options.seed)?;
    let p = dataset.items();
    let cells: Vec<(usize, usize)> = (0..options.h_grid.len())
        .flat_map(|g| (0..options.folds).map(move |f| (g, f)))
        .collect();
    let results: Vec<std::result::Result<Vec<f64>, String>> = cells
        .par_iter()
        .map(|&(g, fold)| {
            let h = options.h_grid[g];
            let cell_seed = options
                .seed
                .wrapping_mul(0x2545_f491_4f6c_dd1d)
                .wrapping_add((h as u64) << 32 | fold as u64);
            let run = || -> Result<Vec<f64>> {
                let train = dataset.subset(&assignment.train_rows(fold))?;
                let fit_options = FitOptions {
                    profiles: h,
                    sampler: SamplerConfig {
                        seed: cell_seed,
                        ..options.sampler.clone()
                    },
                    init: options.init,
                };
                let draws = fit(&train, &fit_options)?;
                let test = assignment.test_rows(fold);
                let predictions = test
                    .par_iter()
                    .map(|&i| {
                        let x = dataset.covariates.row(i).to_vec();
                        predict_items(&draws, &x, TimePoint::Wave(dataset.wave_of_row[i])).map(|p| p.predicted)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let truth: Vec<Vec<u8>> = test.iter().map(|&i| dataset.responses.row(i).to_vec()).collect();
                accuracy(&predictions, &truth)
            };
            run().map_err(|e| e.to_string())
        })
        .collect();

    let mut table = vec![vec![Some(0.0); options.h_grid.len()]; p];
    let mut failures = Vec::new();
    for (&(g, fold), result) in cells.iter().zip(results) {
        match result {
            Ok(acc) => {
                for j in 0..p {
                    if let Some(v) = table[j][g].as_mut() {
                        *v += acc[j] / options.folds as f64;
                    }
                }
            }
            Err(message) => {
                failures.push(CellFailure {
                    profiles: options.h_grid[g],
                    fold,
                    message,
                });
                for row in table.iter_mut() {
                    row[g] = None;
                }
            }
        }
    }
    let selected = select_profiles(&options.h_grid, &table, SELECTION_THRESHOLD);
    Ok(AccuracyTable {
        item_labels: dataset.item_labels.clone(),
        h_grid: options.h_grid.clone(),
        accuracy: table,
        fold_sizes: (0..options.folds).map(|f| assignment.test_rows(f).len()).collect(),
        selected,
        threshold: SELECTION_THRESHOLD,
        sampler: options.sampler.clone(),
        failures,
    })
}

impl AccuracyTable {
    /// Writes `item, H=..` rows; `percent` scales by 100 and rounds.
    pub fn write_csv(&self, path: &Path, percent: bool) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::file(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let mut header = vec!["item".to_string()];
        header.extend(self.h_grid.iter().map(|h| format!("H={h}")));
        w.write_record(&header)?;
        for (label, row) in self.item_labels.iter().zip(&self.accuracy) {
            let mut rec = vec![label.clone()];
            rec.extend(row.iter().map(|v| match v {
                None => String::new(),
                Some(a) if percent => format!("{}", (a * 100.0).round() as i64),
                Some(a) => format!("{a}"),
            }));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}
