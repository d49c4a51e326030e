//! Survey datasets: ingestion of tracker-style CSV files, covariate coding,
//! survey-weight normalization, fold construction and simulation from the
//! generative model.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::path::{Path, PathBuf};

use chrono::{NaiveDate, NaiveDateTime};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{mixture_weights, ModelConfig, Parameters};

/// Response strings in category order; category `c` is encoded as `c + 1`.
pub const RESPONSE_LEVELS: [&str; 5] = ["Not at all", "Rarely", "Sometimes", "Frequently", "Always"];

const MISSING_MARKERS: [&str; 5] = ["", "NA", "N/A", "__NA__", "nan"];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DropReport {
    pub rows_read: usize,
    pub missing_values: usize,
    pub nonpositive_weight: usize,
    pub rows_kept: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurveyDataset {
    /// `N × p`, entries in `1..=categories`.
    pub responses: Array2<u8>,
    /// `N × m`.
    pub covariates: Array2<f64>,
    pub weights: Vec<f64>,
    /// Zero-based wave of each row.
    pub wave_of_row: Vec<usize>,
    /// Days since the first wave, strictly increasing.
    pub wave_times: Vec<f64>,
    pub categories: usize,
    pub item_labels: Vec<String>,
    pub covariate_labels: Vec<String>,
    /// Calendar date of the first wave, when known.
    pub origin: Option<NaiveDate>,
    pub drops: DropReport,
}

impl SurveyDataset {
    pub fn rows(&self) -> usize {
        self.responses.nrows()
    }

    pub fn items(&self) -> usize {
        self.responses.ncols()
    }

    pub fn covariate_count(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn waves(&self) -> usize {
        self.wave_times.len()
    }

    pub fn model_config(&self, profiles: usize) -> ModelConfig {
        ModelConfig {
            profiles,
            items: self.items(),
            categories: self.categories,
            covariates: self.covariate_count(),
            wave_times: self.wave_times.clone(),
        }
    }

    pub fn wave_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.waves()];
        for &t in &self.wave_of_row {
            sizes[t] += 1;
        }
        sizes
    }

    /// Row indices of each wave, in row order.
    pub fn rows_by_wave(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.waves()];
        for (i, &t) in self.wave_of_row.iter().enumerate() {
            out[t].push(i);
        }
        out
    }

    /// Calendar date of a time offset, when the origin is known.
    pub fn date_of(&self, days: f64) -> Option<NaiveDate> {
        self.origin
            .and_then(|o| o.checked_add_signed(chrono::Duration::days(days.round() as i64)))
    }

    /// Survey-weighted mean covariate vector pooled over all waves.
    pub fn weighted_mean_covariates(&self) -> Vec<f64> {
        let total: f64 = self.weights.iter().sum();
        let m = self.covariate_count();
        let mut mean = vec![0.0; m];
        for (row, w) in self.covariates.rows().into_iter().zip(&self.weights) {
            for k in 0..m {
                mean[k] += w * row[k];
            }
        }
        mean.iter_mut().for_each(|v| *v /= total);
        mean
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.rows();
        let fail = |m: String| Err(Error::Dataset(m));
        if self.categories < 2 {
            return fail("at least two response categories are required".into());
        }
        if self.covariates.nrows() != n || self.weights.len() != n || self.wave_of_row.len() != n {
            return fail("row counts of responses, covariates, weights and waves differ".into());
        }
        if self.item_labels.len() != self.items() || self.covariate_labels.len() != self.covariate_count() {
            return fail("label counts do not match matrix widths".into());
        }
        if self.wave_times.windows(2).any(|w| w[1] <= w[0]) || self.wave_times.iter().any(|t| !t.is_finite()) {
            return fail("wave times must be finite and strictly increasing".into());
        }
        for (i, row) in self.responses.rows().into_iter().enumerate() {
            if let Some(&c) = row.iter().find(|&&c| c < 1 || c as usize > self.categories) {
                return Err(Error::Row {
                    row: i,
                    message: format!("response {c} outside 1..={}", self.categories),
                });
            }
        }
        for (i, &w) in self.weights.iter().enumerate() {
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::Row {
                    row: i,
                    message: format!("weight {w} is not strictly positive"),
                });
            }
        }
        if let Some(i) = self.wave_of_row.iter().position(|&t| t >= self.waves()) {
            return Err(Error::Row {
                row: i,
                message: format!("wave index {} out of range", self.wave_of_row[i] + 1),
            });
        }
        if self.covariates.iter().any(|v| !v.is_finite()) {
            return fail("covariates must be finite".into());
        }
        if let Some(t) = self.wave_sizes().iter().position(|&s| s == 0) {
            return fail(format!("wave {} has no rows", t + 1));
        }
        Ok(())
    }

    /// Dataset restricted to `rows`, with weights renormalized per wave.
    pub fn subset(&self, rows: &[usize]) -> Result<SurveyDataset> {
        let p = self.items();
        let m = self.covariate_count();
        let mut responses = Array2::zeros((rows.len(), p));
        let mut covariates = Array2::zeros((rows.len(), m));
        for (r, &i) in rows.iter().enumerate() {
            responses.row_mut(r).assign(&self.responses.row(i));
            covariates.row_mut(r).assign(&self.covariates.row(i));
        }
        let out = SurveyDataset {
            responses,
            covariates,
            weights: rows.iter().map(|&i| self.weights[i]).collect(),
            wave_of_row: rows.iter().map(|&i| self.wave_of_row[i]).collect(),
            wave_times: self.wave_times.clone(),
            categories: self.categories,
            item_labels: self.item_labels.clone(),
            covariate_labels: self.covariate_labels.clone(),
            origin: self.origin,
            drops: DropReport {
                rows_read: rows.len(),
                rows_kept: rows.len(),
                ..Default::default()
            },
        };
        out.validate()?;
        Ok(normalize_weights(out))
    }
}

/// Rescales weights so that each wave's weights sum to its row count.
pub fn normalize_weights(mut dataset: SurveyDataset) -> SurveyDataset {
    let mut sums = vec![0.0; dataset.waves()];
    let sizes = dataset.wave_sizes();
    for (&t, &w) in dataset.wave_of_row.iter().zip(&dataset.weights) {
        sums[t] += w;
    }
    for (w, &t) in dataset.weights.iter_mut().zip(&dataset.wave_of_row) {
        *w *= sizes[t] as f64 / sums[t];
    }
    dataset
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemColumn {
    pub column: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateSpec {
    /// Numeric covariate, centered at its weighted mean and divided by `unit`.
    Numeric {
        column: String,
        label: String,
        unit: f64,
    },
    /// Dummy-coded categorical covariate; one indicator per non-reference level.
    Categorical {
        column: String,
        label: String,
        levels: Vec<String>,
        reference: String,
        /// Raw value → canonical level.
        #[serde(default)]
        aliases: BTreeMap<String, String>,
    },
}

impl CovariateSpec {
    pub fn column(&self) -> &str {
        match self {
            CovariateSpec::Numeric { column, .. } | CovariateSpec::Categorical { column, .. } => column,
        }
    }

    fn labels(&self) -> Vec<String> {
        match self {
            CovariateSpec::Numeric { label, .. } => vec![label.clone()],
            CovariateSpec::Categorical {
                label,
                levels,
                reference,
                ..
            } => levels
                .iter()
                .filter(|l| *l != reference)
                .map(|l| format!("{label}: {l}"))
                .collect(),
        }
    }
}

/// Column-name mapping for [`load_csv`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub items: Vec<ItemColumn>,
    pub weight: String,
    pub date: String,
    /// chrono format string; ISO-8601 and `dd/mm/yyyy [HH:MM]` are tried when absent.
    #[serde(default)]
    pub date_format: Option<String>,
    /// Wave identifier column. Without it every distinct calendar day is a wave.
    #[serde(default)]
    pub wave: Option<String>,
    #[serde(default = "default_levels")]
    pub response_levels: Vec<String>,
    pub covariates: Vec<CovariateSpec>,
}

fn default_levels() -> Vec<String> {
    RESPONSE_LEVELS.iter().map(|s| s.to_string()).collect()
}

const ITALY_ITEMS: [(usize, &str); 14] = [
    (1, "ih1"),
    (2, "ih2"),
    (3, "ih3"),
    (4, "ih4"),
    (5, "ih5"),
    (6, "ih6"),
    (7, "ih7"),
    (8, "ih8"),
    (11, "ih11"),
    (12, "ih12"),
    (13, "ih13"),
    (14, "ih14"),
    (15, "ih15"),
    (16, "ih16"),
];

const ITALY_MACRO_REGIONS: [(&str, &[&str]); 5] = [
    ("North-West", &["Piemonte", "Piedmont", "Valle d'Aosta", "Aosta Valley", "Liguria", "Lombardia", "Lombardy"]),
    (
        "North-East",
        &[
            "Trentino-Alto Adige",
            "Trentino Alto Adige",
            "Trentino-South Tyrol",
            "Veneto",
            "Friuli-Venezia Giulia",
            "Friuli Venezia Giulia",
            "Emilia-Romagna",
            "Emilia Romagna",
        ],
    ),
    ("Center", &["Toscana", "Tuscany", "Umbria", "Marche", "Lazio", "Centre", "Central"]),
    ("South", &["Abruzzo", "Molise", "Campania", "Puglia", "Apulia", "Basilicata", "Calabria"]),
    ("Islands", &["Sicilia", "Sicily", "Sardegna", "Sardinia"]),
];

impl Schema {
    /// Layout of the public behavior-tracker extract for Italy.
    pub fn italy_tracker() -> Self {
        let mut region_aliases = BTreeMap::new();
        for (level, names) in ITALY_MACRO_REGIONS {
            for n in names {
                region_aliases.insert(n.to_string(), level.to_string());
            }
        }
        let employment_aliases = [
            ("Full time employment", "Full-time employment"),
            ("Part time employment", "Part-time employment"),
            ("Full time student", "Student"),
            ("Unemployed", "Not working"),
        ]
        .into_iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
        Schema {
            items: ITALY_ITEMS
                .iter()
                .map(|(k, l)| ItemColumn {
                    column: format!("i12_health_{k}"),
                    label: l.to_string(),
                })
                .collect(),
            weight: "weight".into(),
            date: "endtime".into(),
            date_format: None,
            wave: Some("qweek".into()),
            response_levels: default_levels(),
            covariates: vec![
                CovariateSpec::Numeric {
                    column: "age".into(),
                    label: "age (5 years)".into(),
                    unit: 5.0,
                },
                CovariateSpec::Categorical {
                    column: "gender".into(),
                    label: "sex".into(),
                    levels: vec!["Female".into(), "Male".into()],
                    reference: "Female".into(),
                    aliases: BTreeMap::new(),
                },
                CovariateSpec::Categorical {
                    column: "region_state".into(),
                    label: "region".into(),
                    levels: ITALY_MACRO_REGIONS.iter().map(|(l, _)| l.to_string()).collect(),
                    reference: "North-West".into(),
                    aliases: region_aliases,
                },
                CovariateSpec::Categorical {
                    column: "employment_status".into(),
                    label: "employment".into(),
                    levels: vec![
                        "Full-time employment".into(),
                        "Part-time employment".into(),
                        "Not working".into(),
                        "Student".into(),
                        "Retired".into(),
                    ],
                    reference: "Full-time employment".into(),
                    aliases: employment_aliases,
                },
            ],
        }
    }
}

fn is_missing(v: &str) -> bool {
    let v = v.trim();
    MISSING_MARKERS.iter().any(|m| m.eq_ignore_ascii_case(v))
}

fn parse_date(raw: &str, format: Option<&str>) -> Option<NaiveDate> {
    let raw = raw.trim();
    if let Some(f) = format {
        return NaiveDateTime::parse_from_str(raw, f)
            .map(|dt| dt.date())
            .or_else(|_| NaiveDate::parse_from_str(raw, f))
            .ok();
    }
    const DATETIME: [&str; 4] = ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%d/%m/%Y %H:%M", "%d/%m/%Y %H:%M:%S"];
    const DATE: [&str; 2] = ["%Y-%m-%d", "%d/%m/%Y"];
    DATETIME
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(raw, f).ok().map(|d| d.date()))
        .or_else(|| DATE.iter().find_map(|f| NaiveDate::parse_from_str(raw, f).ok()))
}

fn encode_response(raw: &str, levels: &[String]) -> Option<u8> {
    let raw = raw.trim();
    if let Some(pos) = levels.iter().position(|l| l.eq_ignore_ascii_case(raw)) {
        return Some(pos as u8 + 1);
    }
    match raw.parse::<u8>() {
        Ok(c) if c >= 1 && c as usize <= levels.len() => Some(c),
        _ => None,
    }
}

/// Reads a tracker-style CSV file.
///
/// Rows with a missing analyzed value (item, covariate, weight, date) or a
/// nonpositive weight are dropped and counted in [`SurveyDataset::drops`].
/// Weights are normalized per wave and covariates are encoded with
/// [`encode_covariates`] using the normalized weights.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<SurveyDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_reader(file);
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn { column: name.to_string() })
    };
    let item_cols: Vec<usize> = schema.items.iter().map(|i| col(&i.column)).collect::<Result<_>>()?;
    let weight_col = col(&schema.weight)?;
    let date_col = col(&schema.date)?;
    let wave_col = schema.wave.as_deref().map(col).transpose()?;
    let cov_cols: Vec<usize> = schema.covariates.iter().map(|c| col(c.column())).collect::<Result<_>>()?;

    let mut drops = DropReport::default();
    let mut responses: Vec<u8> = Vec::new();
    let mut raw_covariates: Vec<Vec<String>> = Vec::new();
    let mut weights = Vec::new();
    let mut wave_keys: Vec<String> = Vec::new();
    let mut dates = Vec::new();
    let mut all_wave_keys: Vec<String> = Vec::new();

    for (i, record) in reader.records().enumerate() {
        let record = record?;
        drops.rows_read += 1;
        let field = |c: usize| record.get(c).unwrap_or("");
        let date = (!is_missing(field(date_col)))
            .then(|| parse_date(field(date_col), schema.date_format.as_deref()))
            .flatten();
        let wave_key = match wave_col {
            Some(c) if !is_missing(field(c)) => Some(field(c).trim().to_string()),
            Some(_) => None,
            None => date.map(|d| d.to_string()),
        };
        if let Some(k) = &wave_key {
            if !all_wave_keys.contains(k) {
                all_wave_keys.push(k.clone());
            }
        }
        let analyzed_missing = item_cols.iter().chain(&cov_cols).any(|&c| is_missing(field(c)))
            || is_missing(field(weight_col))
            || date.is_none()
            || wave_key.is_none();
        if analyzed_missing {
            drops.missing_values += 1;
            continue;
        }
        let weight: f64 = match field(weight_col).trim().parse() {
            Ok(w) => w,
            Err(_) => {
                return Err(Error::Row {
                    row: i,
                    message: format!("weight `{}` is not a number", field(weight_col)),
                })
            }
        };
        if !(weight > 0.0) || !weight.is_finite() {
            drops.nonpositive_weight += 1;
            continue;
        }
        for (&c, item) in item_cols.iter().zip(&schema.items) {
            let code = encode_response(field(c), &schema.response_levels).ok_or_else(|| Error::Row {
                row: i,
                message: format!("unmappable response `{}` in column `{}`", field(c), item.column),
            })?;
            responses.push(code);
        }
        raw_covariates.push(cov_cols.iter().map(|&c| field(c).trim().to_string()).collect());
        weights.push(weight);
        wave_keys.push(wave_key.unwrap());
        dates.push(date.unwrap());
    }
    drops.rows_kept = weights.len();

    // Waves are ordered by their earliest retained interview date.
    let mut first_date: HashMap<&str, NaiveDate> = HashMap::new();
    for (k, d) in wave_keys.iter().zip(&dates) {
        let e = first_date.entry(k.as_str()).or_insert(*d);
        if d < e {
            *e = *d;
        }
    }
    if let Some(k) = all_wave_keys.iter().find(|k| !first_date.contains_key(k.as_str())) {
        return Err(Error::Dataset(format!("wave `{k}` has no usable rows")));
    }
    if first_date.is_empty() {
        return Err(Error::Dataset("no usable rows".into()));
    }
    let mut ordered: Vec<(&str, NaiveDate)> = first_date.iter().map(|(k, d)| (*k, *d)).collect();
    ordered.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(b.0)));
    let origin = ordered[0].1;
    let wave_index: HashMap<&str, usize> = ordered.iter().enumerate().map(|(i, (k, _))| (*k, i)).collect();
    let wave_times: Vec<f64> = ordered.iter().map(|(_, d)| (*d - origin).num_days() as f64).collect();
    if wave_times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Dataset("two waves start on the same day".into()));
    }
    let wave_of_row: Vec<usize> = wave_keys.iter().map(|k| wave_index[k.as_str()]).collect();

    let n = weights.len();
    let p = schema.items.len();
    let mut dataset = SurveyDataset {
        responses: Array2::from_shape_vec((n, p), responses).expect("row-major responses"),
        covariates: Array2::zeros((n, 0)),
        weights,
        wave_of_row,
        wave_times,
        categories: schema.response_levels.len(),
        item_labels: schema.items.iter().map(|i| i.label.clone()).collect(),
        covariate_labels: Vec::new(),
        origin: Some(origin),
        drops,
    };
    dataset = normalize_weights(dataset);
    let (covariates, labels) = encode_covariates(&raw_covariates, &schema.covariates, &dataset.weights)?;
    dataset.covariates = covariates;
    dataset.covariate_labels = labels;
    dataset.validate()?;
    Ok(dataset)
}

/// Encodes raw covariate strings (one column per spec) into a design matrix.
///
/// Numeric covariates are centered at the `weights`-weighted mean and divided
/// by their unit; categorical covariates get one indicator per non-reference
/// level.
pub fn encode_covariates(
    raw: &[Vec<String>],
    specs: &[CovariateSpec],
    weights: &[f64],
) -> Result<(Array2<f64>, Vec<String>)> {
    if raw.len() != weights.len() {
        return Err(Error::Dimension(format!(
            "{} covariate records but {} weights",
            raw.len(),
            weights.len()
        )));
    }
    let labels: Vec<String> = specs.iter().flat_map(|s| s.labels()).collect();
    let mut out = Array2::zeros((raw.len(), labels.len()));
    let mut offset = 0;
    for (s, spec) in specs.iter().enumerate() {
        match spec {
            CovariateSpec::Numeric { column, unit, .. } => {
                let values: Vec<f64> = raw
                    .iter()
                    .enumerate()
                    .map(|(i, r)| {
                        r[s].trim().parse::<f64>().map_err(|_| Error::Row {
                            row: i,
                            message: format!("covariate `{column}` value `{}` is not numeric", r[s]),
                        })
                    })
                    .collect::<Result<_>>()?;
                let total: f64 = weights.iter().sum();
                let mean = values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / total;
                for (i, v) in values.iter().enumerate() {
                    out[[i, offset]] = (v - mean) / unit;
                }
                offset += 1;
            }
            CovariateSpec::Categorical {
                column,
                levels,
                reference,
                aliases,
                ..
            } => {
                if !levels.contains(reference) {
                    return Err(Error::Config(format!(
                        "reference level `{reference}` of `{column}` is not among its levels"
                    )));
                }
                let dummies: Vec<&String> = levels.iter().filter(|l| *l != reference).collect();
                for (i, r) in raw.iter().enumerate() {
                    let v = r[s].trim();
                    let canonical = aliases.get(v).map(String::as_str).unwrap_or(v);
                    let level = levels
                        .iter()
                        .find(|l| l.eq_ignore_ascii_case(canonical))
                        .ok_or_else(|| Error::UnseenLevel {
                            column: column.clone(),
                            level: v.to_string(),
                        })?;
                    if let Some(pos) = dummies.iter().position(|d| *d == level) {
                        out[[i, offset + pos]] = 1.0;
                    }
                }
                offset += dummies.len();
            }
        }
    }
    Ok((out, labels))
}

/// Assignment of each row to one of `folds` cross-validation folds (zero-based).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub fold_of_row: Vec<usize>,
    pub folds: usize,
}

impl FoldAssignment {
    pub fn test_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of_row.len()).filter(|&i| self.fold_of_row[i] == fold).collect()
    }

    pub fn train_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of_row.len()).filter(|&i| self.fold_of_row[i] != fold).collect()
    }
}

/// Random balanced partition of each wave into `k` folds.
pub fn split_folds(dataset: &SurveyDataset, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::Config(format!("fold count must be at least 2, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of_row = vec![0; dataset.rows()];
    for (t, mut rows) in dataset.rows_by_wave().into_iter().enumerate() {
        if rows.len() < k {
            return Err(Error::Dataset(format!(
                "wave {} has {} rows, fewer than {k} folds",
                t + 1,
                rows.len()
            )));
        }
        rows.shuffle(&mut rng);
        for (pos, i) in rows.into_iter().enumerate() {
            fold_of_row[i] = pos % k;
        }
    }
    Ok(FoldAssignment { fold_of_row, folds: k })
}

/// Source of covariate vectors for [`simulate`].
pub trait CovariateGenerator {
    fn generate(&mut self, wave: usize, rng: &mut ChaCha8Rng) -> Vec<f64>;
}

impl<F: FnMut(usize, &mut ChaCha8Rng) -> Vec<f64>> CovariateGenerator for F {
    fn generate(&mut self, wave: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self(wave, rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateDistribution {
    Normal { mean: f64, sd: f64 },
    Bernoulli { p: f64 },
}

/// Independent covariates with fixed marginal laws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndependentCovariates(pub Vec<CovariateDistribution>);

impl CovariateGenerator for IndependentCovariates {
    fn generate(&mut self, _wave: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.0
            .iter()
            .map(|d| match *d {
                CovariateDistribution::Normal { mean, sd } => {
                    let z: f64 = StandardNormal.sample(rng);
                    mean + sd * z
                }
                CovariateDistribution::Bernoulli { p } => {
                    if rng.random::<f64>() < p {
                        1.0
                    } else {
                        0.0
                    }
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub dataset: SurveyDataset,
    /// Zero-based latent profile of each row.
    pub latent: Vec<usize>,
}

fn draw_categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return c;
        }
    }
    probs.len() - 1
}

/// Draws a dataset from the generative model with unit weights.
///
/// `rows_per_wave` gives `n_t` for each wave.
pub fn simulate(
    params: &Parameters,
    config: &ModelConfig,
    covariates: &mut dyn CovariateGenerator,
    rows_per_wave: &[usize],
    seed: u64,
) -> Result<Simulation> {
    config.validate()?;
    params
        .validate(config)
        .map_err(|e| Error::Dimension(format!("parameters do not match the model configuration: {e}")))?;
    if rows_per_wave.len() != config.waves() {
        return Err(Error::Dimension(format!(
            "{} wave sizes for {} waves",
            rows_per_wave.len(),
            config.waves()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = rows_per_wave.iter().sum();
    let (p, d, m) = (config.items, config.categories, config.covariates);
    let mut responses = Array2::zeros((n, p));
    let mut design = Array2::zeros((n, m));
    let mut wave_of_row = Vec::with_capacity(n);
    let mut latent = Vec::with_capacity(n);
    let mut row = 0;
    for (t, &n_t) in rows_per_wave.iter().enumerate() {
        let eta_row: Vec<f64> = params.eta.row(t).to_vec();
        for _ in 0..n_t {
            let x = covariates.generate(t, &mut rng);
            if x.len() != m {
                return Err(Error::Dimension(format!(
                    "covariate generator produced {} values, expected {m}",
                    x.len()
                )));
            }
            let nu = mixture_weights(&eta_row, &params.beta, &x)?;
            let z = draw_categorical(&nu, &mut rng);
            for j in 0..p {
                let probs: Vec<f64> = (0..d).map(|c| params.psi[[z, j, c]]).collect();
                responses[[row, j]] = draw_categorical(&probs, &mut rng) as u8 + 1;
            }
            for k in 0..m {
                design[[row, k]] = x[k];
            }
            wave_of_row.push(t);
            latent.push(z);
            row += 1;
        }
    }
    let dataset = SurveyDataset {
        responses,
        covariates: design,
        weights: vec![1.0; n],
        wave_of_row,
        wave_times: config.wave_times.clone(),
        categories: d,
        item_labels: (1..=p).map(|j| format!("item{j}")).collect(),
        covariate_labels: (1..=m).map(|k| format!("x{k}")).collect(),
        origin: None,
        drops: DropReport {
            rows_read: n,
            rows_kept: n,
            ..Default::default()
        },
    };
    Ok(Simulation { dataset, latent })
}

/// Sidecar metadata of the canonical dataset dump.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub rows: usize,
    pub categories: usize,
    pub item_labels: Vec<String>,
    pub covariate_labels: Vec<String>,
    pub wave_times: Vec<f64>,
    #[serde(default)]
    pub origin: Option<NaiveDate>,
    #[serde(default)]
    pub wave_dates: Option<Vec<NaiveDate>>,
    #[serde(default)]
    pub drops: DropReport,
}

/// Path of the JSON sidecar belonging to a canonical CSV file.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Writes `dataset` as a canonical CSV (`wave,weight,<items>,<covariates>`,
/// one-based waves and integer categories) plus its JSON sidecar.
pub fn write_canonical(dataset: &SurveyDataset, csv_path: &Path) -> Result<()> {
    let file = File::create(csv_path).map_err(|e| Error::file(csv_path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = vec!["wave".to_string(), "weight".to_string()];
    header.extend(dataset.item_labels.iter().cloned());
    header.extend(dataset.covariate_labels.iter().cloned());
    w.write_record(&header)?;
    for i in 0..dataset.rows() {
        let mut rec = vec![(dataset.wave_of_row[i] + 1).to_string(), format!("{}", dataset.weights[i])];
        rec.extend(dataset.responses.row(i).iter().map(|c| c.to_string()));
        rec.extend(dataset.covariates.row(i).iter().map(|v| format!("{v}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    let wave_dates = dataset
        .origin
        .map(|_| dataset.wave_times.iter().filter_map(|&t| dataset.date_of(t)).collect());
    let meta = DatasetMetadata {
        rows: dataset.rows(),
        categories: dataset.categories,
        item_labels: dataset.item_labels.clone(),
        covariate_labels: dataset.covariate_labels.clone(),
        wave_times: dataset.wave_times.clone(),
        origin: dataset.origin,
        wave_dates,
        drops: dataset.drops.clone(),
    };
    let side = sidecar_path(csv_path);
    let f = File::create(&side).map_err(|e| Error::file(&side, e))?;
    serde_json::to_writer_pretty(f, &meta)?;
    Ok(())
}

pub fn read_canonical(csv_path: &Path) -> Result<SurveyDataset> {
    let side = sidecar_path(csv_path);
    let f = File::open(&side).map_err(|e| Error::file(&side, e))?;
    let meta: DatasetMetadata = serde_json::from_reader(f)?;
    let file = File::open(csv_path).map_err(|e| Error::file(csv_path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let p = meta.item_labels.len();
    let m = meta.covariate_labels.len();
    let headers = reader.headers()?.clone();
    if headers.len() != 2 + p + m {
        return Err(Error::Dataset(format!(
            "{} has {} columns, metadata implies {}",
            csv_path.display(),
            headers.len(),
            2 + p + m
        )));
    }
    let mut responses = Vec::new();
    let mut covariates = Vec::new();
    let mut weights = Vec::new();
    let mut waves = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::Row {
            row: i,
            message: format!("cannot parse {what}"),
        };
        let wave: usize = rec[0].parse().map_err(|_| bad("wave"))?;
        if wave == 0 {
            return Err(bad("wave (waves are one-based)"));
        }
        waves.push(wave - 1);
        weights.push(rec[1].parse::<f64>().map_err(|_| bad("weight"))?);
        for j in 0..p {
            responses.push(rec[2 + j].parse::<u8>().map_err(|_| bad("response"))?);
        }
        for k in 0..m {
            covariates.push(rec[2 + p + k].parse::<f64>().map_err(|_| bad("covariate"))?);
        }
    }
    let n = weights.len();
    let dataset = SurveyDataset {
        responses: Array2::from_shape_vec((n, p), responses).expect("row-major"),
        covariates: Array2::from_shape_vec((n, m), covariates).expect("row-major"),
        weights,
        wave_of_row: waves,
        wave_times: meta.wave_times,
        categories: meta.categories,
        item_labels: meta.item_labels,
        covariate_labels: meta.covariate_labels,
        origin: meta.origin,
        drops: meta.drops,
    };
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn small_schema() -> Schema {
        Schema {
            items: vec![ItemColumn {
                column: "q1".into(),
                label: "Q1".into(),
            }],
            weight: "w".into(),
            date: "date".into(),
            date_format: None,
            wave: None,
            response_levels: default_levels(),
            covariates: vec![CovariateSpec::Numeric {
                column: "age".into(),
                label: "age".into(),
                unit: 5.0,
            }],
        }
    }

    fn write_file(dir: &tempfile::TempDir, body: &str) -> PathBuf {
        let path = dir.path().join("in.csv");
        let mut f = File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    #[test]
    fn response_strings_encode_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(
            &dir,
            "q1,w,date,age\nAlways,1,2020-04-02,30\nNot at all,1,2020-04-02,40\nSometimes,1,2020-04-02,50\n",
        );
        let ds = load_csv(&path, &small_schema()).unwrap();
        assert_eq!(ds.responses.column(0).to_vec(), vec![5, 1, 3]);
        assert_eq!(ds.waves(), 1);
        assert_eq!(ds.wave_times, vec![0.0]);
    }

    #[test]
    fn zero_weight_row_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(
            &dir,
            "q1,w,date,age\nAlways,0,2020-04-02,30\nRarely,2,2020-04-02,40\nRarely,2,2020-04-08,40\n",
        );
        let ds = load_csv(&path, &small_schema()).unwrap();
        assert_eq!(ds.rows(), 2);
        assert_eq!(ds.drops.nonpositive_weight, 1);
        assert_eq!(ds.drops.rows_read, 3);
        assert_eq!(ds.wave_times, vec![0.0, 6.0]);
        assert_eq!(ds.weights, vec![1.0, 1.0]);
    }

    #[test]
    fn missing_items_are_listwise_deleted() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "q1,w,date,age\n,1,2020-04-02,30\nRarely,1,2020-04-02,\nAlways,1,2020-04-02,20\n");
        let ds = load_csv(&path, &small_schema()).unwrap();
        assert_eq!(ds.rows(), 1);
        assert_eq!(ds.drops.missing_values, 2);
    }

    #[test]
    fn missing_column_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "q1,date,age\nAlways,2020-04-02,30\n");
        match load_csv(&path, &small_schema()) {
            Err(Error::MissingColumn { column }) => assert_eq!(column, "w"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unmappable_response_reports_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "q1,w,date,age\nAlways,1,2020-04-02,30\nOften,1,2020-04-02,30\n");
        match load_csv(&path, &small_schema()) {
            Err(Error::Row { row, message }) => {
                assert_eq!(row, 1);
                assert!(message.contains("Often"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_wave_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut schema = small_schema();
        schema.wave = Some("wave".into());
        let path = write_file(
            &dir,
            "q1,w,date,age,wave\nAlways,1,2020-04-02,30,week 1\nAlways,-1,2020-04-09,30,week 2\n",
        );
        assert!(matches!(load_csv(&path, &schema), Err(Error::Dataset(_))));
    }

    #[test]
    fn tracker_date_format_and_wave_column() {
        let dir = tempfile::tempdir().unwrap();
        let mut schema = small_schema();
        schema.wave = Some("wave".into());
        let path = write_file(
            &dir,
            "q1,w,date,age,wave\nAlways,1,08/04/2020 10:00,30,week 2\nAlways,3,02/04/2020 09:30,30,week 1\nRarely,1,03/04/2020 09:30,30,week 1\n",
        );
        let ds = load_csv(&path, &schema).unwrap();
        assert_eq!(ds.wave_times, vec![0.0, 6.0]);
        assert_eq!(ds.wave_of_row, vec![1, 0, 0]);
        assert_eq!(ds.origin, NaiveDate::from_ymd_opt(2020, 4, 2));
        assert_eq!(ds.weights, vec![1.0, 1.5, 0.5]);
    }

    #[test]
    fn age_centering_and_units() {
        let raw: Vec<Vec<String>> = [40.0, 45.0, 35.0].iter().map(|a: &f64| vec![a.to_string()]).collect();
        let specs = small_schema().covariates;
        let (x, labels) = encode_covariates(&raw, &specs, &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(labels, vec!["age"]);
        assert_eq!(x[[0, 0]], 0.0);
        assert!((x[[1, 0]] - 1.0).abs() < 1e-15);
        assert!((x[[2, 0]] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn italy_covariates_have_ten_columns() {
        let schema = Schema::italy_tracker();
        let raw = vec![
            vec!["40".to_string(), "Female".into(), "Campania".into(), "Full time employment".into()],
            vec!["40".to_string(), "Male".into(), "North-West".into(), "Retired".into()],
        ];
        let (x, labels) = encode_covariates(&raw, &schema.covariates, &[1.0, 1.0]).unwrap();
        assert_eq!(labels.len(), 10);
        assert_eq!(x.ncols(), 10);
        let south = labels.iter().position(|l| l == "region: South").unwrap();
        assert_eq!(x.row(0).to_vec(), {
            let mut v = vec![0.0; 10];
            v[south] = 1.0;
            v
        });
        let male = labels.iter().position(|l| l == "sex: Male").unwrap();
        let retired = labels.iter().position(|l| l == "employment: Retired").unwrap();
        assert_eq!(x[[1, male]], 1.0);
        assert_eq!(x[[1, retired]], 1.0);
        assert_eq!(x.row(1).sum(), 2.0);
    }

    #[test]
    fn unseen_level_is_named() {
        let schema = Schema::italy_tracker();
        let raw = vec![vec!["40".to_string(), "Other".into(), "Lazio".into(), "Retired".into()]];
        match encode_covariates(&raw, &schema.covariates, &[1.0]) {
            Err(Error::UnseenLevel { column, level }) => {
                assert_eq!(column, "gender");
                assert_eq!(level, "Other");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    fn dataset_with(weights: Vec<f64>, waves: Vec<usize>, times: Vec<f64>) -> SurveyDataset {
        let n = weights.len();
        SurveyDataset {
            responses: Array2::from_elem((n, 1), 1),
            covariates: Array2::zeros((n, 1)),
            weights,
            wave_of_row: waves,
            wave_times: times,
            categories: 2,
            item_labels: vec!["a".into()],
            covariate_labels: vec!["x".into()],
            origin: None,
            drops: DropReport::default(),
        }
    }

    #[test]
    fn normalization_examples() {
        let ds = normalize_weights(dataset_with(vec![2.0; 4], vec![0; 4], vec![0.0]));
        assert_eq!(ds.weights, vec![1.0; 4]);
        let ds = normalize_weights(dataset_with(vec![1.0, 3.0], vec![0, 0], vec![0.0]));
        assert_eq!(ds.weights, vec![0.5, 1.5]);
        let ds = normalize_weights(dataset_with(vec![1.0; 3], vec![0, 1, 1], vec![0.0, 1.0]));
        assert_eq!(ds.weights, vec![1.0; 3]);
    }

    #[test]
    fn folds_balanced_within_wave() {
        let ds = dataset_with(vec![1.0; 18], [vec![0; 8], vec![1; 10]].concat(), vec![0.0, 1.0]);
        let folds = split_folds(&ds, 4, 9).unwrap();
        let mut sizes = vec![[0usize; 4]; 2];
        for (i, &f) in folds.fold_of_row.iter().enumerate() {
            sizes[ds.wave_of_row[i]][f] += 1;
        }
        assert_eq!(sizes[0], [2, 2, 2, 2]);
        let mut second = sizes[1];
        second.sort();
        assert_eq!(second, [2, 2, 3, 3]);
        assert_eq!(folds, split_folds(&ds, 4, 9).unwrap());
    }

    #[test]
    fn small_wave_rejected() {
        let ds = dataset_with(vec![1.0; 5], vec![0, 0, 0, 0, 1], vec![0.0, 1.0]);
        match split_folds(&ds, 2, 1) {
            Err(Error::Dataset(msg)) => assert!(msg.contains("wave 2"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn canonical_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = dataset_with(vec![0.5, 1.5, 1.0], vec![0, 0, 1], vec![0.0, 6.0]);
        ds.origin = NaiveDate::from_ymd_opt(2020, 4, 2);
        ds.covariates[[1, 0]] = -0.25;
        let path = dir.path().join("data.csv");
        write_canonical(&ds, &path).unwrap();
        let back = read_canonical(&path).unwrap();
        assert_eq!(back, ds);
    }
}
