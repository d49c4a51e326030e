//! Run configuration: one JSON document, optionally overridden by
//! `LATENTWAVE_<SECTION>_<KEY>` environment variables.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use latentwave::data::{CovariateDistribution, Schema};
use latentwave::fit::InitStrategy;
use latentwave::sampler::SamplerConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

pub const ENV_PREFIX: &str = "LATENTWAVE_";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Survey CSV (tracker layout) or canonical CSV with JSON sidecar.
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    /// Ground-truth parameter document for `simulate`.
    pub params: Option<PathBuf>,
    /// Directory holding draws written by `fit`.
    pub draws: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputFormat {
    /// `wave,weight,<items>,<covariates>` plus a JSON sidecar.
    #[default]
    Canonical,
    /// Raw survey export read through `data.schema`.
    Survey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub format: InputFormat,
    /// Column mapping for survey input; the Italy tracker layout when absent.
    pub schema: Option<Schema>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            format: InputFormat::Canonical,
            schema: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub profiles: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { profiles: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvSection {
    pub h_grid: Vec<usize>,
    pub folds: usize,
    pub n_warmup: usize,
    pub n_draws: usize,
}

impl Default for CvSection {
    fn default() -> Self {
        CvSection {
            h_grid: vec![2, 3, 4],
            folds: 4,
            n_warmup: 1000,
            n_draws: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictionSection {
    /// First grid day (days since the first wave); defaults to the first wave.
    pub start: Option<f64>,
    /// Last grid day; defaults to the last wave.
    pub end: Option<f64>,
    pub step: f64,
    pub level: f64,
    pub allow_extrapolation: bool,
}

impl Default for PredictionSection {
    fn default() -> Self {
        PredictionSection {
            start: None,
            end: None,
            step: 1.0,
            level: 0.95,
            allow_extrapolation: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    /// Rows per wave; a single value applies to every wave.
    pub rows_per_wave: Vec<usize>,
    /// Covariate laws; standard normals when empty.
    pub covariates: Vec<CovariateDistribution>,
    /// Calendar date of the first wave.
    pub origin: Option<NaiveDate>,
}

impl Default for SimulationSection {
    fn default() -> Self {
        SimulationSection {
            rows_per_wave: vec![300],
            covariates: Vec::new(),
            origin: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub data: DataSection,
    pub model: ModelSection,
    /// The sampler seed is replaced by the top-level `seed`.
    pub sampler: SamplerConfig,
    pub init: InitStrategy,
    pub cv: CvSection,
    pub prediction: PredictionSection,
    pub simulation: SimulationSection,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            paths: Paths::default(),
            data: DataSection::default(),
            model: ModelSection::default(),
            sampler: SamplerConfig::default(),
            init: InitStrategy::default(),
            cv: CvSection::default(),
            prediction: PredictionSection::default(),
            simulation: SimulationSection::default(),
            seed: 1,
        }
    }
}

fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies `LATENTWAVE_<SECTION>_<KEY>` and `LATENTWAVE_SEED` overrides.
/// Variables naming no known section are ignored; a known section with an
/// unknown key is an error.
pub fn apply_overrides<I>(doc: &mut Value, vars: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let Value::Object(root) = doc else {
        return Err(CliError::Config("configuration must be a JSON object".into()));
    };
    for (name, raw) in vars {
        let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let rest = rest.to_ascii_lowercase();
        if let Some(slot) = root.get_mut(&rest) {
            if !slot.is_object() {
                *slot = parse_scalar(&raw);
            }
            continue;
        }
        let Some((section, key)) = root
            .keys()
            .filter(|s| rest.starts_with(&format!("{s}_")))
            .max_by_key(|s| s.len())
            .map(|s| (s.clone(), rest[s.len() + 1..].to_string()))
        else {
            continue;
        };
        let Some(Value::Object(fields)) = root.get_mut(&section) else {
            continue;
        };
        if !fields.contains_key(&key) {
            return Err(CliError::Config(format!("{name}: section `{section}` has no key `{key}`")));
        }
        let value = if section == "paths" {
            Value::String(raw)
        } else {
            parse_scalar(&raw)
        };
        fields.insert(key, value);
    }
    Ok(())
}

impl RunConfig {
    /// Reads `path` (or the defaults), then applies environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let base = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
                serde_json::from_str::<RunConfig>(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        let mut doc = serde_json::to_value(&base).expect("serializable config");
        apply_overrides(&mut doc, std::env::vars())?;
        let config: RunConfig =
            serde_json::from_value(doc).map_err(|e| CliError::Config(format!("environment override: {e}")))?;
        Ok(config)
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            seed: self.seed,
            ..self.sampler.clone()
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let mut problems = Vec::new();
        if self.model.profiles == 0 {
            problems.push("model.profiles must be at least 1".to_string());
        }
        if self.cv.h_grid.is_empty() {
            problems.push("cv.h_grid is empty".to_string());
        }
        if self.cv.folds < 2 {
            problems.push(format!("cv.folds must be at least 2, got {}", self.cv.folds));
        }
        if !(self.prediction.step > 0.0) {
            problems.push(format!("prediction.step must be positive, got {}", self.prediction.step));
        }
        if !(self.prediction.level > 0.0 && self.prediction.level < 1.0) {
            problems.push(format!("prediction.level must lie in (0, 1), got {}", self.prediction.level));
        }
        if self.simulation.rows_per_wave.is_empty() {
            problems.push("simulation.rows_per_wave is empty".to_string());
        }
        if let Err(e) = self.sampler().validate() {
            problems.push(e.to_string());
        }
        for (name, p) in [
            ("paths.input", &self.paths.input),
            ("paths.params", &self.paths.params),
            ("paths.draws", &self.paths.draws),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    problems.push(format!("{name}: {} does not exist", p.display()));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(problems.join("; ")))
        }
    }
}
