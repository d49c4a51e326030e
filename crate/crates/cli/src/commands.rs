use std::fs::{self, File};
use std::path::{Path, PathBuf};

use latentwave::crossval::{run_cv, AccuracyTable, CvOptions};
use latentwave::data::{
    load_csv, read_canonical, simulate, write_canonical, CovariateDistribution, IndependentCovariates, Schema,
    SurveyDataset,
};
use latentwave::fit::{fit, FitOptions};
use latentwave::inference::{
    covariate_effects, population_proportions, profile_summaries, write_covariate_effects,
};
use latentwave::model::ParametersDocument;
use latentwave::sampler::{
    label_switch_diagnostic, read_draws, write_draws, DiagnosticsTable, LabelSwitchReport, PosteriorDraws,
    SamplerConfig,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{InputFormat, RunConfig};
use crate::{CliError, Command};

/// R̂ above which `fit` and `diagnose` exit with status 1.
pub const RHAT_LIMIT: f64 = 1.05;
/// Minimum ESS below which a warning is recorded.
pub const LOW_ESS: f64 = 100.0;

pub fn dispatch(command: Command, config: &RunConfig, force: bool) -> Result<u8, CliError> {
    let out = prepare_output(config, force)?;
    let (code, details) = match command {
        Command::Simulate => cmd_simulate(config, &out)?,
        Command::Fit => cmd_fit(config, &out)?,
        Command::Predict => cmd_predict(config, &out)?,
        Command::Cv => cmd_cv(config, &out)?,
        Command::Diagnose => cmd_diagnose(config, &out)?,
        Command::Summarize => cmd_summarize(config, &out)?,
    };
    write_json(
        &out.join("manifest.json"),
        &json!({
            "command": command.name(),
            "version": env!("CARGO_PKG_VERSION"),
            "seed": config.seed,
            "config": config,
            "exit_code": code,
            "results": details,
        }),
    )?;
    Ok(code)
}

fn prepare_output(config: &RunConfig, force: bool) -> Result<PathBuf, CliError> {
    let out = config
        .paths
        .output
        .clone()
        .ok_or_else(|| CliError::Config("no output directory: set paths.output or pass --out".into()))?;
    if out.exists() {
        let occupied = fs::read_dir(&out)
            .map_err(|e| CliError::Input(format!("{}: {e}", out.display())))?
            .next()
            .is_some();
        if occupied && !force {
            return Err(CliError::Config(format!(
                "output directory {} is not empty; pass --force to write into it",
                out.display()
            )));
        }
    }
    fs::create_dir_all(&out).map_err(|e| CliError::Input(format!("{}: {e}", out.display())))?;
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let f = File::create(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    serde_json::to_writer_pretty(f, value).map_err(latentwave::Error::from)?;
    Ok(())
}

fn require<'a>(path: &'a Option<PathBuf>, name: &str) -> Result<&'a Path, CliError> {
    path.as_deref()
        .ok_or_else(|| CliError::Config(format!("{name} is required for this command")))
}

fn load_dataset(config: &RunConfig) -> Result<SurveyDataset, CliError> {
    let input = require(&config.paths.input, "paths.input")?;
    if !input.exists() {
        return Err(CliError::Input(format!("{} does not exist", input.display())));
    }
    let dataset = match config.data.format {
        InputFormat::Canonical => read_canonical(input)?,
        InputFormat::Survey => {
            let schema = config.data.schema.clone().unwrap_or_else(Schema::italy_tracker);
            load_csv(input, &schema)?
        }
    };
    dataset.validate()?;
    Ok(dataset)
}

fn load_draws(config: &RunConfig) -> Result<PosteriorDraws, CliError> {
    let dir = require(&config.paths.draws, "paths.draws")?;
    Ok(read_draws(dir)?)
}

/// Checks that stored draws belong to a model of `dataset`'s shape.
fn check_compatible(draws: &PosteriorDraws, dataset: &SurveyDataset) -> Result<(), CliError> {
    let want = dataset.model_config(draws.config.profiles);
    let have = &draws.config;
    let mut blocks = Vec::new();
    if have.items != want.items || have.categories != want.categories {
        blocks.push(format!(
            "psi ({} items x {} categories vs {} x {})",
            have.items, have.categories, want.items, want.categories
        ));
    }
    if have.covariates != want.covariates {
        blocks.push(format!("beta ({} covariates vs {})", have.covariates, want.covariates));
    }
    if have.wave_times != want.wave_times {
        blocks.push(format!("eta ({} waves vs {})", have.waves(), want.waves()));
    }
    if blocks.is_empty() {
        Ok(())
    } else {
        Err(CliError::Model(latentwave::Error::Dimension(format!(
            "draws do not match the dataset in {}",
            blocks.join(", ")
        ))))
    }
}

fn cmd_simulate(config: &RunConfig, out: &Path) -> Result<(u8, Value), CliError> {
    let params_path = require(&config.paths.params, "paths.params")?;
    let text = fs::read_to_string(params_path)
        .map_err(|e| CliError::Input(format!("{}: {e}", params_path.display())))?;
    let doc: ParametersDocument = serde_json::from_str(&text)
        .map_err(|e| CliError::Input(format!("{}: {e}", params_path.display())))?;
    let (model, params) = doc.into_parameters()?;
    let sim = &config.simulation;
    let sizes = match sim.rows_per_wave.len() {
        1 => vec![sim.rows_per_wave[0]; model.waves()],
        n if n == model.waves() => sim.rows_per_wave.clone(),
        n => {
            return Err(CliError::Config(format!(
                "simulation.rows_per_wave has {n} entries for {} waves",
                model.waves()
            )))
        }
    };
    let laws = if sim.covariates.is_empty() {
        vec![CovariateDistribution::Normal { mean: 0.0, sd: 1.0 }; model.covariates]
    } else if sim.covariates.len() == model.covariates {
        sim.covariates.clone()
    } else {
        return Err(CliError::Config(format!(
            "simulation.covariates has {} entries for {} covariates",
            sim.covariates.len(),
            model.covariates
        )));
    };
    let result = simulate(&params, &model, &mut IndependentCovariates(laws), &sizes, config.seed)?;
    let mut dataset = result.dataset;
    dataset.origin = sim.origin;
    write_canonical(&dataset, &out.join("data.csv"))?;
    write_json(&out.join("truth.json"), &ParametersDocument::new(&model, &params))?;
    let latent_path = out.join("latent.csv");
    let mut w = csv::Writer::from_path(&latent_path).map_err(latentwave::Error::from)?;
    w.write_record(["row", "wave", "profile"]).map_err(latentwave::Error::from)?;
    for (i, z) in result.latent.iter().enumerate() {
        w.write_record([(i + 1).to_string(), (dataset.wave_of_row[i] + 1).to_string(), (z + 1).to_string()])
            .map_err(latentwave::Error::from)?;
    }
    w.flush().map_err(|e| CliError::Input(format!("{}: {e}", latent_path.display())))?;
    Ok((0, json!({ "rows": dataset.rows(), "waves": dataset.waves() })))
}

/// Writes diagnostics files; returns the worst R̂, the label-switch reports
/// and any warnings.
fn write_diagnostics(
    draws: &PosteriorDraws,
    out: &Path,
) -> Result<(f64, f64, Vec<LabelSwitchReport>, Vec<String>), CliError> {
    let table = DiagnosticsTable::compute(draws);
    table.write_csv(&out.join("diagnostics.csv"))?;
    let reports = label_switch_diagnostic(draws);
    write_json(&out.join("label_switch.json"), &reports)?;
    let (max_rhat, min_ess) = (table.max_rhat(), table.min_ess());
    let mut warnings = draws.warnings.clone();
    if min_ess < LOW_ESS {
        warnings.push(format!("minimum effective sample size {min_ess:.1} is below {LOW_ESS}"));
    }
    if max_rhat > RHAT_LIMIT {
        warnings.push(format!("maximum split R-hat {max_rhat:.4} exceeds {RHAT_LIMIT}"));
    }
    if let Some(r) = reports.iter().find(|r| r.switch_fraction > 0.0) {
        warnings.push(format!(
            "chain {} changes profile ranking in {:.1}% of draws",
            r.chain + 1,
            100.0 * r.switch_fraction
        ));
    }
    Ok((max_rhat, min_ess, reports, warnings))
}

fn write_summaries(draws: &PosteriorDraws, dataset: Option<&SurveyDataset>, out: &Path, level: f64) -> Result<(), CliError> {
    let items: Vec<String> = match dataset {
        Some(d) => d.item_labels.clone(),
        None => (1..=draws.config.items).map(|j| format!("item{j}")).collect(),
    };
    let covariates: Vec<String> = match dataset {
        Some(d) => d.covariate_labels.clone(),
        None => (1..=draws.config.covariates).map(|k| format!("x{k}")).collect(),
    };
    profile_summaries(draws, level)?.write_csv(&out.join("profiles.csv"), &items)?;
    write_covariate_effects(&out.join("effects.csv"), &covariate_effects(draws, level)?, &covariates)?;
    Ok(())
}

fn diagnostics_exit(max_rhat: f64) -> u8 {
    u8::from(max_rhat > RHAT_LIMIT)
}

fn cmd_fit(config: &RunConfig, out: &Path) -> Result<(u8, Value), CliError> {
    let dataset = load_dataset(config)?;
    let options = FitOptions {
        profiles: config.model.profiles,
        sampler: config.sampler(),
        init: config.init,
    };
    let draws = fit(&dataset, &options)?;
    let draws_dir = out.join("draws");
    fs::create_dir_all(&draws_dir).map_err(|e| CliError::Input(format!("{}: {e}", draws_dir.display())))?;
    write_draws(&draws_dir, &draws)?;
    let (max_rhat, min_ess, reports, warnings) = write_diagnostics(&draws, out)?;
    write_summaries(&draws, Some(&dataset), out, config.prediction.level)?;
    let code = diagnostics_exit(max_rhat);
    Ok((
        code,
        json!({
            "rows": dataset.rows(),
            "dropped": dataset.drops,
            "draws": draws.len(),
            "divergences": draws.divergences(),
            "max_rhat": max_rhat,
            "min_ess": min_ess,
            "label_switching": reports,
            "warnings": warnings,
        }),
    ))
}

fn prediction_grid(config: &RunConfig, dataset: &SurveyDataset) -> Result<Vec<f64>, CliError> {
    let p = &config.prediction;
    let times = &dataset.wave_times;
    let start = p.start.unwrap_or(times[0].floor());
    let end = p.end.unwrap_or(times[times.len() - 1].ceil());
    if !(start <= end) {
        return Err(CliError::Config(format!("prediction grid start {start} exceeds end {end}")));
    }
    let steps = ((end - start) / p.step + 1e-9).floor() as usize;
    Ok((0..=steps).map(|s| start + s as f64 * p.step).collect())
}

fn cmd_predict(config: &RunConfig, out: &Path) -> Result<(u8, Value), CliError> {
    let dataset = load_dataset(config)?;
    let draws = load_draws(config)?;
    check_compatible(&draws, &dataset)?;
    let grid = prediction_grid(config, &dataset)?;
    let traj = population_proportions(
        &draws,
        &dataset,
        &grid,
        config.prediction.level,
        config.prediction.allow_extrapolation,
    )?;
    traj.write_csv(&out.join("trajectories.csv"), &dataset)?;
    Ok((
        0,
        json!({
            "grid_points": grid.len(),
            "first": dataset.date_of(grid[0]).map(|d| d.to_string()),
            "last": dataset.date_of(grid[grid.len() - 1]).map(|d| d.to_string()),
        }),
    ))
}

fn cmd_cv(config: &RunConfig, out: &Path) -> Result<(u8, Value), CliError> {
    let dataset = load_dataset(config)?;
    let options = CvOptions {
        h_grid: config.cv.h_grid.clone(),
        folds: config.cv.folds,
        sampler: SamplerConfig {
            n_warmup: config.cv.n_warmup,
            n_draws: config.cv.n_draws,
            ..config.sampler()
        },
        init: config.init,
        seed: config.seed,
    };
    let table: AccuracyTable = run_cv(&dataset, &options)?;
    table.write_csv(&out.join("accuracy.csv"), true)?;
    table.write_csv(&out.join("accuracy_full.csv"), false)?;
    write_json(&out.join("cv.json"), &table)?;
    Ok((
        0,
        json!({
            "selected_profiles": table.selected,
            "selection_rule": format!(
                "smallest H after which no item gains at least {} in accuracy",
                table.threshold
            ),
            "failures": table.failures,
        }),
    ))
}

fn cmd_diagnose(config: &RunConfig, out: &Path) -> Result<(u8, Value), CliError> {
    let draws = load_draws(config)?;
    let (max_rhat, min_ess, reports, warnings) = write_diagnostics(&draws, out)?;
    Ok((
        diagnostics_exit(max_rhat),
        json!({
            "draws": draws.len(),
            "max_rhat": max_rhat,
            "min_ess": min_ess,
            "label_switching": reports,
            "warnings": warnings,
        }),
    ))
}

fn cmd_summarize(config: &RunConfig, out: &Path) -> Result<(u8, Value), CliError> {
    let draws = load_draws(config)?;
    let dataset = match &config.paths.input {
        Some(_) => {
            let d = load_dataset(config)?;
            check_compatible(&draws, &d)?;
            Some(d)
        }
        None => None,
    };
    write_summaries(&draws, dataset.as_ref(), out, config.prediction.level)?;
    Ok((0, json!({ "draws": draws.len() })))
}
