use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use latentwave::model::{ModelConfig, Parameters, ParametersDocument};
use serde_json::{json, Value};
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_latentwave"));
    c.env_clear();
    c
}

fn run(args: &[&str], config: &Path) -> Output {
    bin().args(args).arg("--config").arg(config).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn truth(h: usize, waves: usize) -> (ModelConfig, Parameters) {
    let cfg = ModelConfig {
        profiles: h,
        items: 4,
        categories: 3,
        covariates: 2,
        wave_times: (0..waves).map(|t| 7.0 * t as f64).collect(),
    };
    let mut p = Parameters::neutral(&cfg);
    for a in 0..h {
        for j in 0..4 {
            let top = 0.7 - 0.25 * a as f64;
            p.psi[[a, j, 2]] = top;
            p.psi[[a, j, 1]] = 0.2;
            p.psi[[a, j, 0]] = 0.8 - top;
        }
    }
    for a in 1..h {
        p.beta[[0, a]] = 0.5;
        for t in 0..waves {
            p.eta[[t, a]] = (t as f64 / 3.0).sin() * 0.5;
        }
        p.theta[[0, a]] = 1.0;
        p.theta[[1, a]] = 200.0;
        p.theta[[2, a]] = 0.05;
    }
    (cfg, p)
}

struct Scenario {
    dir: TempDir,
}

impl Scenario {
    fn new() -> Self {
        Scenario {
            dir: TempDir::new().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write_params(&self, h: usize, waves: usize) -> PathBuf {
        let (cfg, p) = truth(h, waves);
        let path = self.path("params.json");
        fs::write(&path, serde_json::to_string(&ParametersDocument::new(&cfg, &p)).unwrap()).unwrap();
        path
    }

    fn config(&self, name: &str, value: Value) -> PathBuf {
        let path = self.path(name);
        fs::write(&path, serde_json::to_string_pretty(&value).unwrap()).unwrap();
        path
    }

    /// Simulates a small dataset into `sim/` and returns its CSV path.
    fn simulated(&self, h: usize, waves: usize, per_wave: usize) -> PathBuf {
        let params = self.write_params(h, waves);
        let cfg = self.config(
            "sim.json",
            json!({
                "paths": {"params": params, "output": self.path("sim")},
                "simulation": {"rows_per_wave": [per_wave], "origin": "2020-04-02"},
                "seed": 5
            }),
        );
        let o = run(&["simulate"], &cfg);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        self.path("sim").join("data.csv")
    }
}

fn small_sampler() -> Value {
    json!({"n_warmup": 150, "n_draws": 60, "n_chains": 2})
}

#[test]
fn simulate_writes_expected_rows_deterministically() {
    let s = Scenario::new();
    let params = s.write_params(3, 10);
    let mk = |out: &str| {
        s.config(
            &format!("{out}.json"),
            json!({
                "paths": {"params": params, "output": s.path(out)},
                "simulation": {"rows_per_wave": [300]},
                "seed": 42
            }),
        )
    };
    let (a, b) = (mk("a"), mk("b"));
    assert_eq!(code(&run(&["simulate"], &a)), 0);
    assert_eq!(code(&run(&["simulate"], &b)), 0);
    let data = fs::read_to_string(s.path("a").join("data.csv")).unwrap();
    assert_eq!(data.lines().count(), 3001);
    for f in ["data.csv", "data.json", "latent.csv", "truth.json"] {
        assert_eq!(fs::read(s.path("a").join(f)).unwrap(), fs::read(s.path("b").join(f)).unwrap(), "{f}");
    }
    let manifest: Value = serde_json::from_str(&fs::read_to_string(s.path("a").join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 42);
    assert_eq!(manifest["config"]["simulation"]["rows_per_wave"], json!([300]));
}

#[test]
fn simulate_rejects_invalid_simplex_with_coordinates() {
    let s = Scenario::new();
    let params = s.write_params(2, 3);
    let mut doc: Value = serde_json::from_str(&fs::read_to_string(&params).unwrap()).unwrap();
    doc["psi"][1][2][0] = json!(0.9);
    fs::write(&params, doc.to_string()).unwrap();
    let cfg = s.config("c.json", json!({"paths": {"params": params, "output": s.path("o")}}));
    let o = run(&["simulate"], &cfg);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("psi[2,3,:]"), "{}", stderr(&o));
}

#[test]
fn missing_input_names_path() {
    let s = Scenario::new();
    let missing = s.path("nowhere.csv");
    let cfg = s.config("c.json", json!({"paths": {"input": missing, "output": s.path("o")}}));
    let o = run(&["fit"], &cfg);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nowhere.csv"));
}

#[test]
fn fit_predict_diagnose_summarize_pipeline() {
    let s = Scenario::new();
    let data = s.simulated(2, 4, 60);
    let fit_cfg = s.config(
        "fit.json",
        json!({
            "paths": {"input": data, "output": s.path("fit")},
            "model": {"profiles": 2},
            "sampler": small_sampler(),
            "seed": 3
        }),
    );
    let o = run(&["fit"], &fit_cfg);
    assert!(code(&o) == 0 || code(&o) == 1, "{}", stderr(&o));
    for f in ["draws/draws.json", "draws/draws_chain1.csv", "diagnostics.csv", "label_switch.json", "profiles.csv", "effects.csv", "manifest.json"] {
        assert!(s.path("fit").join(f).exists(), "{f}");
    }

    let draws = s.path("fit").join("draws");
    let predict_cfg = s.config(
        "pred.json",
        json!({"paths": {"input": data, "draws": draws, "output": s.path("pred")}}),
    );
    assert_eq!(code(&run(&["predict"], &predict_cfg)), 0);
    let traj = fs::read_to_string(s.path("pred").join("trajectories.csv")).unwrap();
    // waves at days 0..21: 22 grid days for each of 2 profiles
    assert_eq!(traj.lines().count(), 1 + 2 * 22);
    assert!(traj.lines().nth(1).unwrap().starts_with("2020-04-02,1,"));

    let single = s.config(
        "single.json",
        json!({"paths": {"input": data, "draws": draws, "output": s.path("single")},
               "prediction": {"start": 3.0, "end": 3.0}}),
    );
    assert_eq!(code(&run(&["predict"], &single)), 0);
    let traj = fs::read_to_string(s.path("single").join("trajectories.csv")).unwrap();
    assert_eq!(traj.lines().count(), 1 + 2);

    let beyond = s.config(
        "beyond.json",
        json!({"paths": {"input": data, "draws": draws, "output": s.path("beyond")},
               "prediction": {"end": 60.0}}),
    );
    let o = run(&["predict"], &beyond);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("outside the prediction window"));

    let diag = s.config("diag.json", json!({"paths": {"draws": draws, "output": s.path("diag")}}));
    let o = run(&["diagnose"], &diag);
    assert!(code(&o) == 0 || code(&o) == 1);
    assert!(s.path("diag").join("diagnostics.csv").exists());

    let summ = s.config("summ.json", json!({"paths": {"input": data, "draws": draws, "output": s.path("summ")}}));
    assert_eq!(code(&run(&["summarize"], &summ)), 0);
    let profiles = fs::read_to_string(s.path("summ").join("profiles.csv")).unwrap();
    assert!(profiles.starts_with("item,category,profile_1,"));
}

#[test]
fn predict_rejects_dimension_mismatch() {
    let s = Scenario::new();
    let data = s.simulated(2, 4, 40);
    let fit_cfg = s.config(
        "fit.json",
        json!({"paths": {"input": data, "output": s.path("fit")}, "model": {"profiles": 2}, "sampler": small_sampler()}),
    );
    run(&["fit"], &fit_cfg);
    let other = {
        let (cfg, p) = truth(2, 5);
        let path = s.path("p5.json");
        fs::write(&path, serde_json::to_string(&ParametersDocument::new(&cfg, &p)).unwrap()).unwrap();
        let c = s.config("sim5.json", json!({"paths": {"params": path, "output": s.path("sim5")}, "simulation": {"rows_per_wave": [20]}}));
        run(&["simulate"], &c);
        s.path("sim5").join("data.csv")
    };
    let cfg = s.config(
        "p.json",
        json!({"paths": {"input": other, "draws": s.path("fit").join("draws"), "output": s.path("p")}}),
    );
    let o = run(&["predict"], &cfg);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("eta"), "{}", stderr(&o));
}

#[test]
fn two_draw_fit_warns_about_ess() {
    let s = Scenario::new();
    let data = s.simulated(2, 3, 30);
    let cfg = s.config(
        "fit.json",
        json!({"paths": {"input": data, "output": s.path("fit")}, "model": {"profiles": 2},
               "sampler": {"n_warmup": 100, "n_draws": 2, "n_chains": 2}}),
    );
    let o = run(&["fit"], &cfg);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(s.path("fit").join("manifest.json")).unwrap()).unwrap();
    let warnings = manifest["results"]["warnings"].as_array().unwrap();
    assert!(warnings.iter().any(|w| w.as_str().unwrap().contains("effective sample size")));
}

#[test]
fn cv_is_reproducible_and_validates_grid() {
    let s = Scenario::new();
    let data = s.simulated(2, 3, 24);
    let mk = |name: &str, grid: Value| {
        s.config(
            &format!("{name}.json"),
            json!({"paths": {"input": data, "output": s.path(name)},
                   "sampler": {"n_chains": 1},
                   "cv": {"h_grid": grid, "folds": 2, "n_warmup": 100, "n_draws": 20},
                   "seed": 8}),
        )
    };
    let a = mk("cv_a", json!([1, 2]));
    let b = mk("cv_b", json!([1, 2]));
    assert_eq!(code(&run(&["cv"], &a)), 0);
    assert_eq!(code(&run(&["cv"], &b)), 0);
    for f in ["accuracy.csv", "accuracy_full.csv", "cv.json"] {
        assert_eq!(fs::read(s.path("cv_a").join(f)).unwrap(), fs::read(s.path("cv_b").join(f)).unwrap());
    }
    let display = fs::read_to_string(s.path("cv_a").join("accuracy.csv")).unwrap();
    assert!(display.starts_with("item,H=1,H=2"));

    let empty = mk("cv_e", json!([]));
    let o = run(&["cv"], &empty);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("h_grid"));
}

#[test]
fn refuses_non_empty_output_without_force() {
    let s = Scenario::new();
    let params = s.write_params(2, 3);
    let out = s.path("o");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join("keep.txt"), "x").unwrap();
    let cfg = s.config("c.json", json!({"paths": {"params": params}, "simulation": {"rows_per_wave": [10]}}));
    let o = bin().args(["simulate", "--out"]).arg(&out).arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--force"));
    let o = bin()
        .args(["simulate", "--force", "--seed", "4", "--threads", "1", "--out"])
        .arg(&out)
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("keep.txt").exists());
}

#[test]
fn environment_overrides_config() {
    let s = Scenario::new();
    let params = s.write_params(2, 3);
    let cfg = s.config("c.json", json!({"paths": {"params": params, "output": s.path("o")}}));
    let o = bin()
        .arg("simulate")
        .arg("--config")
        .arg(&cfg)
        .env("LATENTWAVE_SIMULATION_ROWS_PER_WAVE", "[7]")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let data = fs::read_to_string(s.path("o").join("data.csv")).unwrap();
    assert_eq!(data.lines().count(), 1 + 3 * 7);
}
