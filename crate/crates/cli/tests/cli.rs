//! End-to-end behaviour of the experiment runner: config validation, file
//! round-trips, determinism, metrics and process exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use hybrid_vi::simulate::{mix_seed, rng_from_seed};
use hybrid_vi::smoother::{propagate, VariationalMarginals};
use hybrid_vi_cli::config::ExperimentConfig;
use hybrid_vi_cli::io::{read_controls, read_marginals, read_observations, write_marginals};
use hybrid_vi_cli::metrics::{coverage, mode_accuracy, rmse};
use hybrid_vi_cli::run::{load_fit, CONTROLS, INITIAL, MARGINALS};
use hybrid_vi_cli::{run_eval, run_fit, run_oracle, run_sample_posterior, run_simulate, ConfigError, RunReport};
use rand_distr::{Distribution, StandardNormal};
use tempfile::TempDir;

fn models_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join("models")
}

fn ou_config(horizon: f64, extra: &str) -> String {
    format!(
        r#"
name = "ou_small"
seed = 4
modes = 1

[grid]
horizon = {horizon}
step = 0.01

[simulate]
model = "{}"
observations = {{ design = "regular", gap = 0.5 }}

[fit]
method = "smooth"
{extra}
"#,
        models_dir().join("ou_1d.toml").display()
    )
}

fn two_mode_config() -> String {
    format!(
        r#"
name = "two_mode_small"
seed = 2
modes = 2

[grid]
horizon = 3.0
step = 0.01

[simulate]
model = "{}"
observations = {{ design = "regular", gap = 0.3 }}

[fit]
method = "smooth"

[posterior]
samples = 20
stride = 5
"#,
        models_dir().join("two_mode_1d.toml").display()
    )
}

fn parse(src: &str, dir: &Path) -> anyhow::Result<ExperimentConfig> {
    ExperimentConfig::from_str_in(src, dir.to_path_buf())
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| c.downcast_ref::<ConfigError>().is_some())
}

fn write_config(dir: &Path, name: &str, src: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, src).unwrap();
    p
}

fn cli() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hybrid-vi"));
    c.env_remove("HYBRID_VI_SEED").stdout(Stdio::null()).stderr(Stdio::null());
    c
}

#[test]
fn config_needs_exactly_one_observation_source() {
    let dir = TempDir::new().unwrap();
    let obs = dir.path().join("obs.csv");
    std::fs::write(&obs, "t,x_1\n0.5,1.0\n").unwrap();

    let both = format!("{}\n[data]\nobservations = \"obs.csv\"\n", ou_config(2.0, ""));
    let e = parse(&both, dir.path()).unwrap_err();
    assert!(is_config_error(&e) && e.to_string().contains("not both"), "{e:#}");

    let neither = "name = \"x\"\nmodes = 1\n[grid]\nhorizon = 1.0\nstep = 0.1\n";
    assert!(is_config_error(&parse(neither, dir.path()).unwrap_err()));

    let data_only = "name = \"x\"\nmodes = 1\n[grid]\nhorizon = 1.0\nstep = 0.1\n[data]\nobservations = \"obs.csv\"\n";
    assert!(parse(data_only, dir.path()).is_ok());
}

#[test]
fn config_rejects_missing_files_and_unknown_keys() {
    let dir = TempDir::new().unwrap();
    let missing = "name = \"x\"\nmodes = 1\n[grid]\nhorizon = 1.0\nstep = 0.1\n[data]\nobservations = \"nope.csv\"\n";
    let e = parse(missing, dir.path()).unwrap_err();
    assert!(is_config_error(&e) && e.to_string().contains("does not exist"), "{e:#}");

    let typo = ou_config(2.0, "tol_innner = 1e-6");
    assert!(is_config_error(&parse(&typo, dir.path()).unwrap_err()));

    let bad_grid = ou_config(2.0, "").replace("step = 0.01", "step = -1.0");
    assert!(is_config_error(&parse(&bad_grid, dir.path()).unwrap_err()));
}

#[test]
fn fit_without_observations_fails() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("obs.csv"), "t,x_1\n").unwrap();
    let src = format!(
        "name = \"empty\"\nmodes = 1\n[grid]\nhorizon = 1.0\nstep = 0.1\n[data]\nobservations = \"obs.csv\"\n[fit]\nmethod = \"smooth\"\nmodel = \"{}\"\n",
        models_dir().join("ou_1d.toml").display()
    );
    let cfg = parse(&src, dir.path()).unwrap();
    let e = run_fit(&cfg, &dir.path().join("out")).unwrap_err();
    assert!(e.to_string().contains("no observations"), "{e:#}");
}

#[test]
fn reruns_are_identical_up_to_wall_clock() {
    let dir = TempDir::new().unwrap();
    let cfg = parse(&two_mode_config(), dir.path()).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ra = run_fit(&cfg, &a).unwrap();
    let rb = run_fit(&cfg, &b).unwrap();
    assert!(ra.same_run(&rb));
    for f in [MARGINALS, CONTROLS, INITIAL, "observations.csv", "trajectory.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn reports_round_trip_through_json() {
    let dir = TempDir::new().unwrap();
    let cfg = parse(&two_mode_config(), dir.path()).unwrap();
    let out = dir.path().join("out");
    let report = run_fit(&cfg, &out).unwrap();
    assert_eq!(RunReport::from_json(&report.to_json().unwrap()).unwrap(), report);
    assert_eq!(RunReport::load(&out.join("fit_report.json")).unwrap(), report);
    assert!(report.model.is_some());
    assert_eq!(report.metrics["observations"], 10.0);
}

#[test]
fn marginals_and_controls_round_trip_through_csv() {
    let dir = TempDir::new().unwrap();
    let cfg = parse(&two_mode_config(), dir.path()).unwrap();
    let out = dir.path().join("out");
    run_fit(&cfg, &out).unwrap();
    let (model, times, marg) = load_fit(&out).unwrap();

    let copy = dir.path().join("copy.csv");
    write_marginals(&copy, &times, &marg).unwrap();
    assert_eq!(std::fs::read(&copy).unwrap(), std::fs::read(out.join(MARGINALS)).unwrap());
    let (times2, marg2) = read_marginals(&copy).unwrap();
    assert_eq!((times2, marg2), (times, marg.clone()));

    // the stored controls reproduce the stored marginals bit for bit
    let controls = read_controls(&out.join(CONTROLS), &out.join(INITIAL)).unwrap();
    let repropagated = propagate(&controls, &model, &cfg.grid()).unwrap();
    assert_eq!(repropagated, marg);
}

#[test]
fn simulate_writes_artifacts_and_honours_the_seed() {
    let dir = TempDir::new().unwrap();
    let mut cfg = parse(&two_mode_config(), dir.path()).unwrap();
    let out = dir.path().join("sim");
    let report = run_simulate(&cfg, &out).unwrap();
    for f in ["trajectory.csv", "observations.csv", "jumps.csv", "metadata.json", "simulate_report.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let obs = read_observations(&out.join("observations.csv")).unwrap();
    assert_eq!(obs.len() as f64, report.metrics["observations"]);

    cfg.seed += 1;
    run_simulate(&cfg, &dir.path().join("sim2")).unwrap();
    let other = read_observations(&dir.path().join("sim2").join("observations.csv")).unwrap();
    assert_eq!(other.times(), obs.times());
    assert_ne!(other.values(), obs.values());
}

#[test]
fn oracle_rejects_a_different_horizon() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    run_fit(&parse(&ou_config(2.0, ""), dir.path()).unwrap(), &out).unwrap();
    let longer = parse(&ou_config(3.0, ""), dir.path()).unwrap();
    let e = run_oracle(&longer, &out).unwrap_err();
    assert!(e.to_string().contains("grid mismatch"), "{e:#}");
}

#[test]
fn oracle_matches_the_kalman_smoother_for_one_mode() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let cfg = parse(&ou_config(2.0, "tol_inner = 1e-10"), dir.path()).unwrap();
    run_fit(&cfg, &out).unwrap();
    let r = run_oracle(&cfg, &out).unwrap();
    assert!(r.metrics["kalman_mean_gap"] < 1e-3, "{:?}", r.metrics);
    assert!(r.metrics["kalman_cov_gap"] < 1e-3, "{:?}", r.metrics);
    assert!(r.metrics["grid_mean_gap"] < 1e-2, "{:?}", r.metrics);
    assert!(out.join("density.csv").exists() && out.join("comparison.json").exists());
}

#[test]
fn oracle_refuses_two_dimensional_models() {
    let dir = TempDir::new().unwrap();
    let src = format!(
        r#"
name = "cr_small"
modes = 2
[grid]
horizon = 0.5
step = 0.01
[simulate]
model = "{}"
observations = {{ design = "regular", gap = 0.1 }}
[fit]
method = "smooth"
max_inner = 3
"#,
        models_dir().join("counter_rotating_2d.toml").display()
    );
    let cfg = parse(&src, dir.path()).unwrap();
    let out = dir.path().join("out");
    run_fit(&cfg, &out).unwrap();
    let e = run_oracle(&cfg, &out).unwrap_err();
    assert!(e.to_string().contains("oracle supports 1D only"), "{e:#}");
}

#[test]
fn eval_and_sample_posterior_after_fit() {
    let dir = TempDir::new().unwrap();
    let cfg = parse(&two_mode_config(), dir.path()).unwrap();
    let out = dir.path().join("out");
    let fit = run_fit(&cfg, &out).unwrap();
    let eval = run_eval(&cfg, &out).unwrap();
    for m in ["mode_accuracy", "state_rmse", "coverage_95", "observation_rmse"] {
        assert_eq!(eval.metrics[m], fit.metrics[m], "{m}");
    }
    assert!(out.join("metrics.csv").exists());

    let samples = run_sample_posterior(&cfg, &out).unwrap();
    assert_eq!(samples.metrics["samples"], 20.0);
    let text = std::fs::read_to_string(out.join("posterior_samples.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 20 * 61);
}

#[test]
fn eval_without_truth_keeps_data_metrics() {
    let dir = TempDir::new().unwrap();
    let sim = dir.path().join("sim");
    run_simulate(&parse(&two_mode_config(), dir.path()).unwrap(), &sim).unwrap();
    let src = format!(
        "name = \"data\"\nmodes = 2\n[grid]\nhorizon = 3.0\nstep = 0.01\n[data]\nobservations = \"sim/observations.csv\"\n[fit]\nmethod = \"smooth\"\nmodel = \"{}\"\n",
        models_dir().join("two_mode_1d.toml").display()
    );
    let cfg = parse(&src, dir.path()).unwrap();
    let out = dir.path().join("out");
    run_fit(&cfg, &out).unwrap();
    let r = run_eval(&cfg, &out).unwrap();
    assert!(r.metrics.contains_key("observation_rmse"));
    assert!(!r.metrics.contains_key("mode_accuracy"));
    assert!(r.notes.iter().any(|n| n.contains("no ground truth")));
}

#[test]
fn metric_baselines() {
    let truth: Vec<usize> = (0..100).map(|i| i % 2).collect();
    assert_eq!(mode_accuracy(&truth, &truth), 1.0);
    assert_eq!(mode_accuracy(&vec![0; 100], &truth), 0.5);
    let ys: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64 * 0.1]).collect();
    assert_eq!(rmse(&ys, &ys), 0.0);
}

#[test]
fn coverage_of_a_calibrated_gaussian() {
    let nodes = 1000;
    let mut rng = rng_from_seed(mix_seed(9, 1));
    let truth: Vec<Vec<f64>> = (0..nodes)
        .map(|_| vec![StandardNormal.sample(&mut rng)])
        .collect();
    let marg = VariationalMarginals {
        modes: 1,
        dim: 1,
        nodes,
        q: vec![1.0; nodes],
        mu: vec![0.0; nodes],
        sigma: vec![1.0; nodes],
    };
    let c = coverage(&marg, &truth, 0.95);
    assert!((c - 0.95).abs() < 0.02, "coverage {c}");
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let bad = write_config(dir.path(), "bad.toml", "name = \"bad\"\nmodes = 0\n");
    let status = cli().args(["fit", "--config"]).arg(&bad).status().unwrap();
    assert_eq!(status.code(), Some(3));

    let good = write_config(dir.path(), "good.toml", &ou_config(2.0, ""));
    let out = dir.path().join("out");
    let status = cli().args(["simulate", "--config"]).arg(&good).arg("--out").arg(&out).status().unwrap();
    assert_eq!(status.code(), Some(0));
    let status = cli().args(["fit", "--config"]).arg(&good).arg("--out").arg(&out).status().unwrap();
    assert_eq!(status.code(), Some(0));

    let capped = write_config(dir.path(), "capped.toml", &two_mode_config().replace("method = \"smooth\"", "method = \"smooth\"\nmax_inner = 1"));
    let status = cli().args(["fit", "--config"]).arg(&capped).arg("--out").arg(dir.path().join("capped")).status().unwrap();
    assert_eq!(status.code(), Some(2));

    let status = cli().args(["oracle", "--config"]).arg(&good).arg("--out").arg(dir.path().join("nothing")).status().unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn seed_flag_overrides_the_environment() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "ou.toml", &ou_config(2.0, ""));
    let run = |env: Option<&str>, flag: Option<&str>, name: &str| {
        let out = dir.path().join(name);
        let mut c = cli();
        c.args(["simulate", "--config"]).arg(&cfg).arg("--out").arg(&out);
        if let Some(e) = env {
            c.env("HYBRID_VI_SEED", e);
        }
        if let Some(f) = flag {
            c.args(["--seed", f]);
        }
        assert!(c.status().unwrap().success());
        std::fs::read(out.join("observations.csv")).unwrap()
    };
    let env7 = run(Some("7"), None, "env7");
    let flag7 = run(None, Some("7"), "flag7");
    let both = run(Some("8"), Some("7"), "both");
    let env8 = run(Some("8"), None, "env8");
    assert_eq!(env7, flag7);
    assert_eq!(both, flag7);
    assert_ne!(env8, flag7);
}

#[test]
fn several_seeds_fan_out_into_subdirectories() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "ou.toml", &ou_config(2.0, ""));
    let out = dir.path().join("runs");
    let status = cli()
        .args(["simulate", "--config"])
        .arg(&cfg)
        .args(["--seed", "1,2", "--jobs", "2", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    for s in [1, 2] {
        assert!(out.join("ou").join(format!("seed-{s}")).join("observations.csv").exists());
    }
}
