//! The subcommands as library functions: each reads its config, writes its
//! artifacts under the output directory and returns a [`RunReport`].

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use hybrid_vi::learn::{init_kmeans, vem_from, VemResult};
use hybrid_vi::model::snap_observations;
use hybrid_vi::modelfile::{parse_model, write_model};
use hybrid_vi::oracle::{
    compare_marginals, gaussian_smoother_1mode, gfpe_smoother, stable_substeps, MarginalSummary, YGrid,
};
use hybrid_vi::simulate::{
    mix_seed, observe, regular_observation_times, sample_hybrid, sample_nonlinear_sde, sample_observation_times,
    thin_to_grid, JumpPath, StatePath,
};
use hybrid_vi::smoother::{map_path, sample_posterior, smooth, SmoothResult, VariationalMarginals};
use hybrid_vi::stats::mean_se;
use hybrid_vi::{HybridModel, ObservationSet, TimeGrid};
use serde::{Deserialize, Serialize};

use crate::config::{model_fingerprint, ConfigError, ExperimentConfig, FitMethod, ObservationDesign, Truth};
use crate::io::{self, Table, Trajectory};
use crate::metrics::{coverage, mode_accuracy, occupied_modes, rmse};
use crate::report::{parameter_table, RunReport};

/// A mode is counted as occupied when it is the MAP mode on at least this
/// fraction of grid nodes.
pub const OCCUPIED_FRACTION: f64 = 0.01;

pub const TRAJECTORY: &str = "trajectory.csv";
pub const OBSERVATIONS: &str = "observations.csv";
pub const JUMPS: &str = "jumps.csv";
pub const MARGINALS: &str = "marginals.csv";
pub const CONTROLS: &str = "controls.csv";
pub const INITIAL: &str = "initial.csv";
pub const FIT_MODEL: &str = "fit_model.toml";

/// Observations plus whatever ground truth is known about them.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub obs: ObservationSet,
    pub truth: Option<Trajectory>,
    pub truth_model: Option<HybridModel>,
    pub jumps: Option<JumpPath>,
}

fn observation_times(cfg: &ExperimentConfig, grid: &TimeGrid) -> Vec<f64> {
    let s = cfg.simulate.as_ref().expect("simulated dataset");
    let times = match s.observations {
        ObservationDesign::Poisson { mean_gap } => {
            sample_observation_times(1.0 / mean_gap, grid.horizon(), mix_seed(cfg.seed, 10))
        }
        ObservationDesign::Regular { gap } => regular_observation_times(gap, grid.horizon()),
    };
    thin_to_grid(&times, grid)
}

/// Generates the ground truth and observations of a `[simulate]` config.
pub fn generate(cfg: &ExperimentConfig) -> Result<Dataset> {
    let spec = cfg.simulate.as_ref().ok_or_else(|| anyhow!("config has no [simulate] section"))?;
    let truth = cfg.truth()?.expect("simulate section present");
    let grid = cfg.grid();
    let (modes, path, jumps, truth_model): (Vec<usize>, StatePath, Option<JumpPath>, Option<HybridModel>) = match &truth {
        Truth::Hybrid(model) => {
            let (jumps, path) = sample_hybrid(model, &grid, spec.substeps, cfg.seed)?;
            (jumps.on_grid(&grid), path, Some(jumps), Some(model.clone()))
        }
        Truth::Potential {
            potential,
            dispersion,
            y0,
            ..
        } => {
            let fine = TimeGrid::from_intervals(grid.horizon(), grid.intervals() * spec.substeps)?;
            let path = sample_nonlinear_sde(*potential, dispersion, y0, &fine, mix_seed(cfg.seed, 2))?
                .subsample(spec.substeps);
            let wells = potential.wells();
            let modes = path.values.iter().map(|y| potential.basin(&wells, y)).collect();
            (modes, path, None, None)
        }
    };
    let times = observation_times(cfg, &grid);
    let obs = observe(&path, &grid, &times, truth.obs_cov(), mix_seed(cfg.seed, 11))?;
    Ok(Dataset {
        obs,
        truth: Some(Trajectory {
            times: grid.times(),
            modes,
            states: path.values,
        }),
        truth_model,
        jumps,
    })
}

/// Simulated data, or the `[data]` files.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    if cfg.simulate.is_some() {
        return generate(cfg);
    }
    let d = cfg.data.as_ref().expect("validated");
    let obs = io::read_observations(&cfg.resolve(&d.observations))?;
    let truth = d.truth.as_ref().map(|p| io::read_trajectory(&cfg.resolve(p))).transpose()?;
    Ok(Dataset {
        obs,
        truth,
        truth_model: None,
        jumps: None,
    })
}

fn prepare_output(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))
}

fn write_dataset(out: &Path, grid: &TimeGrid, data: &Dataset) -> Result<()> {
    io::write_observations(&out.join(OBSERVATIONS), &data.obs)?;
    if let Some(t) = &data.truth {
        let path = StatePath {
            dim: t.states.first().map_or(0, Vec::len),
            values: t.states.clone(),
        };
        io::write_trajectory(&out.join(TRAJECTORY), grid, &t.modes, &path)?;
    }
    if let Some(j) = &data.jumps {
        io::write_jumps(&out.join(JUMPS), j)?;
    }
    Ok(())
}

/// Seed and input hashes of a simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub experiment: String,
    pub seed: u64,
    pub config_hash: String,
    /// Hash of the ground-truth model in file form, when hybrid.
    pub model_hash: Option<String>,
    pub observations: usize,
    pub jumps: Option<usize>,
}

pub fn run_simulate(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    let start = Instant::now();
    if cfg.simulate.is_none() {
        return Err(ConfigError("`simulate` needs a [simulate] section".into()).into());
    }
    prepare_output(out)?;
    let grid = cfg.grid();
    let data = generate(cfg)?;
    write_dataset(out, &grid, &data)?;
    let mut report = RunReport::new("simulate", &cfg.name, cfg.hash()?, cfg.seed);
    let meta = Metadata {
        experiment: cfg.name.clone(),
        seed: cfg.seed,
        config_hash: report.config_hash.clone(),
        model_hash: data.truth_model.as_ref().map(model_fingerprint),
        observations: data.obs.len(),
        jumps: data.jumps.as_ref().map(JumpPath::num_jumps),
    };
    std::fs::write(out.join("metadata.json"), serde_json::to_string_pretty(&meta)?)?;
    report.metric("observations", data.obs.len() as f64);
    if let Some(j) = &data.jumps {
        report.metric("jumps", j.num_jumps() as f64);
    }
    report.model = data.truth_model;
    report.converged = Some(true);
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    report.save(&out.join("simulate_report.json"))?;
    Ok(report)
}

/// Smoothing or learning result in a common shape.
struct FitOutcome {
    model: HybridModel,
    posterior: SmoothResult,
    trace: Vec<f64>,
    outer_trace: Vec<f64>,
    iterations: usize,
    converged: bool,
    notes: Vec<String>,
}

impl From<VemResult> for FitOutcome {
    fn from(r: VemResult) -> Self {
        Self {
            model: r.model,
            posterior: r.posterior,
            trace: r.trace,
            outer_trace: r.outer_trace,
            iterations: r.iterations,
            converged: r.converged,
            notes: r.notes,
        }
    }
}

fn check_dims(cfg: &ExperimentConfig, model: &HybridModel, obs: &ObservationSet) -> Result<()> {
    if model.num_modes() != cfg.modes {
        return Err(ConfigError(format!("model has {} modes, config says {}", model.num_modes(), cfg.modes)).into());
    }
    if obs.dim() != Some(model.state_dim) {
        return Err(ConfigError(format!(
            "observations have dimension {:?}, model has {}",
            obs.dim(),
            model.state_dim
        ))
        .into());
    }
    Ok(())
}

/// Ground-truth metrics of a posterior: MAP mode accuracy, mixture-mean
/// RMSE, 95% interval coverage and the number of occupied modes.
pub fn reconstruction_metrics(report: &mut RunReport, marg: &VariationalMarginals, truth: Option<&Trajectory>) {
    let (zmap, _) = map_path(marg);
    report.metric("occupied_modes", occupied_modes(&zmap, marg.modes, OCCUPIED_FRACTION) as f64);
    let Some(t) = truth else { return };
    if t.states.len() != marg.nodes {
        report
            .notes
            .push(format!("ground truth has {} nodes, posterior {}; skipped truth metrics", t.states.len(), marg.nodes));
        return;
    }
    let means: Vec<Vec<f64>> = (0..marg.nodes).map(|k| marg.mixture_mean(k)).collect();
    report.metric("mode_accuracy", mode_accuracy(&zmap, &t.modes));
    report.metric("state_rmse", rmse(&means, &t.states));
    report.metric("coverage_95", coverage(marg, &t.states, 0.95));
}

fn observation_rmse(marg: &VariationalMarginals, obs: &ObservationSet, grid: &TimeGrid) -> f64 {
    let est: Vec<Vec<f64>> = obs.times().iter().map(|&t| marg.mixture_mean(grid.nearest_node(t))).collect();
    rmse(&est, obs.values())
}

pub fn run_fit(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    let start = Instant::now();
    prepare_output(out)?;
    let grid = cfg.grid();
    let data = load_dataset(cfg)?;
    if cfg.simulate.is_some() {
        write_dataset(out, &grid, &data)?;
    }
    if data.obs.is_empty() {
        bail!("no observations");
    }
    let fit = &cfg.fit;
    let given = fit.model.as_ref().map(|m| cfg.load_model(m)).transpose()?;
    let outcome: FitOutcome = match fit.method {
        FitMethod::Smooth => {
            let model = given
                .or_else(|| data.truth_model.clone())
                .ok_or_else(|| ConfigError("`smooth` needs a model".into()))?;
            check_dims(cfg, &model, &data.obs)?;
            let r = smooth(&model, &data.obs, &grid, &fit.smooth_options())?;
            FitOutcome {
                trace: r.trace.clone(),
                outer_trace: Vec::new(),
                iterations: r.iterations,
                converged: r.converged,
                notes: Vec::new(),
                model,
                posterior: r,
            }
        }
        FitMethod::Learn => {
            let options = fit.learn_options();
            let mut model = match given {
                Some(model) => {
                    check_dims(cfg, &model, &data.obs)?;
                    model
                }
                None => init_kmeans(&data.obs, cfg.modes, cfg.seed, options.init_rate)?,
            };
            if let Some(c) = &fit.obs_cov {
                model.obs_cov = c.to_flat(model.state_dim)?;
            }
            vem_from(model, &data.obs, &grid, &options)?.into()
        }
    };
    let snapped = snap_observations(&data.obs, &grid)?;
    let times = snapped.times();
    let post = &outcome.posterior;
    io::write_marginals(&out.join(MARGINALS), &times, &post.marginals)?;
    io::write_controls(&out.join(CONTROLS), &out.join(INITIAL), &snapped, &post.controls)?;
    io::write_trace(&out.join("elbo_trace.csv"), "elbo", &outcome.trace)?;
    if !outcome.outer_trace.is_empty() {
        io::write_trace(&out.join("outer_trace.csv"), "elbo", &outcome.outer_trace)?;
    }
    write_map_path(&out.join("map_path.csv"), &times, &post.marginals)?;
    std::fs::write(out.join(FIT_MODEL), write_model(&outcome.model, Some(&grid)))?;
    let truth_for_table = data.truth_model.as_ref().filter(|m| {
        m.num_modes() == outcome.model.num_modes() && m.state_dim == outcome.model.state_dim
    });
    std::fs::write(out.join("parameters.txt"), parameter_table(&outcome.model, truth_for_table))?;

    let mut report = RunReport::new("fit", &cfg.name, cfg.hash()?, cfg.seed);
    report.converged = Some(outcome.converged);
    report.iterations = Some(outcome.iterations);
    report.metric("elbo", post.breakdown.total);
    report.metric("log_likelihood", post.breakdown.loglik);
    report.metric("kl_jump", post.breakdown.kl_jump);
    report.metric("kl_diffusion", post.breakdown.kl_diffusion);
    report.metric("kl_initial", post.breakdown.kl_initial);
    let worst_step = outcome.trace.windows(2).map(|w| w[0] - w[1]).fold(0.0f64, f64::max);
    report.metric("max_elbo_decrease", worst_step);
    report.metric("observations", data.obs.len() as f64);
    report.metric("observation_rmse", observation_rmse(&post.marginals, &data.obs, &snapped));
    reconstruction_metrics(&mut report, &post.marginals, data.truth.as_ref());
    report.elbo_trace = outcome.trace;
    report.outer_trace = outcome.outer_trace;
    report.model = Some(outcome.model);
    report.notes = outcome.notes;
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    report.save(&out.join("fit_report.json"))?;
    Ok(report)
}

fn write_map_path(path: &Path, times: &[f64], marg: &VariationalMarginals) -> Result<()> {
    let n = marg.dim;
    let (zs, ys) = map_path(marg);
    let mut header = vec!["t".to_string(), "z_map".to_string()];
    header.extend((1..=n).map(|i| format!("y_map_{i}")));
    header.extend((1..=n).map(|i| format!("mean_{i}")));
    let mut t = Table::new(header);
    for (k, time) in times.iter().enumerate() {
        let mut row = vec![*time, (zs[k] + 1) as f64];
        row.extend(&ys[k]);
        row.extend(marg.mixture_mean(k));
        t.rows.push(row);
    }
    t.write(path)
}

fn require(out: &Path, name: &str) -> Result<PathBuf> {
    let p = out.join(name);
    if p.exists() {
        Ok(p)
    } else {
        Err(anyhow!("{} not found; run `fit` first", p.display()))
    }
}

/// The model and posterior written by a completed fit.
pub fn load_fit(out: &Path) -> Result<(HybridModel, Vec<f64>, VariationalMarginals)> {
    let text = std::fs::read_to_string(require(out, FIT_MODEL)?)?;
    let model = parse_model(&text).context("fitted model")?.model;
    let (times, marg) = io::read_marginals(&require(out, MARGINALS)?)?;
    Ok((model, times, marg))
}

fn check_horizon(times: &[f64], grid: &TimeGrid) -> Result<()> {
    let matches = times.len() == grid.nodes()
        && times
            .iter()
            .enumerate()
            .all(|(k, t)| (t - grid.time(k)).abs() <= 1e-9 * grid.horizon().max(1.0));
    if matches {
        Ok(())
    } else {
        bail!(
            "grid mismatch: the fit has {} nodes up to t={}, the config grid {} nodes up to t={}",
            times.len(),
            times.last().copied().unwrap_or(0.0),
            grid.nodes(),
            grid.horizon()
        )
    }
}

/// The y-grid for the grid oracle: configured bounds, or every set point
/// and observation padded by six stationary standard deviations.
pub fn oracle_ygrid(cfg: &ExperimentConfig, model: &HybridModel, obs: &ObservationSet) -> Result<YGrid> {
    let spec = &cfg.oracle;
    let mut centres: Vec<f64> = model.drift.iter().filter_map(|d| d.beta().map(|b| b[0])).collect();
    centres.extend(obs.values().iter().map(|x| x[0]));
    centres.extend(model.initial.mean.iter().map(|m| m[0]));
    let mut sd: f64 = model.obs_cov[0].sqrt();
    for z in 0..model.num_modes() {
        let a = model.drift[z].a[0];
        if a < 0.0 {
            sd = sd.max((model.dispersion[z][0] / (-2.0 * a)).sqrt());
        }
        sd = sd.max(model.initial.cov[z][0].sqrt());
    }
    let auto = YGrid::covering(&centres, 6.0 * sd, spec.points)?;
    Ok(YGrid::new(spec.ymin.unwrap_or(auto.min), spec.ymax.unwrap_or(auto.max), spec.points)?)
}

pub fn run_oracle(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    let start = Instant::now();
    let (model, times, marg) = load_fit(out)?;
    if model.state_dim != 1 {
        return Err(hybrid_vi::Error::Dimension("the oracle supports 1D only".into()).into());
    }
    let grid = cfg.grid();
    check_horizon(&times, &grid)?;
    let data = load_dataset(cfg)?;
    let fit_report = RunReport::load(&require(out, "fit_report.json")?)?;
    let mut report = RunReport::new("oracle", &cfg.name, cfg.hash()?, cfg.seed);
    let elbo = fit_report.metrics.get("elbo").copied();
    let variational = MarginalSummary::from_variational(&marg, &times);

    let ygrid = oracle_ygrid(cfg, &model, &data.obs)?;
    let substeps = match cfg.oracle.substeps {
        Some(s) => s,
        None => stable_substeps(&model, &ygrid, &grid)?,
    };
    let exact = gfpe_smoother(&model, &data.obs, &ygrid, &grid, substeps)?;
    let cmp = compare_marginals(&variational, &MarginalSummary::from_grid(&exact.smoothed))?;
    report.metric("grid_mean_gap", cmp.mean_gap);
    report.metric("grid_cov_gap", cmp.cov_gap);
    report.metric("grid_mode_tv_max", cmp.mode_tv_max);
    report.metric("grid_mode_tv_mean", cmp.mode_tv_mean);
    report.metric("grid_argmax_agreement", cmp.argmax_agreement);
    report.metric("grid_mass_drift", exact.mass_drift);
    report.metric("grid_log_evidence", exact.log_evidence);
    report.metric("grid_points", ygrid.points as f64);
    report.metric("grid_substeps", substeps as f64);
    if let Some(e) = elbo {
        report.metric("elbo", e);
        report.metric("grid_evidence_minus_elbo", exact.log_evidence - e);
    }
    let mut comparisons = vec![("grid", cmp)];

    if model.num_modes() == 1 {
        let kalman = gaussian_smoother_1mode(&model, &data.obs, &grid)?;
        let cmp = compare_marginals(&variational, &MarginalSummary::from_gaussian(&kalman, &times))?;
        report.metric("kalman_mean_gap", cmp.mean_gap);
        report.metric("kalman_cov_gap", cmp.cov_gap);
        report.metric("kalman_log_evidence", kalman.log_evidence);
        if let Some(e) = elbo {
            report.metric("kalman_evidence_minus_elbo", kalman.log_evidence - e);
        }
        comparisons.push(("kalman", cmp));
    }

    let d = &exact.smoothed;
    let mut density = Table::new(vec!["t".into(), "y".into(), "z".into(), "density".into()]);
    for node in (0..d.nodes()).step_by(cfg.oracle.stride) {
        for z in 0..d.modes {
            for (i, v) in d.slice(node, z).iter().enumerate() {
                density.rows.push(vec![d.times[node], ygrid.point(i), (z + 1) as f64, *v]);
            }
        }
    }
    density.write(&out.join("density.csv"))?;
    let json: serde_json::Map<String, serde_json::Value> = comparisons
        .into_iter()
        .map(|(k, v)| Ok((k.to_string(), serde_json::to_value(v)?)))
        .collect::<Result<_>>()?;
    std::fs::write(out.join("comparison.json"), serde_json::to_string_pretty(&json)?)?;
    report.converged = Some(true);
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    report.save(&out.join("oracle_report.json"))?;
    Ok(report)
}

pub fn run_sample_posterior(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    let start = Instant::now();
    let (model, times, marg) = load_fit(out)?;
    let controls = io::read_controls(&require(out, CONTROLS)?, &require(out, INITIAL)?)?;
    let grid = cfg.grid();
    check_horizon(&times, &grid)?;
    let spec = &cfg.posterior;
    let samples = sample_posterior(&controls, &model.dispersion, &grid, spec.samples, mix_seed(cfg.seed, 20))?;
    let n = model.state_dim;
    let mut header = vec!["sample".to_string(), "t".to_string(), "z".to_string()];
    header.extend((1..=n).map(|i| format!("y_{i}")));
    let mut table = Table::new(header);
    for (s, (jumps, path)) in samples.iter().enumerate() {
        let modes = jumps.on_grid(&grid);
        for k in (0..grid.nodes()).step_by(spec.stride) {
            let mut row = vec![s as f64, grid.time(k), (modes[k] + 1) as f64];
            row.extend(&path.values[k]);
            table.rows.push(row);
        }
    }
    table.write(&out.join("posterior_samples.csv"))?;

    let mut report = RunReport::new("sample-posterior", &cfg.name, cfg.hash()?, cfg.seed);
    report.metric("samples", spec.samples as f64);
    if spec.samples > 1 {
        // worst standardized gap between sample means and mixture means
        let mut worst: f64 = 0.0;
        for k in (1..grid.nodes()).step_by(spec.stride) {
            let target = marg.mixture_mean(k);
            for i in 0..n {
                let xs: Vec<f64> = samples.iter().map(|(_, p)| p.values[k][i]).collect();
                let (m, se) = mean_se(&xs);
                if se > 0.0 {
                    worst = worst.max((m - target[i]).abs() / se);
                }
            }
        }
        report.metric("max_mean_z_score", worst);
    }
    report.converged = Some(true);
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    report.save(&out.join("sample_posterior_report.json"))?;
    Ok(report)
}

pub fn run_eval(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    let start = Instant::now();
    let (times, marg) = io::read_marginals(&require(out, MARGINALS)?)?;
    let mut report = RunReport::new("eval", &cfg.name, cfg.hash()?, cfg.seed);
    let truth_path = match &cfg.data {
        Some(d) => d.truth.as_ref().map(|p| cfg.resolve(p)),
        None => Some(out.join(TRAJECTORY)).filter(|p| p.exists()),
    };
    let truth = truth_path.map(|p| io::read_trajectory(&p)).transpose()?;
    if truth.is_none() {
        report.notes.push("no ground truth; data-only metrics".into());
    }
    let obs_path = match &cfg.data {
        Some(d) => cfg.resolve(&d.observations),
        None => require(out, OBSERVATIONS)?,
    };
    let obs = io::read_observations(&obs_path)?;
    let grid = cfg.grid();
    check_horizon(&times, &grid)?;
    report.metric("observation_rmse", observation_rmse(&marg, &obs, &grid));
    reconstruction_metrics(&mut report, &marg, truth.as_ref());

    let file = std::fs::File::create(out.join("metrics.csv"))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["metric", "value"])?;
    for (k, v) in &report.metrics {
        w.write_record([k.as_str(), &io::num(*v)])?;
    }
    w.flush()?;
    report.converged = Some(true);
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    report.save(&out.join("eval_report.json"))?;
    Ok(report)
}

/// Process exit code for a failed run: 3 for configuration problems, 4
/// for numerical failures, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use hybrid_vi::Error as E;
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::EStep { source, .. } => match **source {
                    E::InvalidModel(_) | E::Parse { .. } => 3,
                    _ => 4,
                },
                E::InvalidModel(_)
                | E::Parse { .. }
                | E::Dimension(_)
                | E::GridTooCoarse { .. }
                | E::GridTooCoarseAtStart { .. }
                | E::ObservationOutOfRange { .. }
                | E::UnorderedObservations(_) => 3,
                E::NotPositiveDefinite(_)
                | E::CovarianceNotPd { .. }
                | E::NegativeProbability { .. }
                | E::NonFinite { .. }
                | E::Unstable { .. }
                | E::BoundaryMass { .. }
                | E::KMeans(_) => 4,
                E::Other(_) => 1,
            };
        }
    }
    1
}
