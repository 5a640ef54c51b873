use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hybrid_vi_cli::config::FitMethod;
use hybrid_vi_cli::{exit_code, run_eval, run_fit, run_oracle, run_sample_posterior, run_simulate};
use hybrid_vi_cli::{ExperimentConfig, RunReport};

#[derive(Parser)]
#[command(name = "hybrid-vi", version, about = "Variational inference experiments for switching diffusions")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a ground-truth trajectory and observations.
    Simulate(Common),
    /// Smooth or learn from observations.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Parameter blocks to learn, replacing the config's choice.
        /// `none` smooths with the starting model.
        #[arg(long, value_enum, value_delimiter = ',')]
        learn: Vec<LearnBlock>,
    },
    /// Draw paths from a fitted variational posterior.
    SamplePosterior(Common),
    /// Compare a fit against the grid solution of the exact smoothing
    /// equations (one-dimensional state only).
    Oracle(Common),
    /// Reconstruction metrics of a fit against ground truth.
    Eval(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config; repeat to run several.
    #[arg(long, required = true)]
    config: Vec<PathBuf>,
    /// Random seed; repeat or comma-separate to run several.
    #[arg(long, env = "HYBRID_VI_SEED", value_delimiter = ',')]
    seed: Vec<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Parallel processes when several configs or seeds are given.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LearnBlock {
    All,
    None,
    Rates,
    ObsCov,
    Dispersion,
    Drift,
    Initials,
}

impl LearnBlock {
    fn flag(self) -> &'static str {
        match self {
            Self::All => "all",
            Self::None => "none",
            Self::Rates => "rates",
            Self::ObsCov => "obs-cov",
            Self::Dispersion => "dispersion",
            Self::Drift => "drift",
            Self::Initials => "initials",
        }
    }
}

fn apply_learn_flags(cfg: &mut ExperimentConfig, blocks: &[LearnBlock]) {
    if blocks.is_empty() {
        return;
    }
    let has = |b: LearnBlock| blocks.contains(&b) || blocks.contains(&LearnBlock::All);
    if blocks == [LearnBlock::None] {
        cfg.fit.method = FitMethod::Smooth;
        return;
    }
    cfg.fit.method = FitMethod::Learn;
    cfg.fit.learn_rates = has(LearnBlock::Rates);
    cfg.fit.learn_obs_cov = has(LearnBlock::ObsCov);
    cfg.fit.learn_dispersion = has(LearnBlock::Dispersion);
    cfg.fit.learn_drift = has(LearnBlock::Drift);
    cfg.fit.learn_initials = has(LearnBlock::Initials);
}

fn summarize(report: &RunReport, out: &Path) {
    println!("{} `{}` (seed {}) -> {}", report.command, report.experiment, report.seed, out.display());
    if let Some(c) = report.converged {
        println!("  converged: {c}");
    }
    for (k, v) in &report.metrics {
        println!("  {k}: {v}");
    }
    for note in &report.notes {
        println!("  note: {note}");
    }
}

fn run_one(cmd: &Cmd, config: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<RunReport> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Cmd::Fit { learn, .. } = cmd {
        apply_learn_flags(&mut cfg, learn);
    }
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir());
    let report = match cmd {
        Cmd::Simulate(_) => run_simulate(&cfg, &out),
        Cmd::Fit { .. } => run_fit(&cfg, &out),
        Cmd::SamplePosterior(_) => run_sample_posterior(&cfg, &out),
        Cmd::Oracle(_) => run_oracle(&cfg, &out),
        Cmd::Eval(_) => run_eval(&cfg, &out),
    }?;
    summarize(&report, &out);
    Ok(report)
}

fn status(result: &Result<RunReport>) -> i32 {
    match result {
        Ok(r) if r.converged == Some(false) => 2,
        Ok(_) => 0,
        Err(e) => exit_code(e),
    }
}

/// Runs every (config, seed) pair as a child process, at most `jobs` at a
/// time, each writing to its own subdirectory.
fn fan_out(name: &str, common: &Common, extra: &[String]) -> Result<i32> {
    let exe = std::env::current_exe().context("locating the executable")?;
    let base = common.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let seeds: Vec<Option<u64>> = if common.seed.is_empty() {
        vec![None]
    } else {
        common.seed.iter().copied().map(Some).collect()
    };
    let mut pending = Vec::new();
    for config in &common.config {
        let stem = config.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
        for seed in &seeds {
            let dir = match seed {
                Some(s) => base.join(&stem).join(format!("seed-{s}")),
                None => base.join(&stem),
            };
            let mut cmd = Command::new(&exe);
            cmd.arg(name).arg("--config").arg(config).arg("--out").arg(&dir).args(extra);
            cmd.env_remove("HYBRID_VI_SEED");
            if let Some(s) = seed {
                cmd.arg("--seed").arg(s.to_string());
            }
            pending.push(cmd);
        }
    }
    let mut running: Vec<Child> = Vec::new();
    let mut worst = 0;
    let mut record = |code: Option<i32>| {
        let c = code.unwrap_or(1);
        if c != 0 && (worst == 0 || c > worst) {
            worst = c;
        }
    };
    for mut cmd in pending {
        if running.len() >= common.jobs.max(1) {
            let child = running.remove(0);
            record(child.wait_with_output()?.status.code());
        }
        running.push(cmd.spawn().context("spawning a worker process")?);
    }
    for child in running {
        record(child.wait_with_output()?.status.code());
    }
    Ok(worst)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, common, extra) = match &cli.command {
        Cmd::Simulate(c) => ("simulate", c, Vec::new()),
        Cmd::Fit { common, learn } => {
            let extra = if learn.is_empty() {
                Vec::new()
            } else {
                vec![
                    "--learn".to_string(),
                    learn.iter().map(|b| b.flag()).collect::<Vec<_>>().join(","),
                ]
            };
            ("fit", common, extra)
        }
        Cmd::SamplePosterior(c) => ("sample-posterior", c, Vec::new()),
        Cmd::Oracle(c) => ("oracle", c, Vec::new()),
        Cmd::Eval(c) => ("eval", c, Vec::new()),
    };
    let code = if common.config.len() > 1 || common.seed.len() > 1 {
        fan_out(name, common, &extra).unwrap_or_else(|e| {
            eprintln!("error: {e:#}");
            1
        })
    } else {
        let result = run_one(&cli.command, &common.config[0], common.seed.first().copied(), common.out.as_deref());
        if let Err(e) = &result {
            eprintln!("error: {e:#}");
        }
        status(&result)
    };
    ExitCode::from(code as u8)
}
