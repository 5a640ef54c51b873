//! Run reports and the learned-parameter table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use hybrid_vi::HybridModel;
use serde::{Deserialize, Serialize};

/// Everything a run produced apart from the CSV artifacts. Serialized as
/// JSON; floats round-trip exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub experiment: String,
    pub config_hash: String,
    pub seed: u64,
    pub converged: Option<bool>,
    pub iterations: Option<usize>,
    /// Objective after every accepted inner or outer step.
    pub elbo_trace: Vec<f64>,
    /// Objective at the end of each outer iteration.
    pub outer_trace: Vec<f64>,
    /// The model behind the reported posterior (learned when learning).
    pub model: Option<HybridModel>,
    pub metrics: BTreeMap<String, f64>,
    pub notes: Vec<String>,
    pub wall_clock_seconds: f64,
}

impl RunReport {
    pub fn new(command: &str, experiment: &str, config_hash: String, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            experiment: experiment.to_string(),
            config_hash,
            seed,
            converged: None,
            iterations: None,
            elbo_trace: Vec::new(),
            outer_trace: Vec::new(),
            model: None,
            metrics: BTreeMap::new(),
            notes: Vec::new(),
            wall_clock_seconds: 0.0,
        }
    }

    /// Records a metric; non-finite values become a note since JSON has no
    /// representation for them.
    pub fn metric(&mut self, name: &str, value: f64) {
        if value.is_finite() {
            self.metrics.insert(name.to_string(), value);
        } else {
            self.notes.push(format!("metric {name} is {value}"));
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&s).with_context(|| format!("parsing {}", path.display()))
    }

    /// Equality ignoring the wall-clock time.
    pub fn same_run(&self, other: &Self) -> bool {
        Self {
            wall_clock_seconds: 0.0,
            ..self.clone()
        } == Self {
            wall_clock_seconds: 0.0,
            ..other.clone()
        }
    }
}

fn fmt_num(v: f64) -> String {
    if v == 0.0 || (1e-3..1e4).contains(&v.abs()) {
        format!("{v:.4}")
    } else {
        format!("{v:.3e}")
    }
}

fn fmt_vec(v: &[f64]) -> String {
    format!("[{}]", v.iter().map(|x| fmt_num(*x)).collect::<Vec<_>>().join(", "))
}

fn fmt_mat(m: &[f64], n: usize) -> String {
    if n == 1 {
        return fmt_num(m[0]);
    }
    format!("[{}]", m.chunks(n).map(fmt_vec).collect::<Vec<_>>().join("; "))
}

fn rows(model: &HybridModel) -> Vec<(&'static str, String)> {
    let n = model.state_dim;
    let k = model.num_modes();
    let per_mode = |f: &dyn Fn(usize) -> String| (0..k).map(f).collect::<Vec<_>>().join(", ");
    vec![
        ("alpha_z", per_mode(&|z| fmt_mat(&model.drift[z].alpha(), n))),
        (
            "beta_z",
            per_mode(&|z| model.drift[z].beta().map_or("singular".into(), |b| fmt_vec(&b))),
        ),
        ("A_p(z)", per_mode(&|z| fmt_mat(&model.drift[z].a, n))),
        ("b_p(z)", per_mode(&|z| fmt_vec(&model.drift[z].b))),
        ("Lambda", fmt_mat(model.rates.as_slice(), k)),
        ("Sigma_obs", fmt_mat(&model.obs_cov, n)),
        ("D(z)", per_mode(&|z| fmt_mat(&model.dispersion[z], n))),
        ("mu_p(z, 0)", per_mode(&|z| fmt_vec(&model.initial.mean[z]))),
        ("Sigma_p(z, 0)", per_mode(&|z| fmt_mat(&model.initial.cov[z], n))),
        ("p(z, 0)", fmt_vec(&model.initial.p0)),
    ]
}

/// Plain-text parameter table with an optional ground-truth column.
pub fn parameter_table(learned: &HybridModel, truth: Option<&HybridModel>) -> String {
    let learned_rows = rows(learned);
    let truth_rows = truth.map(rows);
    let mut out = String::new();
    match &truth_rows {
        Some(t) => {
            let _ = writeln!(out, "parameter | ground truth | learned");
            for ((name, l), (_, g)) in learned_rows.iter().zip(t) {
                let _ = writeln!(out, "{name} | {g} | {l}");
            }
        }
        None => {
            let _ = writeln!(out, "parameter | learned");
            for (name, l) in &learned_rows {
                let _ = writeln!(out, "{name} | {l}");
            }
        }
    }
    out
}
