//! Experiment configuration files.
//!
//! ```toml
//! name = "two_mode_1d"
//! seed = 1
//! modes = 2
//!
//! [grid]
//! horizon = 35.0
//! step = 0.01
//!
//! [simulate]                      # exactly one of [simulate] and [data]
//! model = "models/two_mode_1d.toml"
//! substeps = 10
//! observations = { design = "poisson", mean_gap = 0.35 }
//!
//! [fit]
//! method = "learn"
//! ```
//!
//! Relative paths resolve against the directory holding the config file.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use hybrid_vi::learn::LearnOptions;
use hybrid_vi::modelfile::{parse_model, write_model};
use hybrid_vi::simulate::Potential;
use hybrid_vi::smoother::SmoothOptions;
use hybrid_vi::{HybridModel, TimeGrid};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// A configuration problem: missing file, unknown key, conflicting
/// sources. Maps to exit code 3.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid config: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// A model given by file path or inline as a TOML table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSource {
    Path(PathBuf),
    Inline(toml::Table),
}

/// Scalar (times identity) or full matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
}

impl MatrixSpec {
    pub fn to_flat(&self, n: usize) -> Result<Vec<f64>> {
        match self {
            Self::Scalar(s) => Ok((0..n * n).map(|e| if e % (n + 1) == 0 { *s } else { 0.0 }).collect()),
            Self::Matrix(rows) if rows.len() == n && rows.iter().all(|r| r.len() == n) => {
                Ok(rows.iter().flatten().copied().collect())
            }
            Self::Matrix(_) => Err(invalid(format!("expected a scalar or a {n} x {n} matrix"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub horizon: f64,
    pub step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "design", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObservationDesign {
    /// Poisson event times with the given mean gap.
    Poisson { mean_gap: f64 },
    Regular { gap: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSpec {
    /// Hybrid ground truth.
    pub model: Option<ModelSource>,
    /// Diffusion in a benchmark potential as ground truth.
    pub potential: Option<Potential>,
    pub dispersion: Option<MatrixSpec>,
    pub y0: Option<Vec<f64>>,
    /// Observation covariance for potential ground truth; hybrid models
    /// carry their own.
    pub obs_cov: Option<MatrixSpec>,
    /// Internal simulation steps per grid interval.
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    pub observations: ObservationDesign,
}

fn default_substeps() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub observations: PathBuf,
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    Smooth,
    Learn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSpec {
    pub method: FitMethod,
    /// Starting model for `learn`, the fixed model for `smooth`. When
    /// absent, `smooth` uses the simulation ground truth and `learn` a
    /// k-means initialization.
    pub model: Option<ModelSource>,
    /// Known observation covariance replacing the k-means estimate in the
    /// starting model. Combine with `learn_obs_cov = false` to hold it fixed.
    pub obs_cov: Option<MatrixSpec>,
    pub init_rate: f64,
    pub max_outer: usize,
    pub tol_outer: f64,
    pub learn_rates: bool,
    pub learn_obs_cov: bool,
    pub learn_dispersion: bool,
    pub learn_drift: bool,
    pub learn_initials: bool,
    pub dispersion_per_mode: bool,
    pub tol_inner: f64,
    pub max_inner: usize,
    pub gamma: f64,
    pub max_backtracks: usize,
    pub rate_floor: f64,
    pub q_floor: f64,
}

impl Default for FitSpec {
    fn default() -> Self {
        let l = LearnOptions::default();
        let s = l.smooth;
        Self {
            method: FitMethod::Learn,
            model: None,
            obs_cov: None,
            init_rate: l.init_rate,
            max_outer: l.max_outer,
            tol_outer: l.tol_outer,
            learn_rates: l.learn_rates,
            learn_obs_cov: l.learn_obs_cov,
            learn_dispersion: l.learn_dispersion,
            learn_drift: l.learn_drift,
            learn_initials: l.learn_initials,
            dispersion_per_mode: l.dispersion_per_mode,
            tol_inner: s.tol_inner,
            max_inner: s.max_inner,
            gamma: s.gamma,
            max_backtracks: s.max_backtracks,
            rate_floor: s.rate_floor,
            q_floor: s.q_floor,
        }
    }
}

impl FitSpec {
    pub fn smooth_options(&self) -> SmoothOptions {
        SmoothOptions {
            tol_inner: self.tol_inner,
            max_inner: self.max_inner,
            gamma: self.gamma,
            max_backtracks: self.max_backtracks,
            rate_floor: self.rate_floor,
            q_floor: self.q_floor,
        }
    }

    pub fn learn_options(&self) -> LearnOptions {
        LearnOptions {
            max_outer: self.max_outer,
            tol_outer: self.tol_outer,
            learn_rates: self.learn_rates,
            learn_obs_cov: self.learn_obs_cov,
            learn_dispersion: self.learn_dispersion,
            learn_drift: self.learn_drift,
            learn_initials: self.learn_initials,
            dispersion_per_mode: self.dispersion_per_mode,
            init_rate: self.init_rate,
            smooth: self.smooth_options(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSpec {
    pub points: usize,
    /// Explicit y-range; by default the grid covers every set point and
    /// observation with a margin of six stationary standard deviations.
    pub ymin: Option<f64>,
    pub ymax: Option<f64>,
    /// Forward-Euler substeps per grid interval; the smallest stable count
    /// when absent.
    pub substeps: Option<usize>,
    /// Node stride of the emitted density slices.
    pub stride: usize,
}

impl Default for OracleSpec {
    fn default() -> Self {
        Self {
            points: 400,
            ymin: None,
            ymax: None,
            substeps: None,
            stride: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PosteriorSpec {
    pub samples: usize,
    /// Node stride of the emitted sample paths.
    pub stride: usize,
}

impl Default for PosteriorSpec {
    fn default() -> Self {
        Self { samples: 100, stride: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Number of modes to fit.
    pub modes: usize,
    pub grid: GridSpec,
    pub simulate: Option<SimulateSpec>,
    pub data: Option<DataSpec>,
    #[serde(default)]
    pub fit: FitSpec,
    #[serde(default)]
    pub oracle: OracleSpec,
    #[serde(default)]
    pub posterior: PosteriorSpec,
    /// Output directory; defaults to `out/<name>` under the working
    /// directory.
    pub output: Option<PathBuf>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// The ground truth behind simulated data.
#[derive(Debug, Clone)]
pub enum Truth {
    Hybrid(HybridModel),
    Potential {
        potential: Potential,
        dispersion: Vec<f64>,
        y0: Vec<f64>,
        obs_cov: Vec<f64>,
    },
}

impl Truth {
    pub fn dim(&self) -> usize {
        match self {
            Self::Hybrid(m) => m.state_dim,
            Self::Potential { potential, .. } => potential.dim(),
        }
    }

    pub fn obs_cov(&self) -> &[f64] {
        match self {
            Self::Hybrid(m) => &m.obs_cov,
            Self::Potential { obs_cov, .. } => obs_cov,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_str_in(&src, base).with_context(|| format!("in config {}", path.display()))
    }

    /// Parses a config whose relative paths resolve against `base_dir`.
    pub fn from_str_in(src: &str, base_dir: PathBuf) -> Result<Self> {
        let mut cfg: Self = toml::from_str(src).map_err(|e| invalid(e.to_string()))?;
        cfg.base_dir = base_dir;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.modes == 0 {
            return Err(invalid("`modes` must be at least 1"));
        }
        TimeGrid::new(self.grid.horizon, self.grid.step).map_err(|e| invalid(format!("grid: {e}")))?;
        match (&self.simulate, &self.data) {
            (Some(_), Some(_)) => return Err(invalid("give exactly one of [simulate] and [data], not both")),
            (None, None) => return Err(invalid("give exactly one of [simulate] and [data]")),
            _ => {}
        }
        if let Some(s) = &self.simulate {
            match (&s.model, s.potential) {
                (Some(_), Some(_)) | (None, None) => {
                    return Err(invalid("[simulate] needs exactly one of `model` and `potential`"))
                }
                (None, Some(_)) if s.dispersion.is_none() || s.y0.is_none() || s.obs_cov.is_none() => {
                    return Err(invalid("a potential ground truth needs `dispersion`, `y0` and `obs_cov`"))
                }
                _ => {}
            }
            if s.substeps == 0 {
                return Err(invalid("`substeps` must be at least 1"));
            }
            let gap = match s.observations {
                ObservationDesign::Poisson { mean_gap } => mean_gap,
                ObservationDesign::Regular { gap } => gap,
            };
            if !(gap > 0.0) {
                return Err(invalid("observation gap must be positive"));
            }
        }
        if let Some(d) = &self.data {
            for p in std::iter::once(&d.observations).chain(&d.truth) {
                if !self.resolve(p).exists() {
                    return Err(invalid(format!("file {} does not exist", self.resolve(p).display())));
                }
            }
        }
        for src in [self.simulate.as_ref().and_then(|s| s.model.as_ref()), self.fit.model.as_ref()]
            .into_iter()
            .flatten()
        {
            if let ModelSource::Path(p) = src {
                if !self.resolve(p).exists() {
                    return Err(invalid(format!("model file {} does not exist", self.resolve(p).display())));
                }
            }
        }
        if self.fit.method == FitMethod::Smooth
            && self.fit.model.is_none()
            && !matches!(&self.simulate, Some(SimulateSpec { model: Some(_), .. }))
        {
            return Err(invalid("`smooth` needs [fit] model or a hybrid [simulate] model"));
        }
        if self.oracle.stride == 0 || self.posterior.stride == 0 {
            return Err(invalid("strides must be at least 1"));
        }
        Ok(())
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid::new(self.grid.horizon, self.grid.step).expect("validated")
    }

    pub fn load_model(&self, src: &ModelSource) -> Result<HybridModel> {
        let text = self.model_text(src)?;
        let file = parse_model(&text).map_err(|e| match src {
            ModelSource::Path(p) => invalid(format!("{}: {e}", self.resolve(p).display())),
            ModelSource::Inline(_) => invalid(format!("inline model: {e}")),
        })?;
        Ok(file.model)
    }

    fn model_text(&self, src: &ModelSource) -> Result<String> {
        match src {
            ModelSource::Path(p) => {
                let p = self.resolve(p);
                std::fs::read_to_string(&p).with_context(|| format!("reading model {}", p.display()))
            }
            ModelSource::Inline(t) => toml::to_string(t).map_err(|e| invalid(e.to_string())),
        }
    }

    pub fn truth(&self) -> Result<Option<Truth>> {
        let Some(s) = &self.simulate else { return Ok(None) };
        if let Some(m) = &s.model {
            return Ok(Some(Truth::Hybrid(self.load_model(m)?)));
        }
        let potential = s.potential.expect("validated");
        let n = potential.dim();
        let y0 = s.y0.clone().expect("validated");
        if y0.len() != n {
            return Err(invalid(format!("`y0` must have length {n}")));
        }
        Ok(Some(Truth::Potential {
            potential,
            dispersion: s.dispersion.as_ref().expect("validated").to_flat(n)?,
            y0,
            obs_cov: s.obs_cov.as_ref().expect("validated").to_flat(n)?,
        }))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output.clone().unwrap_or_else(|| PathBuf::from("out").join(&self.name))
    }

    /// SHA-256 over the canonical config and the contents of every file it
    /// references.
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(toml::to_string(self).map_err(|e| invalid(e.to_string()))?.as_bytes());
        for src in [self.simulate.as_ref().and_then(|s| s.model.as_ref()), self.fit.model.as_ref()]
            .into_iter()
            .flatten()
        {
            h.update(self.model_text(src)?.as_bytes());
        }
        if let Some(d) = &self.data {
            for p in std::iter::once(&d.observations).chain(&d.truth) {
                h.update(std::fs::read(self.resolve(p))?);
            }
        }
        Ok(hex(&h.finalize()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_text(text: &str) -> String {
    hex(&Sha256::digest(text.as_bytes()))
}

/// A model in file form with its hash, for run metadata.
pub fn model_fingerprint(model: &HybridModel) -> String {
    hash_text(&write_model(model, None))
}
