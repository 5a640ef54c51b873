//! TOML model files.
//!
//! ```toml
//! modes = 2
//! state_dim = 1
//! rates = [[0.0, 0.2], [0.2, 0.0]]   # row-major; diagonal rebuilt as -row sum
//!
//! [observation]
//! covariance = 0.1                   # scalar (times identity) or n x n matrix
//!
//! [grid]                             # optional
//! horizon = 35.0
//! step = 0.01
//!
//! [[mode]]
//! alpha = 1.5                        # or `a = ...` (A_p), never both
//! beta = -1.0                        # or `b = ...` (b_p)
//! dispersion = 0.25
//! p0 = 0.0
//! mu0 = -1.0
//! sigma0 = 0.2
//! ```
//!
//! Matrices are row-major arrays of rows; a scalar `s` stands for `s I`.
//! Vectors accept a bare scalar when `n = 1`.

use std::fmt::Write as _;
use std::ops::Range;

use serde::Deserialize;
use toml::Spanned;

use crate::error::{Error, Result};
use crate::model::{validate_model, HybridModel, InitialLaw, LinearDrift, RateMatrix, TimeGrid};

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum Numeric {
    Scalar(f64),
    Vector(Vec<f64>),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    modes: Spanned<usize>,
    state_dim: Spanned<usize>,
    rates: Spanned<Numeric>,
    observation: RawObservation,
    grid: Option<RawGrid>,
    mode: Spanned<Vec<RawMode>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawObservation {
    covariance: Spanned<Numeric>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    horizon: Spanned<f64>,
    step: Spanned<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMode {
    alpha: Option<Spanned<Numeric>>,
    beta: Option<Spanned<Numeric>>,
    a: Option<Spanned<Numeric>>,
    b: Option<Spanned<Numeric>>,
    dispersion: Spanned<Numeric>,
    p0: Spanned<f64>,
    mu0: Spanned<Numeric>,
    sigma0: Spanned<Numeric>,
}

/// A parsed model file: the model plus the optional discretization.
#[derive(Debug, Clone)]
pub struct ModelFile {
    pub model: HybridModel,
    pub grid: Option<TimeGrid>,
}

struct Ctx<'a> {
    src: &'a str,
}

impl Ctx<'_> {
    fn line(&self, span: &Range<usize>) -> usize {
        let end = span.start.min(self.src.len());
        self.src[..end].matches('\n').count() + 1
    }

    fn err(&self, span: &Range<usize>, field: &str, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line(span),
            field: field.to_string(),
            message: message.into(),
        }
    }

    fn matrix(&self, v: &Spanned<Numeric>, field: &str, n: usize) -> Result<Vec<f64>> {
        match v.get_ref() {
            Numeric::Scalar(s) => {
                let mut out = vec![0.0; n * n];
                for i in 0..n {
                    out[i * n + i] = *s;
                }
                Ok(out)
            }
            Numeric::Vector(row) if n == 1 && row.len() == 1 => Ok(row.clone()),
            Numeric::Matrix(rows) if rows.len() == n && rows.iter().all(|r| r.len() == n) => {
                Ok(rows.iter().flatten().copied().collect())
            }
            _ => Err(self.err(&v.span(), field, format!("expected a scalar or a {n} x {n} matrix"))),
        }
    }

    fn vector(&self, v: &Spanned<Numeric>, field: &str, n: usize) -> Result<Vec<f64>> {
        match v.get_ref() {
            Numeric::Scalar(s) if n == 1 => Ok(vec![*s]),
            Numeric::Vector(xs) if xs.len() == n => Ok(xs.clone()),
            _ => Err(self.err(&v.span(), field, format!("expected a vector of length {n}"))),
        }
    }
}

fn toml_error(src: &str, e: toml::de::Error) -> Error {
    let ctx = Ctx { src };
    let span = e.span().unwrap_or(0..0);
    let line = ctx.line(&span);
    let field = src
        .lines()
        .nth(line - 1)
        .and_then(|l| l.split_once('='))
        .map(|(k, _)| k.trim().to_string())
        .unwrap_or_default();
    Error::Parse {
        line,
        field,
        message: e.message().trim().to_string(),
    }
}

/// Parses and validates a model file.
pub fn parse_model(src: &str) -> Result<ModelFile> {
    let raw: RawModel = toml::from_str(src).map_err(|e| toml_error(src, e))?;
    let ctx = Ctx { src };
    let k = *raw.modes.get_ref();
    let n = *raw.state_dim.get_ref();
    if k == 0 {
        return Err(ctx.err(&raw.modes.span(), "modes", "need at least one mode"));
    }
    if n == 0 {
        return Err(ctx.err(&raw.state_dim.span(), "state_dim", "need a positive state dimension"));
    }

    let rates_span = raw.rates.span();
    let rates = match raw.rates.get_ref() {
        Numeric::Matrix(rows) if rows.len() == k && rows.iter().all(|r| r.len() == k) => rows.clone(),
        Numeric::Scalar(s) if k == 1 && *s == 0.0 => vec![vec![0.0]],
        _ => return Err(ctx.err(&rates_span, "rates", format!("expected a {k} x {k} matrix"))),
    };
    for (i, row) in rates.iter().enumerate() {
        let off: f64 = row.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| v).sum();
        let diag = row[i];
        if diag != 0.0 && (diag + off).abs() > 1e-9 * off.max(1.0) {
            return Err(ctx.err(
                &rates_span,
                "rates",
                format!("row {} diagonal {diag} is not minus the exit rate {off}", i + 1),
            ));
        }
    }
    let rates = RateMatrix::from_rows(&rates).map_err(|e| ctx.err(&rates_span, "rates", e.to_string()))?;

    let modes = raw.mode.get_ref();
    if modes.len() != k {
        return Err(ctx.err(
            &raw.mode.span(),
            "mode",
            format!("{} [[mode]] sections for {k} modes", modes.len()),
        ));
    }

    let mut drift = Vec::with_capacity(k);
    let mut dispersion = Vec::with_capacity(k);
    let mut p0 = Vec::with_capacity(k);
    let mut mean = Vec::with_capacity(k);
    let mut cov = Vec::with_capacity(k);
    for m in modes {
        let d = match (&m.alpha, &m.beta, &m.a, &m.b) {
            (Some(alpha), Some(beta), None, None) => {
                let alpha = ctx.matrix(alpha, "alpha", n)?;
                let beta = ctx.vector(beta, "beta", n)?;
                LinearDrift::from_alpha_beta(&alpha, &beta)
            }
            (None, None, Some(a), Some(b)) => LinearDrift::new(ctx.matrix(a, "a", n)?, ctx.vector(b, "b", n)?),
            _ => {
                return Err(ctx.err(
                    &m.dispersion.span(),
                    "mode",
                    "each mode needs either alpha/beta or a/b",
                ))
            }
        };
        drift.push(d);
        dispersion.push(ctx.matrix(&m.dispersion, "dispersion", n)?);
        p0.push(*m.p0.get_ref());
        mean.push(ctx.vector(&m.mu0, "mu0", n)?);
        cov.push(ctx.matrix(&m.sigma0, "sigma0", n)?);
    }
    let obs_cov = ctx.matrix(&raw.observation.covariance, "covariance", n)?;

    let grid = match raw.grid {
        Some(g) => Some(
            TimeGrid::new(*g.horizon.get_ref(), *g.step.get_ref())
                .map_err(|e| ctx.err(&g.step.span(), "step", e.to_string()))?,
        ),
        None => None,
    };

    let model = HybridModel {
        state_dim: n,
        rates,
        drift,
        dispersion,
        initial: InitialLaw { p0, mean, cov },
        obs_cov,
    };
    let report = validate_model(&model);
    if !report.is_ok() {
        // point at the section most likely responsible
        let v = &report.violations[0];
        let (span, field) = match v.component {
            "rates" => (rates_span, "rates"),
            "observation" => (raw.observation.covariance.span(), "covariance"),
            _ => (raw.mode.span(), v.component),
        };
        return Err(ctx.err(&span, field, report.to_string()));
    }
    Ok(ModelFile { model, grid })
}

fn fmt_matrix(m: &[f64], n: usize) -> String {
    let rows: Vec<String> = m
        .chunks(n)
        .map(|r| format!("[{}]", r.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(", ")))
        .collect();
    format!("[{}]", rows.join(", "))
}

fn fmt_vector(v: &[f64]) -> String {
    format!("[{}]", v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", "))
}

/// Serializes a model to the file format (drift in `a`/`b` form). Floats
/// use the shortest round-trip representation.
pub fn write_model(model: &HybridModel, grid: Option<&TimeGrid>) -> String {
    let n = model.state_dim;
    let k = model.num_modes();
    let mut out = String::new();
    let _ = writeln!(out, "modes = {k}");
    let _ = writeln!(out, "state_dim = {n}");
    let _ = writeln!(out, "rates = {}", fmt_matrix(model.rates.as_slice(), k));
    let _ = writeln!(out, "\n[observation]\ncovariance = {}", fmt_matrix(&model.obs_cov, n));
    if let Some(g) = grid {
        let _ = writeln!(out, "\n[grid]\nhorizon = {:?}\nstep = {:?}", g.horizon(), g.step());
    }
    for z in 0..k {
        let _ = writeln!(out, "\n[[mode]]");
        let _ = writeln!(out, "a = {}", fmt_matrix(&model.drift[z].a, n));
        let _ = writeln!(out, "b = {}", fmt_vector(&model.drift[z].b));
        let _ = writeln!(out, "dispersion = {}", fmt_matrix(&model.dispersion[z], n));
        let _ = writeln!(out, "p0 = {:?}", model.initial.p0[z]);
        let _ = writeln!(out, "mu0 = {}", fmt_vector(&model.initial.mean[z]));
        let _ = writeln!(out, "sigma0 = {}", fmt_matrix(&model.initial.cov[z], n));
    }
    out
}
