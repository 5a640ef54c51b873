//! CSV artifacts. Every file has a header row; numbers carry 17 significant
//! digits so values round-trip exactly.

use std::fs::File;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use hybrid_vi::simulate::{JumpPath, StatePath};
use hybrid_vi::smoother::{VariationalControls, VariationalMarginals};
use hybrid_vi::{ObservationSet, TimeGrid};

pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// A header plus rows of numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(header: Vec<String>) -> Self {
        Self { header, rows: Vec::new() }
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| num(*v)))?;
        }
        w.flush().with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
        let header: Vec<String> = r.headers()?.iter().map(|h| h.trim().to_string()).collect();
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.with_context(|| format!("{} row {}", path.display(), i + 2))?;
            let row = rec
                .iter()
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| anyhow!("{} row {}: {e}", path.display(), i + 2))?;
            if row.len() != header.len() {
                bail!("{} row {}: expected {} fields, found {}", path.display(), i + 2, header.len(), row.len());
            }
            rows.push(row);
        }
        Ok(Self { header, rows })
    }
}

pub fn write_trajectory(path: &Path, grid: &TimeGrid, modes: &[usize], states: &StatePath) -> Result<()> {
    let n = states.dim;
    let mut header = vec!["t".to_string(), "z".to_string()];
    header.extend((1..=n).map(|i| format!("y_{i}")));
    let mut t = Table::new(header);
    for (k, y) in states.values.iter().enumerate() {
        let mut row = vec![grid.time(k), modes[k] as f64];
        row.extend(y);
        t.rows.push(row);
    }
    t.write(path)
}

/// Ground-truth trajectory: times, modes and states.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub modes: Vec<usize>,
    pub states: Vec<Vec<f64>>,
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let t = Table::read(path)?;
    if t.column("t") != Some(0) || t.column("z") != Some(1) || t.header.len() < 3 {
        bail!("{}: expected header `t, z, y_1..y_n`", path.display());
    }
    Ok(Trajectory {
        times: t.rows.iter().map(|r| r[0]).collect(),
        modes: t.rows.iter().map(|r| r[1] as usize).collect(),
        states: t.rows.iter().map(|r| r[2..].to_vec()).collect(),
    })
}

pub fn write_observations(path: &Path, obs: &ObservationSet) -> Result<()> {
    let n = obs.dim().unwrap_or(0);
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("x_{i}")));
    let mut t = Table::new(header);
    for (time, x) in obs.times().iter().zip(obs.values()) {
        let mut row = vec![*time];
        row.extend(x);
        t.rows.push(row);
    }
    t.write(path)
}

pub fn read_observations(path: &Path) -> Result<ObservationSet> {
    let t = Table::read(path)?;
    if t.column("t") != Some(0) || t.header.len() < 2 {
        bail!("{}: expected header `t, x_1..x_n`", path.display());
    }
    let times = t.rows.iter().map(|r| r[0]).collect();
    let values = t.rows.iter().map(|r| r[1..].to_vec()).collect();
    ObservationSet::new(times, values).with_context(|| format!("observations in {}", path.display()))
}

pub fn write_jumps(path: &Path, jumps: &JumpPath) -> Result<()> {
    let mut t = Table::new(vec!["t".into(), "z".into()]);
    t.rows.push(vec![0.0, jumps.z0 as f64]);
    for (time, z) in jumps.jump_times.iter().zip(&jumps.modes) {
        t.rows.push(vec![*time, *z as f64]);
    }
    t.write(path)
}

fn marginal_header(k: usize, n: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((1..=k).map(|z| format!("qZ_{z}")));
    for z in 1..=k {
        h.extend((1..=n).map(|i| format!("mu_{z}_{i}")));
    }
    for z in 1..=k {
        for r in 1..=n {
            h.extend((1..=n).map(|c| format!("sigma_{z}_{r}_{c}")));
        }
    }
    h
}

pub fn write_marginals(path: &Path, times: &[f64], m: &VariationalMarginals) -> Result<()> {
    let mut t = Table::new(marginal_header(m.modes, m.dim));
    for (node, time) in times.iter().enumerate() {
        let mut row = vec![*time];
        row.extend(m.q(node));
        for z in 0..m.modes {
            row.extend(m.mu(node, z));
        }
        for z in 0..m.modes {
            row.extend(m.sigma(node, z));
        }
        t.rows.push(row);
    }
    t.write(path)
}

pub fn read_marginals(path: &Path) -> Result<(Vec<f64>, VariationalMarginals)> {
    let t = Table::read(path)?;
    let k = t.header.iter().filter(|h| h.starts_with("qZ_")).count();
    let mu_cols = t.header.iter().filter(|h| h.starts_with("mu_")).count();
    if k == 0 || mu_cols % k != 0 {
        bail!("{}: not a marginals file", path.display());
    }
    let n = mu_cols / k;
    if t.header != marginal_header(k, n) {
        bail!("{}: unexpected marginals header", path.display());
    }
    let mut m = VariationalMarginals {
        modes: k,
        dim: n,
        nodes: t.rows.len(),
        q: Vec::new(),
        mu: Vec::new(),
        sigma: Vec::new(),
    };
    let mut times = Vec::with_capacity(t.rows.len());
    for row in &t.rows {
        times.push(row[0]);
        m.q.extend(&row[1..1 + k]);
        m.mu.extend(&row[1 + k..1 + k + k * n]);
        m.sigma.extend(&row[1 + k + k * n..]);
    }
    Ok((times, m))
}

fn controls_header(k: usize, n: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    for z in 1..=k {
        for r in 1..=n {
            h.extend((1..=n).map(|c| format!("A_{z}_{r}_{c}")));
        }
    }
    for z in 1..=k {
        h.extend((1..=n).map(|i| format!("b_{z}_{i}")));
    }
    for z in 1..=k {
        h.extend((1..=k).filter(|&w| w != z).map(|w| format!("rate_{z}_{w}")));
    }
    h
}

/// Per-interval controls plus a second file with the initial conditions.
pub fn write_controls(path: &Path, initial_path: &Path, grid: &TimeGrid, c: &VariationalControls) -> Result<()> {
    let (k, n) = (c.modes, c.dim);
    let mut t = Table::new(controls_header(k, n));
    for i in 0..c.intervals {
        let mut row = vec![grid.time(i)];
        for z in 0..k {
            row.extend(c.a(i, z));
        }
        for z in 0..k {
            row.extend(c.b(i, z));
        }
        for z in 0..k {
            row.extend((0..k).filter(|&w| w != z).map(|w| c.rate(i, z, w)));
        }
        t.rows.push(row);
    }
    t.write(path)?;

    let mut header = vec!["mode".to_string(), "q0".to_string()];
    header.extend((1..=n).map(|i| format!("mu0_{i}")));
    for r in 1..=n {
        header.extend((1..=n).map(|cc| format!("sigma0_{r}_{cc}")));
    }
    let mut init = Table::new(header);
    for z in 0..k {
        let mut row = vec![(z + 1) as f64, c.q0[z]];
        row.extend(c.mu0(z));
        row.extend(c.sigma0(z));
        init.rows.push(row);
    }
    init.write(initial_path)
}

pub fn read_controls(path: &Path, initial_path: &Path) -> Result<VariationalControls> {
    let init = Table::read(initial_path)?;
    let k = init.rows.len();
    let n = init.header.iter().filter(|h| h.starts_with("mu0_")).count();
    if k == 0 || n == 0 || init.header.len() != 2 + n + n * n {
        bail!("{}: not an initial-conditions file", initial_path.display());
    }
    let t = Table::read(path)?;
    if t.header != controls_header(k, n) {
        bail!("{}: controls header does not match {k} modes in dimension {n}", path.display());
    }
    let (nn, m) = (n * n, t.rows.len());
    let mut c = VariationalControls {
        modes: k,
        dim: n,
        intervals: m,
        a: Vec::with_capacity(m * k * nn),
        b: Vec::with_capacity(m * k * n),
        rates: Vec::with_capacity(m * k * k),
        q0: Vec::with_capacity(k),
        mu0: Vec::with_capacity(k * n),
        sigma0: Vec::with_capacity(k * nn),
    };
    for row in &t.rows {
        c.a.extend(&row[1..1 + k * nn]);
        c.b.extend(&row[1 + k * nn..1 + k * nn + k * n]);
        let mut off = row[1 + k * nn + k * n..].iter();
        for z in 0..k {
            let start = c.rates.len();
            for w in 0..k {
                c.rates.push(if w == z { 0.0 } else { *off.next().expect("header checked") });
            }
            let exit: f64 = c.rates[start..].iter().sum();
            c.rates[start + z] = -exit;
        }
    }
    for row in &init.rows {
        c.q0.push(row[1]);
        c.mu0.extend(&row[2..2 + n]);
        c.sigma0.extend(&row[2 + n..]);
    }
    Ok(c)
}

pub fn write_trace(path: &Path, name: &str, values: &[f64]) -> Result<()> {
    let mut t = Table::new(vec!["step".into(), name.into()]);
    t.rows = values.iter().enumerate().map(|(i, v)| vec![i as f64, *v]).collect();
    t.write(path)
}
