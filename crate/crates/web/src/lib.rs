//! Browser front end for `hybrid-vi`: simulate a switching diffusion,
//! smooth it variationally, and solve the exact smoothing equations on a
//! grid for comparison. Models use the library's TOML model format;
//! results are JSON strings.
//!
//! The functions below are plain Rust so they can be tested natively; the
//! `wasm` module wraps them for JavaScript.

use hybrid_vi::model::{HybridModel, ObservationSet, TimeGrid};
use hybrid_vi::modelfile::parse_model;
use hybrid_vi::oracle::{gfpe_smoother, stable_substeps, YGrid};
use hybrid_vi::simulate::{mix_seed, observe, sample_hybrid, sample_observation_times, thin_to_grid};
use hybrid_vi::smoother::{smooth, SmoothOptions};
use serde::{Deserialize, Serialize};

/// Observation times with one value vector per time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observations {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Simulation {
    pub times: Vec<f64>,
    /// Zero-based mode at every grid node.
    pub modes: Vec<usize>,
    pub states: Vec<Vec<f64>>,
    pub observations: Observations,
}

/// Per-node posterior summary shared by the variational and exact
/// smoothers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub times: Vec<f64>,
    /// Mode probabilities, one vector per node.
    pub q: Vec<Vec<f64>>,
    /// Mean of the first state coordinate.
    pub mean: Vec<f64>,
    /// Standard deviation of the first state coordinate.
    pub sd: Vec<f64>,
    /// Variational objective or exact log evidence.
    pub log_evidence: f64,
    pub converged: bool,
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn model_and_grid(model_toml: &str, horizon: f64, step: f64) -> Result<(HybridModel, TimeGrid), String> {
    let model = parse_model(model_toml).map_err(err)?.model;
    let grid = TimeGrid::new(horizon, step).map_err(err)?;
    Ok((model, grid))
}

fn observation_set(obs_json: &str) -> Result<ObservationSet, String> {
    let obs: Observations = serde_json::from_str(obs_json).map_err(|e| format!("observations: {e}"))?;
    ObservationSet::new(obs.times, obs.values).map_err(err)
}

/// Draws a path of the model and noisy observations at Poisson times with
/// the given rate, snapped to the grid.
pub fn simulate_json(model_toml: &str, horizon: f64, step: f64, obs_rate: f64, seed: u64) -> Result<String, String> {
    let (model, grid) = model_and_grid(model_toml, horizon, step)?;
    if !(obs_rate > 0.0) {
        return Err("observation rate must be positive".into());
    }
    let (jumps, path) = sample_hybrid(&model, &grid, 10, seed).map_err(err)?;
    let times = thin_to_grid(&sample_observation_times(obs_rate, horizon, mix_seed(seed, 10)), &grid);
    let obs = observe(&path, &grid, &times, &model.obs_cov, mix_seed(seed, 11)).map_err(err)?;
    let sim = Simulation {
        times: grid.times(),
        modes: jumps.on_grid(&grid),
        states: path.values,
        observations: Observations {
            times: obs.times().to_vec(),
            values: obs.values().to_vec(),
        },
    };
    serde_json::to_string(&sim).map_err(err)
}

/// Variational smoothing with the model held fixed.
pub fn smooth_json(model_toml: &str, obs_json: &str, horizon: f64, step: f64) -> Result<String, String> {
    let (model, grid) = model_and_grid(model_toml, horizon, step)?;
    let obs = observation_set(obs_json)?;
    let r = smooth(&model, &obs, &grid, &SmoothOptions::default()).map_err(err)?;
    let m = &r.marginals;
    let post = Posterior {
        times: grid.times(),
        q: (0..m.nodes).map(|k| m.q(k).to_vec()).collect(),
        mean: (0..m.nodes).map(|k| m.mixture_mean(k)[0]).collect(),
        sd: (0..m.nodes).map(|k| m.mixture_cov(k)[0].max(0.0).sqrt()).collect(),
        log_evidence: r.breakdown.total,
        converged: r.converged,
    };
    serde_json::to_string(&post).map_err(err)
}

/// Grid solution of the exact smoothing equations; one-dimensional state
/// only. The grid covers every set point and observation with a margin of
/// six stationary standard deviations.
pub fn exact_json(model_toml: &str, obs_json: &str, horizon: f64, step: f64, points: usize) -> Result<String, String> {
    let (model, grid) = model_and_grid(model_toml, horizon, step)?;
    if model.state_dim != 1 {
        return Err("the exact smoother supports 1D only".into());
    }
    let obs = observation_set(obs_json)?;
    let mut centres: Vec<f64> = model.drift.iter().filter_map(|d| d.beta().map(|b| b[0])).collect();
    centres.extend(obs.values().iter().map(|x| x[0]));
    centres.extend(model.initial.mean.iter().map(|m| m[0]));
    let mut sd = model.obs_cov[0].sqrt();
    for z in 0..model.num_modes() {
        let a = model.drift[z].a[0];
        if a < 0.0 {
            sd = sd.max((model.dispersion[z][0] / (-2.0 * a)).sqrt());
        }
        sd = sd.max(model.initial.cov[z][0].sqrt());
    }
    let ygrid = YGrid::covering(&centres, 6.0 * sd, points).map_err(err)?;
    let substeps = stable_substeps(&model, &ygrid, &grid).map_err(err)?;
    let out = gfpe_smoother(&model, &obs, &ygrid, &grid, substeps).map_err(err)?;
    let d = &out.smoothed;
    let moments: Vec<(f64, f64)> = (0..d.nodes()).map(|k| d.moments(k)).collect();
    let post = Posterior {
        times: d.times.clone(),
        q: (0..d.nodes()).map(|k| d.mode_marginal(k)).collect(),
        mean: moments.iter().map(|m| m.0).collect(),
        sd: moments.iter().map(|m| m.1.max(0.0).sqrt()).collect(),
        log_evidence: out.log_evidence,
        converged: true,
    };
    serde_json::to_string(&post).map_err(err)
}

#[cfg(target_arch = "wasm32")]
mod wasm {
    use wasm_bindgen::prelude::*;

    fn js(r: Result<String, String>) -> Result<String, JsError> {
        r.map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen]
    pub fn simulate(model_toml: &str, horizon: f64, step: f64, obs_rate: f64, seed: u32) -> Result<String, JsError> {
        js(super::simulate_json(model_toml, horizon, step, obs_rate, seed as u64))
    }

    #[wasm_bindgen]
    pub fn smooth(model_toml: &str, obs_json: &str, horizon: f64, step: f64) -> Result<String, JsError> {
        js(super::smooth_json(model_toml, obs_json, horizon, step))
    }

    #[wasm_bindgen]
    pub fn exact(model_toml: &str, obs_json: &str, horizon: f64, step: f64, points: u32) -> Result<String, JsError> {
        js(super::exact_json(model_toml, obs_json, horizon, step, points as usize))
    }
}
