use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("grid too coarse for observation density: observations {first} and {second} both snap to node {node}")]
    GridTooCoarse {
        first: usize,
        second: usize,
        node: usize,
    },

    #[error("grid too coarse for observation density: observation {index} at t={time} snaps to the initial node")]
    GridTooCoarseAtStart { index: usize, time: f64 },

    #[error("observation time {time} outside (0, {horizon}]")]
    ObservationOutOfRange { time: f64, horizon: f64 },

    #[error("observation times not strictly increasing at index {0}")]
    UnorderedObservations(usize),

    #[error("matrix not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("covariance lost positive definiteness at node {node}, mode {mode} (min eigenvalue {min_eig:e})")]
    CovarianceNotPd {
        node: usize,
        mode: usize,
        min_eig: f64,
    },

    #[error("integration instability at node {node}: probability {value:e} (reduce the step size)")]
    NegativeProbability { node: usize, value: f64 },

    #[error("non-finite value in {what} at node {node}")]
    NonFinite { what: &'static str, node: usize },

    #[error("explicit scheme unstable: step {step:e} exceeds bound {required:e}")]
    Unstable { step: f64, required: f64 },

    #[error("density mass {mass:e} reaches the y-grid boundary at node {node} (widen the grid)")]
    BoundaryMass { node: usize, mass: f64 },

    #[error("k-means failed: {0}")]
    KMeans(String),

    #[error("model file line {line}, field `{field}`: {message}")]
    Parse {
        line: usize,
        field: String,
        message: String,
    },

    #[error("E-step failed at outer iteration {iteration}: {source}")]
    EStep {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, Error>;
