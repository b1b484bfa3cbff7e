use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("distance matrix is not symmetric at ({i}, {j})")]
    NonSymmetric { i: usize, j: usize },

    #[error("invalid distance at ({i}, {j}): {value}")]
    InvalidDistance { i: usize, j: usize, value: f64 },

    #[error("triangle inequality violated on ({i}, {j}, {k}): d(i,k) = {lhs} > d(i,j) + d(j,k) = {rhs}")]
    TriangleViolation {
        i: usize,
        j: usize,
        k: usize,
        lhs: f64,
        rhs: f64,
    },

    #[error("measure must be positive, got {value} at point {index}")]
    NonpositiveMeasure { index: usize, value: f64 },

    #[error("fewer than 3 usable dyadic scales ({found})")]
    InsufficientScales { found: usize },

    #[error("codimension exponent must lie in (0, p): Theta = {theta_cap}, p = {p}")]
    InvalidTheta { theta_cap: f64, p: f64 },

    #[error("extension domain has no interior nodes")]
    EmptyInterior,

    #[error("kernel is not symmetric at ({i}, {j})")]
    AsymmetricKernel { i: usize, j: usize },

    #[error("kernel must be positive off the diagonal, got {value} at ({i}, {j})")]
    NonpositiveKernel { i: usize, j: usize, value: f64 },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("weight exponent a = {a} must lie in (-1, 1)")]
    WeightOutOfRange { a: f64 },

    #[error("degenerate layer grading: {0}")]
    DegenerateGrading(String),

    #[error("dampening exponent too small: beta * p = {beta_p} must exceed Q_mu = {q_mu}")]
    BetaTooSmall { beta_p: f64, q_mu: f64 },

    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("anisotropic structure requires coordinates on every node")]
    MissingCoords,

    #[error("matrix at node {node} is not symmetric positive definite")]
    NotSpd { node: usize },

    #[error("boundary data has nonzero mean {mean} (tolerance {tol})")]
    NonzeroMean { mean: f64, tol: f64 },

    #[error("solver did not converge after {iterations} iterations (residual {residual:e}, target {target:e})")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        target: f64,
    },

    #[error("node {node} lies in a component without boundary nodes")]
    DisconnectedComponentWithoutBoundary { node: usize },

    #[error("domain graph is disconnected (node {node} unreachable)")]
    Disconnected { node: usize },

    #[error("operation requires p = 2, got p = {p}")]
    RequiresP2 { p: f64 },

    #[error("regression needs at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("no admissible balls for the Harnack test")]
    NoAdmissibleBalls,

    #[error("solution infimum is not positive on ball centered at node {center} with radius {radius}")]
    ZeroInfimum { center: usize, radius: f64 },

    #[error("data is negative at boundary point {index} inside the tested region")]
    NegativeData { index: usize },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
