use std::path::PathBuf;

/// Errors raised by the numerical pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("conductivity not admissible: {0}")]
    NotAdmissible(String),

    #[error("point {point:?} is {distance:.3e} from the coil surface (minimum clearance {clearance:.3e})")]
    TooCloseToCoil {
        point: [f64; 3],
        distance: f64,
        clearance: f64,
    },

    #[error("evaluation point {0:?} lies inside the conductor")]
    PointInsideDomain([f64; 3]),

    #[error("{solver} did not converge in {iterations} iterations (relative residual {residual:.3e})")]
    NotConverged {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("padding too small: {0}")]
    PaddingTooSmall(String),

    #[error("measurement geometry: {0}")]
    Geometry(String),

    #[error("config: {0}")]
    Config(String),

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
