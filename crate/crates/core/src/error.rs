use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("fixed point did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },

    #[error("non-finite value on path {path} at node {node}")]
    NonFinite { path: usize, node: usize },

    #[error("degenerate direction: integral of V^2 = {value:.3e} is below the floor {floor:.3e}")]
    DegenerateDirection { value: f64, floor: f64 },

    #[error("ill-conditioned system (condition estimate {0:.3e})")]
    IllConditioned(f64),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
