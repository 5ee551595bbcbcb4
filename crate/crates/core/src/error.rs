use thiserror::Error;

use crate::reflected::GridPath;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} out of domain: {value}")]
    Domain { what: &'static str, value: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("ODE step {dt} too large: iterate went negative near t={t}")]
    StepTooLarge { dt: f64, t: f64 },

    /// The step budget ran out before the boundary local time reached its
    /// target. Carries the partial path so the caller can inspect how far it got.
    #[error("step budget of {max_steps} exhausted at local time {local_time} (target {target})")]
    MaxStepsExceeded {
        max_steps: usize,
        local_time: f64,
        target: f64,
        partial: Box<GridPath>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub(crate) fn domain(what: &'static str, value: f64) -> Error {
    Error::Domain { what, value }
}
