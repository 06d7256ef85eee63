//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Mismatched dimensions or otherwise invalid configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// One or more points fell below the minimum camera-frame depth.
    /// Carries the indices of the offending points.
    #[error("depth violation: {} point(s) in front of or behind the near plane, first index {}", indices.len(), indices.first().copied().unwrap_or(0))]
    DepthViolation { indices: Vec<usize> },

    /// A facet with (near-)zero area where a proper triangle is required.
    #[error("degenerate facet {index}: area {area:.3e} below threshold")]
    DegenerateFacet { index: usize, area: f64 },

    /// An observation set required by an active loss is empty.
    #[error("empty observation: {0}")]
    EmptyObservation(&'static str),

    /// The optimizer left the finite regime. Carries the last finite state.
    #[error("divergence at iteration {iteration}: loss {loss:.3e}")]
    Divergence {
        iteration: usize,
        loss: f64,
        last_params: Vec<f64>,
    },

    /// Text format parse failure with a 1-based line number.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Unknown configuration key; lists the accepted keys.
    #[error("unknown config key `{key}`; valid keys: {}", valid.join(", "))]
    UnknownKey { key: String, valid: Vec<&'static str> },

    /// Scene sampling exhausted its resampling budget.
    #[error("scene generation failed: {0}")]
    SceneGen(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: msg.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
