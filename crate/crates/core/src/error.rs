//! Error type shared by every module in the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside the mathematical domain of an operation
    /// (correlation outside (-1, 1), uniform outside (0, 1), bad index, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A numerical routine failed after its retry policy was exhausted.
    /// Carries the latent point that triggered the failure when one exists,
    /// so a diverging optimizer run can be diagnosed from the message alone.
    #[error("numerical failure: {what}{}", fmt_phi(.phi))]
    Numerical { what: String, phi: Option<Vec<f64>> },

    /// Malformed input file; `line` is 1-based and counts the header.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Inconsistent or incomplete run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// The optimizer produced a non-finite variational parameter. The state
    /// dump identifies the iteration and the offending coordinate.
    #[error("optimizer diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn fmt_phi(phi: &Option<Vec<f64>>) -> String {
    match phi {
        Some(v) => format!(" at phi = {v:?}"),
        None => String::new(),
    }
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn numerical(what: impl Into<String>, phi: Option<&[f64]>) -> Self {
        Error::Numerical {
            what: what.into(),
            phi: phi.map(|p| p.to_vec()),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
