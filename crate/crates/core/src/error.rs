//! Error taxonomy shared across the pipeline.

use thiserror::Error;

/// Errors surfaced by any stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input file (header, CSV layout, image magic, ...).
    #[error("parse error: {0}")]
    Parse(String),

    /// Input data violates an operation's precondition.
    #[error("data error: {0}")]
    Data(String),

    /// Configuration is inconsistent or incomplete.
    #[error("config error: {0}")]
    Config(String),

    /// A non-finite value appeared during numeric work.
    /// `tensor` names the offending parameter or gradient when known.
    #[error("numerics error{}: {msg}", tensor.as_deref().map(|t| format!(" in `{t}`")).unwrap_or_default())]
    Numerics {
        tensor: Option<String>,
        msg: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numerics(tensor: Option<&str>, msg: impl Into<String>) -> Self {
        Error::Numerics {
            tensor: tensor.map(str::to_owned),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numerics_message_names_tensor() {
        let e = Error::numerics(Some("dec.head.w"), "gradient is NaN");
        assert_eq!(
            e.to_string(),
            "numerics error in `dec.head.w`: gradient is NaN"
        );
        let e = Error::numerics(None, "loss is inf");
        assert_eq!(e.to_string(), "numerics error: loss is inf");
    }
}
