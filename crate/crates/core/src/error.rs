use thiserror::Error;

use crate::tensor::Shape;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {left} and {right}")]
    Dimension { op: &'static str, left: Shape, right: Shape },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("prototype undefined for classes {0:?}: no examples")]
    EmptyClasses(Vec<usize>),

    #[error("non-finite {term} loss at step {step}")]
    NonFinite { step: usize, term: &'static str },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Configuration problems are detectable before any work starts.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Format { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
