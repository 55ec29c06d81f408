use thiserror::Error;

/// Errors raised by the simulation and calibration library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("degenerate norm: column {column} has zero L2 norm")]
    DegenerateNorm { column: usize },

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Training { epoch: usize, step: usize, loss: f64 },

    #[error("calibration of layer {layer} failed at epoch {epoch}: loss = {loss}")]
    Calibration { layer: usize, epoch: usize, loss: f64 },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    /// Wraps this error with the index of the layer that produced it.
    pub fn at_layer(self, layer: usize) -> Self {
        match self {
            e @ Error::Layer { .. } => e,
            e => Error::Layer { layer, source: Box::new(e) },
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
