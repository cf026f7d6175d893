//! Crate-wide error type.

use crate::net::WeightSet;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A vector or matrix does not conform to the expected shape.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Width tuple violates the architecture invariants.
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    /// Argument outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Two networks cannot be composed (direct sum, reassembly).
    #[error("composition error: {0}")]
    Composition(String),

    /// Final-layer split with a group size that does not partition the layer.
    #[error("partition error: {0}")]
    Partition(String),

    /// An input with zero norm where a direction is required.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Optimization produced a non-finite loss; carries the last finite state.
    #[error("numeric divergence at epoch {epoch}")]
    NumericDivergence {
        epoch: usize,
        last_finite: Box<WeightSet>,
    },

    /// Normal equations too close to singular to solve reliably.
    #[error("singular system: {0}")]
    SingularSystem(String),

    /// Every extension candidate realized identically zero on the samples.
    #[error("degenerate search: {0}")]
    DegenerateSearch(String),

    /// Loss is zero, so the requested indicator is undefined.
    #[error("zero loss: {0}")]
    ZeroLoss(String),

    /// The part responses cancel completely; the stability constant is infinite.
    #[error("total cancellation: {0}")]
    TotalCancellation(String),

    /// Malformed run configuration or dataset file.
    #[error("config error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
