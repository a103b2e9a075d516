use thiserror::Error;

/// Errors raised by the compression, estimation, and training routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A rank, count, or scalar argument is outside its admissible range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Input data violates a value invariant (e.g. a NaN entry).
    #[error("invalid data: {0}")]
    Data(String),

    /// Operand shapes do not conform.
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    /// A matrix is numerically rank deficient where full rank is required.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// An operation precondition (such as orthonormal columns) does not hold.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Cached or stored state does not match the caller's view of it.
    #[error("consistency error: {0}")]
    Consistency(String),

    /// An iterative kernel failed to converge.
    #[error("no convergence: {0}")]
    NoConvergence(String),

    /// Non-finite activations, gradients, or loss during training.
    #[error("training fault: {0}")]
    TrainingFault(String),

    /// Observed activation storage disagrees with the closed-form ledger.
    #[error("reconciliation failed at row `{row}`: ledger {expected}, observed {observed}")]
    Reconciliation {
        row: String,
        expected: u64,
        observed: u64,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, expected: impl ToString, got: impl ToString) -> Error {
    Error::Shape {
        op,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
