use alloc::string::String;
use core::fmt;

/// Errors surfaced by tensor ops, model construction, and training.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Incompatible shapes for an operation; carries both shapes rendered as text.
    ShapeMismatch { op: &'static str, detail: String },
    /// A contract on input values was violated (unnormalized targets, bad ids, ...).
    Contract { op: &'static str, detail: String },
    /// A non-finite value (NaN/Inf) was produced where finiteness is required.
    NonFinite { context: String },
    /// Backward invoked on a non-scalar node.
    NonScalarRoot { shape: String },
    /// A second backward pass over an already-consumed tape.
    TapeConsumed,
    /// Refusal to materialize an oversized explicit Kronecker product.
    KroneckerTooLarge { dim: usize, cap: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, detail } => write!(f, "shape mismatch in {op}: {detail}"),
            Error::Contract { op, detail } => write!(f, "contract violation in {op}: {detail}"),
            Error::NonFinite { context } => write!(f, "non-finite value detected: {context}"),
            Error::NonScalarRoot { shape } => {
                write!(f, "backward requires a scalar root, got shape {shape}")
            }
            Error::TapeConsumed => write!(f, "backward already ran on this tape"),
            Error::KroneckerTooLarge { dim, cap } => {
                write!(f, "refusing to materialize Kronecker product: dim {dim} exceeds cap {cap}")
            }
        }
    }
}

#[cfg(test)]
impl std::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
