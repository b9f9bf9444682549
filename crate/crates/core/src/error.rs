use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("invalid shape {rows}x{cols}: {reason}")]
    InvalidShape {
        rows: usize,
        cols: usize,
        reason: &'static str,
    },
    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },
    #[error("degenerate data: {0}")]
    Degenerate(&'static str),
    #[error("corrupt sparse encoding: {0}")]
    Corrupt(String),
    #[error("hessian is not positive definite after damping {damp}; retry with a larger damp")]
    SingularHessian { damp: f64 },
    #[error("non-finite loss at step {step} (first non-finite tensor: {layer})")]
    NonFiniteLoss { step: usize, layer: String },
    #[error("sequence of length {len} exceeds the maximum context of {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("data source `{0}` has an empty token stream")]
    EmptySource(String),
    #[error("mode {mode} requires {missing}")]
    ModeMismatch {
        mode: &'static str,
        missing: &'static str,
    },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    ) -> Self {
        Error::ShapeMismatch {
            op,
            left_rows: left.0,
            left_cols: left.1,
            right_rows: right.0,
            right_cols: right.1,
        }
    }
}
