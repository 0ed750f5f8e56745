use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("{op}: dimension mismatch, expected {expected:?}, got {got:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged: non-finite gradient in layer `{layer}`")]
    Divergence { layer: String },

    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    #[error("malformed parameter data: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, NumError>;

pub(crate) fn shape_err<T>(op: &'static str, expected: &[usize], got: &[usize]) -> Result<T> {
    Err(NumError::Shape {
        op,
        expected: expected.to_vec(),
        got: got.to_vec(),
    })
}
