use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f32 },

    #[error("bit width {0} outside [2, 26]")]
    BitWidth(u32),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("reduction length {k} exceeds the 64-bit accumulation guard for {bits_a}x{bits_b}-bit operands (max {max_k})")]
    OverflowGuard {
        k: usize,
        bits_a: u32,
        bits_b: u32,
        max_k: u64,
    },

    #[error("value at index {index} overflows the FP32 range")]
    Range { index: usize },

    #[error("division by zero")]
    DivisionByZero,

    #[error("index {index} out of bounds for table of {len} rows")]
    Index { index: usize, len: usize },

    #[error("state error: {0}")]
    State(&'static str),
}

impl Error {
    pub(crate) fn shape(expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
