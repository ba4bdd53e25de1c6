//! Integer (dynamic fixed-point) training primitives.
//!
//! * [`dfp`]: block floating-point tensors and the float/integer mappings.
//! * [`kernels`]: exact integer matmul, reductions and requantization.
//! * [`layers`]: integer linear, layer-norm and embedding layers with FP32
//!   master parameters.

pub mod dfp;
pub mod error;
pub mod kernels;
pub mod layers;
pub mod tensor;

pub use dfp::{
    exponent_of, inverse_map, inverse_map_wide, map_to_dfp, quant_error_stats, stochastic_round,
    DfpTensor, ErrorStats, RoundingMode, StreamKey, WideAccumulator,
};
pub use error::{Error, Result};
pub use tensor::FpTensor;
