//! Integer-arithmetic layers with FP32 master parameters.
//!
//! Each layer maps its inputs and parameters to dynamic fixed-point, computes
//! in integers, and returns FP32 tensors. Forward passes cache the integer
//! operands needed by the backward pass; a backward call consumes the cache.

mod embedding;
mod layernorm;
mod linear;

pub use embedding::IntEmbedding;
pub use layernorm::{IntLayerNorm, LayerNormGrads};
pub use linear::{IntLinear, LinearGrads};

use serde::{Deserialize, Serialize};

use crate::dfp::{check_bits, RoundingMode, StreamKey};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoundingPolicy {
    Nearest,
    Stochastic,
}

/// Which tensor of a layer a rounding stream belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Slot {
    Gradient = 0,
    Input = 1,
    Weight = 2,
    Bias = 3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub b_weights: u32,
    pub b_activations: u32,
    pub b_gradients: u32,
    pub forward_rounding: RoundingPolicy,
    pub backward_rounding: RoundingPolicy,
    pub seed: u64,
    /// Requantize linear outputs to `b_activations` before handing them on.
    pub chain_integer: bool,
}

impl QuantConfig {
    /// Same width everywhere; nearest forward, stochastic backward.
    pub fn uniform(bits: u32, seed: u64) -> Self {
        Self {
            b_weights: bits,
            b_activations: bits,
            b_gradients: bits,
            forward_rounding: RoundingPolicy::Nearest,
            backward_rounding: RoundingPolicy::Stochastic,
            seed,
            chain_integer: false,
        }
    }

    pub fn with_activation_bits(mut self, bits: u32) -> Self {
        self.b_activations = bits;
        self
    }

    pub fn with_backward_rounding(mut self, policy: RoundingPolicy) -> Self {
        self.backward_rounding = policy;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.b_weights)?;
        check_bits(self.b_activations)?;
        check_bits(self.b_gradients)
    }

    pub(crate) fn forward_mode(&self, layer: u64, slot: Slot, step: u64) -> RoundingMode {
        self.mode(self.forward_rounding, layer, slot, step)
    }

    /// Rounding applied to gradients of layer `layer` at `step`.
    pub fn backward_mode(&self, layer: u64, step: u64) -> RoundingMode {
        self.mode(self.backward_rounding, layer, Slot::Gradient, step)
    }

    fn mode(&self, policy: RoundingPolicy, layer: u64, slot: Slot, step: u64) -> RoundingMode {
        match policy {
            RoundingPolicy::Nearest => RoundingMode::Nearest,
            RoundingPolicy::Stochastic => {
                StreamKey::new(self.seed, layer * 4 + slot as u64, step).stochastic()
            }
        }
    }
}

/// Flattens `[.., h]` to `[rows, h]`.
pub(crate) fn as_matrix(shape: &[usize]) -> (usize, usize) {
    let h = shape.last().copied().unwrap_or(1);
    let rows = if h == 0 {
        0
    } else {
        shape.iter().product::<usize>() / h
    };
    (rows, h)
}
