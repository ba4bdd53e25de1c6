//! Dynamic fixed-point (block floating-point) tensors.
//!
//! A block of `b`-bit signed integers shares a single power-of-two scale
//! `e_scale`, the largest binary exponent found in the source tensor. Element
//! `q` represents `q * 2^(e_scale - b + 2)`. Values are kept in the symmetric
//! range `±(2^(b-1) - 1)`.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::FpTensor;

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 26;

/// Exponent reported for an exact zero.
pub const ZERO_EXPONENT: i32 = -127;

pub fn check_bits(bits: u32) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::BitWidth(bits))
    }
}

/// Largest magnitude a `bits`-wide element may hold.
pub fn max_magnitude(bits: u32) -> i64 {
    (1i64 << (bits - 1)) - 1
}

/// Exact `2^n` as an `f64` (normal range only).
pub fn pow2(n: i32) -> f64 {
    assert!((-1022..=1023).contains(&n), "2^{n} outside the f64 normal range");
    f64::from_bits(((n + 1023) as u64) << 52)
}

/// How a real value is rounded onto the integer grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RoundingMode {
    /// Round half away from zero.
    Nearest,
    /// Unbiased stochastic rounding driven by the given counter-based stream.
    Stochastic(u64),
}

impl RoundingMode {
    /// The per-element uniform source for this mode, if any.
    pub fn stream(&self) -> Option<ChaCha8Rng> {
        match *self {
            RoundingMode::Nearest => None,
            RoundingMode::Stochastic(id) => Some(ChaCha8Rng::seed_from_u64(id)),
        }
    }
}

/// Identity of a stochastic-rounding stream: (seed, tensor id, step index).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub tensor: u64,
    pub step: u64,
}

impl StreamKey {
    pub fn new(seed: u64, tensor: u64, step: u64) -> Self {
        Self { seed, tensor, step }
    }

    /// Stream id; distinct keys map to well-separated ids.
    pub fn id(&self) -> u64 {
        let mut h = mix64(self.seed ^ 0x243f_6a88_85a3_08d3);
        h = mix64(h ^ self.tensor.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        mix64(h ^ self.step.wrapping_mul(0xbf58_476d_1ce4_e5b9))
    }

    pub fn stochastic(&self) -> RoundingMode {
        RoundingMode::Stochastic(self.id())
    }
}

// splitmix64 finalizer
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A block of `bits`-wide integers sharing one power-of-two scale.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DfpTensor {
    values: Vec<i32>,
    scale: i32,
    bits: u32,
    shape: Vec<usize>,
}

impl DfpTensor {
    /// Builds a tensor from raw integers, validating the width and range.
    pub fn from_raw(values: Vec<i32>, scale: i32, bits: u32, shape: Vec<usize>) -> Result<Self> {
        check_bits(bits)?;
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::InvalidInput(format!(
                "{} values do not fill shape {:?}",
                values.len(),
                shape
            )));
        }
        let limit = max_magnitude(bits);
        if let Some(i) = values.iter().position(|&q| (q as i64).abs() > limit) {
            return Err(Error::InvalidInput(format!(
                "element {} = {} exceeds the {}-bit range",
                i, values[i], bits
            )));
        }
        Ok(Self {
            values,
            scale,
            bits,
            shape,
        })
    }

    pub fn zeros(bits: u32, shape: &[usize]) -> Result<Self> {
        Self::from_raw(vec![0; shape.iter().product()], 0, bits, shape.to_vec())
    }

    pub fn values(&self) -> &[i32] {
        &self.values
    }

    pub fn scale(&self) -> i32 {
        self.scale
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Exponent `t` of one integer unit: `e_scale - b + 2`.
    pub fn step_exponent(&self) -> i32 {
        self.scale - self.bits as i32 + 2
    }

    /// Real value of one integer unit.
    pub fn step(&self) -> f64 {
        pow2(self.step_exponent())
    }

    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn rows(&self) -> usize {
        match self.last_dim() {
            0 => 0,
            h => self.values.len() / h,
        }
    }

    /// Copies the listed rows into a new block with the same scale.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Self> {
        let h = self.last_dim();
        let n = self.rows();
        let mut values = Vec::with_capacity(rows.len() * h);
        for &r in rows {
            if r >= n {
                return Err(Error::Index { index: r, len: n });
            }
            values.extend_from_slice(&self.values[r * h..(r + 1) * h]);
        }
        Ok(Self {
            values,
            scale: self.scale,
            bits: self.bits,
            shape: vec![rows.len(), h],
        })
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.values.len() {
            return Err(Error::shape(&shape, &self.shape));
        }
        self.shape = shape;
        Ok(self)
    }
}

/// Wide integer buffer: element `i` represents `values[i] * 2^step_exponent`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WideAccumulator {
    pub values: Vec<i64>,
    pub step_exponent: i32,
    pub shape: Vec<usize>,
}

/// Headroom kept below `i64::MAX` so one further addition cannot wrap.
pub(crate) const WIDE_LIMIT: i128 = 1 << 62;

impl WideAccumulator {
    pub fn new(values: Vec<i64>, step_exponent: i32, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::InvalidInput(format!(
                "{} values do not fill shape {:?}",
                values.len(),
                shape
            )));
        }
        Ok(Self {
            values,
            step_exponent,
            shape,
        })
    }

    /// Narrows 128-bit intermediates, dropping low bits (nearest) until every
    /// magnitude is below 2^62.
    pub fn from_wide(values: Vec<i128>, step_exponent: i32, shape: Vec<usize>) -> Self {
        let max = values.iter().map(|v| v.unsigned_abs()).max().unwrap_or(0);
        let mut shift = 0u32;
        while (max >> shift) >= WIDE_LIMIT as u128 {
            shift += 1;
        }
        // one more bit in case rounding carries into 2^62
        if shift > 0 && (max + (1u128 << (shift - 1))) >> shift >= WIDE_LIMIT as u128 {
            shift += 1;
        }
        let values = values
            .into_iter()
            .map(|v| crate::kernels::shift_round(v, shift) as i64)
            .collect();
        Self {
            values,
            step_exponent: step_exponent + shift as i32,
            shape,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max_abs(&self) -> u64 {
        self.values.iter().map(|v| v.unsigned_abs()).max().unwrap_or(0)
    }

    /// Represented values in FP64 (each within half an FP64 ulp).
    pub fn to_f64(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|&v| scale_f64(v as f64, self.step_exponent))
            .collect()
    }
}

// `x * 2^e` without leaving the f64 normal range for intermediate powers.
fn scale_f64(x: f64, e: i32) -> f64 {
    let mut x = x;
    let mut e = e;
    while e > 1000 {
        x *= pow2(1000);
        e -= 1000;
    }
    while e < -1000 {
        x *= pow2(-1000);
        e += 1000;
    }
    x * pow2(e)
}

/// `floor(log2 |x|)`; zero maps to [`ZERO_EXPONENT`].
pub fn exponent_of(x: f32) -> Result<i32> {
    if !x.is_finite() {
        return Err(Error::InvalidInput(format!("exponent of non-finite {x}")));
    }
    if x == 0.0 {
        return Ok(ZERO_EXPONENT);
    }
    Ok(exponent_f64(x as f64))
}

// Every nonzero f32 (including subnormals) is normal as an f64.
fn exponent_f64(x: f64) -> i32 {
    (((x.to_bits() >> 52) & 0x7ff) as i32) - 1023
}

/// Round half away from zero.
pub fn round_nearest(x: f64) -> i64 {
    x.round() as i64
}

/// Rounds up with probability `frac(x)`, so `E[result] = x`.
pub fn stochastic_round<R: RngCore + ?Sized>(x: f64, rng: &mut R) -> i64 {
    let floor = x.floor();
    let frac = x - floor;
    let u: f64 = rng.gen();
    floor as i64 + i64::from(u < frac)
}

/// Maps an FP32 tensor onto a `bits`-wide dynamic fixed-point block.
pub fn map_to_dfp(f: &FpTensor, bits: u32, mode: RoundingMode) -> Result<DfpTensor> {
    check_bits(bits)?;
    f.check_finite()?;
    let scale = f
        .values()
        .iter()
        .filter(|v| **v != 0.0)
        .map(|&v| exponent_f64(v as f64))
        .max();
    let Some(scale) = scale else {
        return DfpTensor::zeros(bits, f.shape());
    };
    let inv_step = pow2(-(scale - bits as i32 + 2));
    let limit = max_magnitude(bits);
    let mut stream = mode.stream();
    let values = f
        .values()
        .iter()
        .map(|&v| {
            let x = v as f64 * inv_step;
            let q = match stream.as_mut() {
                None => round_nearest(x),
                Some(rng) => stochastic_round(x, rng),
            };
            q.clamp(-limit, limit) as i32
        })
        .collect();
    Ok(DfpTensor {
        values,
        scale,
        bits,
        shape: f.shape().to_vec(),
    })
}

/// Converts a block back to FP32: `q * 2^(e_scale - b + 2)`.
///
/// Exact whenever `|q| < 2^24`, which covers every block produced by
/// [`map_to_dfp`].
pub fn inverse_map(q: &DfpTensor) -> FpTensor {
    let step = q.step_exponent();
    let values = q
        .values
        .iter()
        .map(|&v| scale_f64(v as f64, step) as f32)
        .collect();
    FpTensor::new(values, q.shape.clone()).expect("shape already validated")
}

/// Converts a wide accumulator to FP32, rounding each value to nearest.
pub fn inverse_map_wide(w: &WideAccumulator) -> Result<FpTensor> {
    let mut out = Vec::with_capacity(w.values.len());
    for (index, &v) in w.values.iter().enumerate() {
        // i64 -> f32 rounds once; the power-of-two scaling is then exact.
        let x = scale_f64(v as f32 as f64, w.step_exponent);
        if x.abs() > f32::MAX as f64 {
            return Err(Error::Range { index });
        }
        out.push(x as f32);
    }
    FpTensor::new(out, w.shape.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub max_abs_err: f64,
    pub mean_err: f64,
    pub var_err: f64,
    pub step: f64,
}

/// Statistics of `inverse_map(q) - f` over all elements.
pub fn quant_error_stats(f: &FpTensor, q: &DfpTensor) -> Result<ErrorStats> {
    if f.shape() != q.shape() {
        return Err(Error::shape(f.shape(), q.shape()));
    }
    let step = q.step();
    let deltas: Vec<f64> = f
        .values()
        .iter()
        .zip(&q.values)
        .map(|(&x, &v)| v as f64 * step - x as f64)
        .collect();
    let n = deltas.len().max(1) as f64;
    let mean = deltas.iter().sum::<f64>() / n;
    let var = deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
    let max_abs = deltas.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    Ok(ErrorStats {
        max_abs_err: max_abs,
        mean_err: mean,
        var_err: var,
        step,
    })
}
