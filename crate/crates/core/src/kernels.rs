//! Integer compute primitives: matmul with scale addition, row reductions,
//! integer square root, fixed-point division and requantization.
//!
//! Every accumulation is exact. Paths that could exceed 64 bits are either
//! rejected up front (matmul) or carried in 128 bits and narrowed with
//! [`WideAccumulator::from_wide`].

use rand::RngCore;

use crate::dfp::{check_bits, max_magnitude, DfpTensor, RoundingMode, WideAccumulator, WIDE_LIMIT};
use crate::error::{Error, Result};

/// Fraction bits carried by layer-norm statistics.
pub const STAT_FRAC_BITS: u32 = 16;

/// Shape of a single integer matmul `op(A) * op(B)` with `op(A)` of shape
/// `m x k` and `op(B)` of shape `k x n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub transpose_a: bool,
    pub transpose_b: bool,
    bits_a: u32,
    bits_b: u32,
}

/// Largest reduction length for which `k` products of `bits_a` x `bits_b`
/// operands stay below 2^62.
pub fn max_reduction_len(bits_a: u32, bits_b: u32) -> u64 {
    let exp = 64i64 - bits_a as i64 - bits_b as i64;
    if exp >= 63 {
        u64::MAX
    } else {
        1u64 << exp.max(0)
    }
}

impl MatmulPlan {
    pub fn new(
        m: usize,
        k: usize,
        n: usize,
        transpose_a: bool,
        transpose_b: bool,
        bits_a: u32,
        bits_b: u32,
    ) -> Result<Self> {
        check_bits(bits_a)?;
        check_bits(bits_b)?;
        if m == 0 || k == 0 || n == 0 {
            return Err(Error::InvalidInput(format!(
                "matmul dimensions must be positive, got {m}x{k}x{n}"
            )));
        }
        let max_k = max_reduction_len(bits_a, bits_b);
        if k as u64 > max_k {
            return Err(Error::OverflowGuard {
                k,
                bits_a,
                bits_b,
                max_k,
            });
        }
        Ok(Self {
            m,
            k,
            n,
            transpose_a,
            transpose_b,
            bits_a,
            bits_b,
        })
    }

    /// Infers `m, k, n` from two rank-2 operands.
    pub fn for_operands(
        a: &DfpTensor,
        b: &DfpTensor,
        transpose_a: bool,
        transpose_b: bool,
    ) -> Result<Self> {
        let (ar, ac) = dims2(a.shape())?;
        let (br, bc) = dims2(b.shape())?;
        let (m, ka) = if transpose_a { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if transpose_b { (bc, br) } else { (br, bc) };
        if ka != kb {
            return Err(Error::InvalidInput(format!(
                "inner dimensions disagree: {ka} vs {kb}"
            )));
        }
        Self::new(m, ka, n, transpose_a, transpose_b, a.bits(), b.bits())
    }

    fn a_shape(&self) -> [usize; 2] {
        if self.transpose_a {
            [self.k, self.m]
        } else {
            [self.m, self.k]
        }
    }

    fn b_shape(&self) -> [usize; 2] {
        if self.transpose_b {
            [self.n, self.k]
        } else {
            [self.k, self.n]
        }
    }
}

fn dims2(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => Err(Error::InvalidInput(format!(
            "expected a rank-2 tensor, got shape {shape:?}"
        ))),
    }
}

/// `op(A) * op(B)` in 64-bit integers. The output step exponent is the sum of
/// the operand step exponents.
pub fn int_matmul(a: &DfpTensor, b: &DfpTensor, plan: &MatmulPlan) -> Result<WideAccumulator> {
    if a.shape() != plan.a_shape() {
        return Err(Error::shape(&plan.a_shape(), a.shape()));
    }
    if b.shape() != plan.b_shape() {
        return Err(Error::shape(&plan.b_shape(), b.shape()));
    }
    if a.bits() > plan.bits_a || b.bits() > plan.bits_b {
        return Err(Error::InvalidInput(
            "operand wider than the plan's bit widths".into(),
        ));
    }
    let MatmulPlan { m, k, n, .. } = *plan;

    // Lay both operands out so the reduction runs over contiguous memory.
    let a_rows: Vec<i64> = if plan.transpose_a {
        transpose(a.values(), k, m)
    } else {
        a.values().iter().map(|&v| v as i64).collect()
    };
    let b_cols: Vec<i64> = if plan.transpose_b {
        b.values().iter().map(|&v| v as i64).collect()
    } else {
        transpose(b.values(), k, n)
    };

    let mut out = vec![0i64; m * n];
    for (i, row) in out.chunks_mut(n).enumerate() {
        let ar = &a_rows[i * k..(i + 1) * k];
        for (j, c) in row.iter_mut().enumerate() {
            let bc = &b_cols[j * k..(j + 1) * k];
            *c = ar.iter().zip(bc).map(|(x, y)| x * y).sum();
        }
    }
    WideAccumulator::new(
        out,
        a.step_exponent() + b.step_exponent(),
        vec![m, n],
    )
}

fn transpose(v: &[i32], rows: usize, cols: usize) -> Vec<i64> {
    let mut out = vec![0i64; v.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = v[r * cols + c] as i64;
        }
    }
    out
}

/// `X^T * G`, the weight-gradient product of a linear layer.
pub fn int_matmul_grad_w(x: &DfpTensor, g: &DfpTensor) -> Result<WideAccumulator> {
    let plan = MatmulPlan::for_operands(x, g, true, false)?;
    int_matmul(x, g, &plan)
}

/// Sum over rows: `[rows x h] -> [h]`, exact in 64 bits.
pub fn column_sum(q: &DfpTensor) -> Result<WideAccumulator> {
    let h = q.last_dim();
    let rows = q.rows();
    if rows as u64 > max_reduction_len(q.bits(), 2) {
        return Err(Error::OverflowGuard {
            k: rows,
            bits_a: q.bits(),
            bits_b: 2,
            max_k: max_reduction_len(q.bits(), 2),
        });
    }
    let mut out = vec![0i64; h];
    for row in q.values().chunks(h.max(1)) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v as i64;
        }
    }
    WideAccumulator::new(out, q.step_exponent(), vec![h])
}

/// Right shift by `s` bits rounding half away from zero.
pub fn shift_round(v: i128, s: u32) -> i128 {
    if s == 0 {
        return v;
    }
    if s >= 127 {
        return 0;
    }
    let half = 1i128 << (s - 1);
    let mag = (v.unsigned_abs() as i128 + half) >> s;
    if v < 0 {
        -mag
    } else {
        mag
    }
}

/// `num / den` rounded half away from zero; `den > 0`.
pub(crate) fn div_round(num: i128, den: i128) -> i128 {
    debug_assert!(den > 0);
    let mag = (2 * num.unsigned_abs() + den as u128) / (2 * den as u128);
    if num < 0 {
        -(mag as i128)
    } else {
        mag as i128
    }
}

/// Re-expresses a wide accumulator as a `bits`-wide block with a fresh scale,
/// using integer shifts only.
pub fn requantize(w: &WideAccumulator, bits: u32, mode: RoundingMode) -> Result<DfpTensor> {
    check_bits(bits)?;
    let max = w.max_abs();
    if max == 0 {
        return DfpTensor::zeros(bits, &w.shape);
    }
    let top = 63 - max.leading_zeros() as i32; // floor(log2 max)
    let scale = top + w.step_exponent;
    let shift = top - bits as i32 + 2;
    let limit = max_magnitude(bits);
    let mut stream = mode.stream();
    let values = w
        .values
        .iter()
        .map(|&v| {
            let q = if shift <= 0 {
                (v as i128) << (-shift)
            } else {
                let s = shift as u32;
                match stream.as_mut() {
                    None => shift_round(v as i128, s),
                    Some(rng) => stochastic_shift(v, s, rng),
                }
            };
            q.clamp(-(limit as i128), limit as i128) as i32
        })
        .collect();
    DfpTensor::from_raw(values, scale, bits, w.shape.clone())
}

// floor(v / 2^s) plus one with probability (v mod 2^s) / 2^s.
fn stochastic_shift(v: i64, s: u32, rng: &mut impl RngCore) -> i128 {
    debug_assert!((1..64).contains(&s));
    let r = rng.next_u64();
    let floor = (v >> s) as i128;
    let rem = (v as u64) & ((1u64 << s) - 1);
    let u = r >> (64 - s);
    floor + i128::from(u < rem)
}

/// Per-row mean over the last dimension with [`STAT_FRAC_BITS`] extra fraction
/// bits: `round(sum(q) * 2^16 / H)` at step `t - 16`.
pub fn int_mean(q: &DfpTensor) -> Result<WideAccumulator> {
    let h = q.last_dim();
    if h == 0 {
        return Err(Error::InvalidInput("mean over an empty dimension".into()));
    }
    let rows = q.rows();
    let values = q
        .values()
        .chunks(h)
        .map(|row| {
            let sum: i128 = row.iter().map(|&v| v as i128).sum();
            div_round(sum << STAT_FRAC_BITS, h as i128) as i64
        })
        .collect();
    WideAccumulator::new(
        values,
        q.step_exponent() - STAT_FRAC_BITS as i32,
        vec![rows],
    )
}

/// Per-row population variance `sum((q * 2^16 - mu)^2) / H`.
///
/// The nominal step exponent is `2t - 32`. Rows of wide (b > 15) blocks can
/// exceed 2^62 there; the result is then narrowed by an even number of bits
/// so the step stays even and [`isqrt`] of it has an integral step.
pub fn int_variance(q: &DfpTensor, mu: &WideAccumulator) -> Result<WideAccumulator> {
    let h = q.last_dim();
    if h == 0 {
        return Err(Error::InvalidInput("variance over an empty dimension".into()));
    }
    let rows = q.rows();
    if mu.len() != rows {
        return Err(Error::shape(&[rows], &mu.shape));
    }
    let mut wide = Vec::with_capacity(rows);
    for (row, &m) in q.values().chunks(h).zip(&mu.values) {
        let ss: i128 = row
            .iter()
            .map(|&v| {
                let d = ((v as i128) << STAT_FRAC_BITS) - m as i128;
                d * d
            })
            .sum();
        wide.push(div_round(ss, h as i128));
    }
    let max = wide.iter().map(|v| v.unsigned_abs()).max().unwrap_or(0);
    let mut shift = 0u32;
    while (max + (1u128 << shift) / 2) >> shift >= WIDE_LIMIT as u128 {
        shift += 2;
    }
    let values = wide.into_iter().map(|v| shift_round(v, shift) as i64).collect();
    WideAccumulator::new(
        values,
        2 * mu.step_exponent + shift as i32,
        vec![rows],
    )
}

/// `floor(sqrt(x))` by integer Newton iteration.
pub fn isqrt(x: i64) -> Result<i64> {
    if x < 0 {
        return Err(Error::InvalidInput(format!("isqrt of negative {x}")));
    }
    Ok(isqrt_u128(x as u128) as i64)
}

pub(crate) fn isqrt_u128(x: u128) -> u128 {
    if x < 2 {
        return x;
    }
    // initial guess 2^ceil(bits/2) >= sqrt(x); Newton then decreases monotonically
    let bits = 128 - x.leading_zeros();
    let mut r = 1u128 << bits.div_ceil(2);
    loop {
        let next = (r + x / r) / 2;
        if next >= r {
            break;
        }
        r = next;
    }
    debug_assert!(r * r <= x && (r + 1) * (r + 1) > x);
    r
}

/// `round((num << k) / den)`, half away from zero.
pub fn fxp_div(num: i64, den: i64, k: u32) -> Result<i64> {
    if den == 0 {
        return Err(Error::DivisionByZero);
    }
    if den < 0 {
        return Err(Error::InvalidInput(format!("negative divisor {den}")));
    }
    if k > 62 {
        return Err(Error::InvalidInput(format!("{k} fraction bits")));
    }
    let q = div_round((num as i128) << k, den as i128);
    i64::try_from(q).map_err(|_| Error::InvalidInput("quotient overflows 64 bits".into()))
}

/// Adds a `[h]` block to every row of a `[rows x h]` accumulator, aligning the
/// two steps. The finer step is kept unless that would push a value past
/// 2^62, in which case the common step is coarsened and the finer operand is
/// rounded to nearest.
pub fn add_row_broadcast(acc: &WideAccumulator, row: &DfpTensor) -> Result<WideAccumulator> {
    let h = row.len();
    let acc_h = acc.shape.last().copied().unwrap_or(0);
    if acc_h != h {
        return Err(Error::shape(&[h], &[acc_h]));
    }
    let row_wide = WideAccumulator::new(
        row.values().iter().map(|&v| v as i64).collect(),
        row.step_exponent(),
        vec![h],
    )?;
    let (ta, tb) = (acc.step_exponent, row_wide.step_exponent);
    let (ma, mb) = (acc.max_abs() as i128, row_wide.max_abs() as i128);
    if mb == 0 {
        return Ok(acc.clone());
    }
    let mut common = if ma == 0 { tb } else { ta.min(tb) };
    let fits = |m: i128, t: i32, c: i32| -> bool {
        if t >= c {
            let s = (t - c) as u32;
            s < 62 && (m << s) < WIDE_LIMIT / 2
        } else {
            true
        }
    };
    while !(fits(ma, ta, common) && fits(mb, tb, common)) {
        common += 1;
    }
    let align = |v: i64, t: i32| -> i64 {
        if t >= common {
            v << (t - common)
        } else {
            shift_round(v as i128, (common - t) as u32) as i64
        }
    };
    let bias: Vec<i64> = row_wide.values.iter().map(|&v| align(v, tb)).collect();
    let values = acc
        .values
        .chunks(h.max(1))
        .flat_map(|r| r.iter().zip(&bias).map(|(&v, &b)| align(v, ta) + b))
        .collect();
    WideAccumulator::new(values, common, acc.shape.clone())
}
