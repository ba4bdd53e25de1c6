//! FP64 reference layers and finite-difference helpers.
#![allow(dead_code)]

use intft_core::FpTensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], mean: f64, std: f64) -> FpTensor {
    let d = Normal::new(mean, std).unwrap();
    FpTensor::from_fn(shape, |_| d.sample(rng) as f32)
}

pub fn f64s(t: &FpTensor) -> Vec<f64> {
    t.values().iter().map(|&v| v as f64).collect()
}

/// `y = x w^T + b` for `x: [n x i]`, `w: [o x i]`.
pub fn linear_ref(x: &[f64], w: &[f64], b: &[f64], n: usize, i: usize, o: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * o];
    for r in 0..n {
        for c in 0..o {
            y[r * o + c] = b[c] + (0..i).map(|k| x[r * i + k] * w[c * i + k]).sum::<f64>();
        }
    }
    y
}

pub fn layernorm_ref(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let h = gamma.len();
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks(h) {
        let mu = row.iter().sum::<f64>() / h as f64;
        let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / h as f64;
        let s = (var + eps).sqrt();
        for j in 0..h {
            y.push(gamma[j] * (row[j] - mu) / s + beta[j]);
        }
    }
    y
}

/// Central differences of `sum(g * f(p))` with respect to every entry of `p`.
pub fn central_diff(p: &[f64], g: &[f64], h: f64, f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    let mut p = p.to_vec();
    (0..p.len())
        .map(|k| {
            let orig = p[k];
            p[k] = orig + h;
            let up: f64 = f(&p).iter().zip(g).map(|(a, b)| a * b).sum();
            p[k] = orig - h;
            let down: f64 = f(&p).iter().zip(g).map(|(a, b)| a * b).sum();
            p[k] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest elementwise relative error; denominators are floored at 1e-3 of
/// the reference's largest magnitude.
pub fn max_rel_err(got: &FpTensor, want: &[f64]) -> f64 {
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-3 * scale;
    got.values()
        .iter()
        .zip(want)
        .map(|(&a, &b)| (a as f64 - b).abs() / b.abs().max(floor).max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}
