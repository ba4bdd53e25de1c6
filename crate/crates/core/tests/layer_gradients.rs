mod common;

use common::*;
use intft_core::dfp::{inverse_map, map_to_dfp};
use intft_core::layers::{IntEmbedding, IntLayerNorm, IntLinear, QuantConfig, RoundingPolicy};
use intft_core::FpTensor;

fn high_precision() -> QuantConfig {
    QuantConfig::uniform(24, 0).with_backward_rounding(RoundingPolicy::Nearest)
}

#[test]
fn linear_gradients_match_finite_differences() {
    let (n, i, o) = (8, 8, 8);
    for seed in 0..20 {
        let mut r = rng(seed);
        let x = normal_tensor(&mut r, &[n, i], 0.0, 1.0);
        let w = normal_tensor(&mut r, &[o, i], 0.0, 0.5);
        let b = normal_tensor(&mut r, &[o], 0.0, 0.5);
        let g = normal_tensor(&mut r, &[n, o], 0.0, 1.0);
        let mut layer = IntLinear::new(w.clone(), Some(b.clone()), high_precision(), 1).unwrap();
        layer.forward(&x).unwrap();
        let grads = layer.backward(&g).unwrap();

        let (xv, wv, bv, gv) = (f64s(&x), f64s(&w), f64s(&b), f64s(&g));
        let dx = central_diff(&xv, &gv, 1e-4, |p| linear_ref(p, &wv, &bv, n, i, o));
        let dw = central_diff(&wv, &gv, 1e-4, |p| linear_ref(&xv, p, &bv, n, i, o));
        let db = central_diff(&bv, &gv, 1e-4, |p| linear_ref(&xv, &wv, p, n, i, o));
        assert!(max_rel_err(&grads.input, &dx) < 1e-3, "seed {seed} input");
        assert!(max_rel_err(&grads.weight, &dw) < 1e-3, "seed {seed} weight");
        assert!(max_rel_err(grads.bias.as_ref().unwrap(), &db) < 1e-3, "seed {seed} bias");
    }
}

#[test]
fn layernorm_gradients_match_finite_differences() {
    let (n, h) = (8, 8);
    let eps = 1e-5;
    for seed in 0..20 {
        let mut r = rng(100 + seed);
        let x = normal_tensor(&mut r, &[n, h], 0.3, 1.0);
        let gamma = normal_tensor(&mut r, &[h], 1.0, 0.2);
        let beta = normal_tensor(&mut r, &[h], 0.0, 0.2);
        let g = normal_tensor(&mut r, &[n, h], 0.0, 1.0);
        let mut ln = IntLayerNorm::new(gamma.clone(), beta.clone(), eps, high_precision(), 2).unwrap();
        let y = ln.forward(&x).unwrap();
        let grads = ln.backward(&g).unwrap();

        let (xv, gm, bt, gv) = (f64s(&x), f64s(&gamma), f64s(&beta), f64s(&g));
        let y_ref = layernorm_ref(&xv, &gm, &bt, eps);
        assert!(max_rel_err(&y, &y_ref) < 1e-3, "seed {seed} forward");
        let dx = central_diff(&xv, &gv, 1e-4, |p| layernorm_ref(p, &gm, &bt, eps));
        let dg = central_diff(&gm, &gv, 1e-4, |p| layernorm_ref(&xv, p, &bt, eps));
        let db = central_diff(&bt, &gv, 1e-4, |p| layernorm_ref(&xv, &gm, p, eps));
        assert!(max_rel_err(&grads.input, &dx) < 1e-3, "seed {seed} input {}", max_rel_err(&grads.input, &dx));
        assert!(max_rel_err(&grads.gamma, &dg) < 1e-3, "seed {seed} gamma");
        assert!(max_rel_err(&grads.beta, &db) < 1e-3, "seed {seed} beta");
    }
}

#[test]
fn stochastic_weight_gradient_is_unbiased() {
    let (n, i, o) = (8, 8, 8);
    let mut r = rng(7);
    let x = normal_tensor(&mut r, &[n, i], 0.0, 1.0);
    let w = normal_tensor(&mut r, &[o, i], 0.0, 0.5);
    let g = normal_tensor(&mut r, &[n, o], 0.0, 1.0);

    let mut reference_cfg = QuantConfig::uniform(26, 0).with_backward_rounding(RoundingPolicy::Nearest);
    let mut layer = IntLinear::new(w.clone(), None, reference_cfg, 0).unwrap();
    layer.forward(&x).unwrap();
    let reference = f64s(&layer.backward(&g).unwrap().weight);

    reference_cfg.b_gradients = 8;
    reference_cfg.backward_rounding = RoundingPolicy::Stochastic;
    let mut layer = IntLinear::new(w, None, reference_cfg, 0).unwrap();
    let trials = 10_000;
    let mut sum = vec![0.0f64; o * i];
    let mut sum_sq = vec![0.0f64; o * i];
    for step in 0..trials {
        layer.set_step(step);
        layer.forward(&x).unwrap();
        let gw = layer.backward(&g).unwrap().weight;
        for ((s, q), &v) in sum.iter_mut().zip(sum_sq.iter_mut()).zip(gw.values()) {
            *s += v as f64;
            *q += (v as f64).powi(2);
        }
    }
    let t = trials as f64;
    for k in 0..o * i {
        let mean = sum[k] / t;
        let var = (sum_sq[k] / t - mean * mean).max(0.0);
        let sigma = (var / t).sqrt();
        let slack = 1e-6 * reference[k].abs();
        assert!(
            (mean - reference[k]).abs() <= 4.0 * sigma + slack,
            "element {k}: mean {mean} vs {} (sigma {sigma})",
            reference[k]
        );
    }
}

#[test]
fn embedding_backward_matches_fp64_scatter() {
    let mut r = rng(3);
    let (v, h) = (10, 6);
    let table = normal_tensor(&mut r, &[v, h], 0.0, 1.0);
    let indices = [3usize, 7, 3, 0, 9, 3, 7];
    let g = normal_tensor(&mut r, &[indices.len(), h], 0.0, 1e-2);
    let cfg = QuantConfig::uniform(8, 99);
    let mut emb = IntEmbedding::new(table, cfg, 4).unwrap();
    emb.set_step(12);
    emb.forward(&indices).unwrap();
    let got = emb.backward(&g).unwrap();

    let ghat = inverse_map(&map_to_dfp(&g, 8, cfg.backward_mode(4, 12)).unwrap());
    let mut want = vec![0.0f64; v * h];
    for (row, &idx) in indices.iter().enumerate() {
        for j in 0..h {
            want[idx * h + j] += ghat.row(row)[j] as f64;
        }
    }
    let got: Vec<f64> = f64s(&got);
    assert_eq!(got, want);
}

#[test]
fn exact_inputs_are_transparent() {
    // all values are small multiples of 2^-4 and fit 12-bit blocks
    let x = FpTensor::from_fn(&[4, 3], |k| ((k as i32 * 5 % 17) - 8) as f32 / 16.0);
    let w = FpTensor::from_fn(&[2, 3], |k| ((k as i32 * 3 % 7) - 3) as f32 / 4.0);
    let b = FpTensor::vector(vec![0.5, -0.25]);
    let mut layer = IntLinear::new(w.clone(), Some(b.clone()), QuantConfig::uniform(12, 0), 0).unwrap();
    let y = layer.forward(&x).unwrap();
    let want = linear_ref(&f64s(&x), &f64s(&w), &f64s(&b), 4, 3, 2);
    assert_eq!(f64s(&y), want);
}
