use super::*;
use crate::data::{synthetic, Batch, SyntheticTask};

fn small() -> TinyTransformerConfig {
    TinyTransformerConfig {
        vocab: 12,
        hidden: 8,
        layers: 2,
        heads: 2,
        max_len: 6,
        classes: 3,
        ..TinyTransformerConfig::default()
    }
}

fn batch(seed: u64, n: usize, cfg: &TinyTransformerConfig) -> Batch {
    let mut ex = synthetic(seed, n, cfg.vocab, cfg.max_len, SyntheticTask::Keyword, 0.0).unwrap();
    for (i, e) in ex.iter_mut().enumerate() {
        e.label = i % cfg.classes;
    }
    let refs: Vec<_> = ex.iter().collect();
    Batch::new(&refs, cfg.max_len)
}

#[test]
fn parameter_count_matches_closed_form() {
    let cfg = TinyTransformerConfig {
        vocab: 100,
        hidden: 32,
        layers: 2,
        heads: 2,
        max_len: 32,
        classes: 2,
        ..TinyTransformerConfig::default()
    };
    let (v, h, l, s, c) = (100, 32, 2, 32, 2);
    let per_block = 4 * (h * h + h) + (4 * h * h + 4 * h) + (4 * h * h + h) + 2 * (2 * h);
    let expected = v * h + s * h + 2 * h + l * per_block + c * h + c;
    assert_eq!(expected, 29_762);
    let fp = Model::build(cfg, Precision::Fp32, 0).unwrap();
    let int = Model::build(cfg, Precision::Integer(QuantConfig::uniform(8, 0)), 0).unwrap();
    assert_eq!(fp.parameter_count(), expected);
    assert_eq!(int.parameter_count(), expected);
    assert_eq!(fp.parameter_names().len(), fp.parameters().len());
}

#[test]
fn builds_share_initial_parameters() {
    let fp = Model::build(small(), Precision::Fp32, 3).unwrap();
    let int = Model::build(small(), Precision::Integer(QuantConfig::uniform(12, 3)), 3).unwrap();
    for (a, b) in fp.parameters().iter().zip(int.parameters()) {
        assert_eq!(a, &b);
    }
    let other = Model::build(small(), Precision::Fp32, 4).unwrap();
    assert_ne!(fp.parameters()[0], other.parameters()[0]);
}

#[test]
fn invalid_configs_rejected() {
    let mut cfg = small();
    cfg.heads = 3;
    assert!(matches!(Model::build(cfg, Precision::Fp32, 0), Err(TrainError::Config(_))));
    let mut cfg = small();
    cfg.layers = 0;
    assert!(Model::build(cfg, Precision::Fp32, 0).is_err());
    let mut q = QuantConfig::uniform(8, 0);
    q.b_gradients = 40;
    assert!(Model::build(small(), Precision::Integer(q), 0).is_err());
}

#[test]
fn wide_integer_initial_loss_matches_fp32() {
    let cfg = small();
    let b = batch(1, 16, &cfg);
    let mut fp = Model::build(cfg, Precision::Fp32, 9).unwrap();
    let mut int = Model::build(cfg, Precision::Integer(QuantConfig::uniform(26, 9)), 9).unwrap();
    let (lf, _) = fp.evaluate(&b, 0).unwrap();
    let (li, _) = int.evaluate(&b, 0).unwrap();
    assert!(((lf - li) / lf).abs() < 1e-4, "{lf} vs {li}");
}

#[test]
fn gradients_align_with_parameters() {
    let cfg = small();
    let b = batch(2, 5, &cfg);
    for precision in [Precision::Fp32, Precision::Integer(QuantConfig::uniform(10, 1))] {
        let mut m = Model::build(cfg, precision, 1).unwrap();
        let (loss, grads) = m.loss_and_grads(&b, 0).unwrap();
        assert!(loss.is_finite());
        let params = m.parameters();
        assert_eq!(grads.len(), params.len());
        for (g, p) in grads.iter().zip(params) {
            assert_eq!(g.shape(), p.shape());
        }
        assert!(matches!(m.backward(&b.labels), Err(TrainError::Numeric(intft_core::Error::State(_)))));
    }
}

/// Central differences of the FP32 model loss on the largest gradient entry
/// of every tensor.
#[test]
fn fp32_backward_matches_finite_differences() {
    let cfg = small();
    let b = batch(4, 6, &cfg);
    let mut m = Model::build(cfg, Precision::Fp32, 5).unwrap();
    let (_, grads) = m.loss_and_grads(&b, 0).unwrap();
    let names = m.parameter_names();
    let h = 1e-2f32;
    for (ti, g) in grads.iter().enumerate() {
        let (idx, &want) = g
            .values()
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.abs().total_cmp(&y.1.abs()))
            .unwrap();
        let eval_at = |delta: f32| {
            let mut probe = m.clone();
            probe.parameters_mut()[ti].values_mut()[idx] += delta;
            probe.evaluate(&b, 0).unwrap().0
        };
        let fd = ((eval_at(h) - eval_at(-h)) / (2.0 * h as f64)) as f32;
        let tol = 2e-3 + 0.05 * want.abs();
        assert!((fd - want).abs() <= tol, "{}: fd {fd} vs analytic {want}", names[ti]);
    }
}

#[test]
fn dropout_is_seeded_and_train_only() {
    let mut cfg = small();
    cfg.dropout = 0.3;
    let b = batch(6, 4, &cfg);
    let mut m = Model::build(cfg, Precision::Fp32, 2).unwrap();
    let a1 = m.forward(&b, true, 1).unwrap();
    let a2 = m.forward(&b, true, 1).unwrap();
    let a3 = m.forward(&b, true, 2).unwrap();
    let e1 = m.forward(&b, false, 1).unwrap();
    let e2 = m.forward(&b, false, 2).unwrap();
    assert_eq!(a1, a2);
    assert_ne!(a1, a3);
    assert_eq!(e1, e2);
}

#[test]
fn padding_does_not_leak() {
    let cfg = small();
    let mut m = Model::build(cfg, Precision::Fp32, 8).unwrap();
    let mut b = batch(7, 3, &cfg);
    let before = m.forward(&b, false, 0).unwrap();
    for (i, t) in b.tokens.iter_mut().enumerate() {
        if i % cfg.max_len >= b.lengths[i / cfg.max_len] {
            *t = 5;
        }
    }
    let after = m.forward(&b, false, 0).unwrap();
    assert_eq!(before, after);
}

#[test]
fn gelu_derivative() {
    for &x in &[-3.0f32, -0.5, 0.0, 0.7, 2.5] {
        let fd = (gelu(x + 1e-3) - gelu(x - 1e-3)) / 2e-3;
        assert!((fd - gelu_grad(x)).abs() < 1e-3);
    }
    assert_eq!(gelu(0.0), 0.0);
}

#[test]
fn cross_entropy_uniform_logits() {
    let logits = FpTensor::matrix(2, 4, vec![0.0; 8]).unwrap();
    let (loss, g) = cross_entropy(&logits, &[1, 3]).unwrap();
    assert!((loss - 4f64.ln()).abs() < 1e-6);
    assert!((g.values()[1] - (0.25 - 1.0) / 2.0).abs() < 1e-7);
    assert!(cross_entropy(&logits, &[1, 4]).is_err());
}
