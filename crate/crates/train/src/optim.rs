//! FP32 optimizers operating on master weights.

use intft_core::FpTensor;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    AdamW {
        beta1: f32,
        beta2: f32,
        eps: f32,
        weight_decay: f32,
    },
}

impl OptimizerKind {
    pub fn adamw() -> Self {
        Self::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer state: step counter and AdamW moments, one buffer per tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f32,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f32) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(TrainError::Config(format!("learning rate {lr} must be finite and >= 0")));
        }
        Ok(Self {
            kind,
            lr,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Vec<f32>], &[Vec<f32>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, t: u64, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>) {
        self.t = t;
        self.m = m;
        self.v = v;
    }

    /// `w <- w - lr * update(g)`. Every gradient is checked before any
    /// parameter changes.
    pub fn step(&mut self, params: &mut [&mut FpTensor], grads: &[FpTensor], names: &[String], step: u64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(TrainError::Config(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(intft_core::Error::Shape {
                    expected: p.shape().to_vec(),
                    actual: g.shape().to_vec(),
                }
                .into());
            }
            if g.check_finite().is_err() {
                return Err(TrainError::NonFiniteGradient {
                    step,
                    tensor: names.get(i).cloned().unwrap_or_else(|| format!("#{i}")),
                });
            }
        }
        self.t += 1;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, d) in p.values_mut().iter_mut().zip(g.values()) {
                        *w -= lr * d;
                    }
                }
            }
            OptimizerKind::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                    self.v = self.m.clone();
                }
                let bc1 = 1.0 - pow(beta1, self.t);
                let bc2_sqrt = (1.0 - pow(beta2, self.t)).sqrt();
                let step_size = lr / bc1;
                for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
                    for (((w, &d), m), v) in p.values_mut().iter_mut().zip(g.values()).zip(m).zip(v) {
                        *w *= 1.0 - lr * weight_decay;
                        *m = beta1 * *m + (1.0 - beta1) * d;
                        *v = beta2 * *v + (1.0 - beta2) * d * d;
                        let denom = v.sqrt() / bc2_sqrt + eps;
                        *w -= step_size * (*m / denom);
                    }
                }
            }
        }
        Ok(())
    }
}

/// `b^t` by repeated multiplication, so the rounding sequence is fixed.
fn pow(b: f32, t: u64) -> f32 {
    (0..t).fold(1.0, |acc, _| acc * b)
}
