use crate::dfp::{inverse_map, inverse_map_wide, map_to_dfp, DfpTensor, RoundingMode};
use crate::error::{Error, Result};
use crate::kernels::{add_row_broadcast, column_sum, int_matmul, int_matmul_grad_w, requantize, MatmulPlan};
use crate::layers::{as_matrix, QuantConfig, Slot};
use crate::tensor::FpTensor;

/// `Y = X W^T + b` computed with an integer matmul.
#[derive(Debug, Clone)]
pub struct IntLinear {
    weight: FpTensor,
    bias: Option<FpTensor>,
    config: QuantConfig,
    id: u64,
    step: u64,
    cache: Option<Cache>,
}

#[derive(Debug, Clone)]
struct Cache {
    xhat: DfpTensor,
    what: DfpTensor,
    input_shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub input: FpTensor,
    /// Same layout as the weight, `[out x in]`.
    pub weight: FpTensor,
    pub bias: Option<FpTensor>,
}

impl IntLinear {
    /// `weight` is `[out x in]`; `bias`, if present, is `[out]`. `id` keys the
    /// layer's rounding streams.
    pub fn new(weight: FpTensor, bias: Option<FpTensor>, config: QuantConfig, id: u64) -> Result<Self> {
        config.validate()?;
        if weight.shape().len() != 2 {
            return Err(Error::InvalidInput(format!(
                "linear weight must be rank 2, got {:?}",
                weight.shape()
            )));
        }
        weight.check_finite()?;
        if let Some(b) = &bias {
            if b.shape() != [weight.shape()[0]] {
                return Err(Error::shape(&[weight.shape()[0]], b.shape()));
            }
            b.check_finite()?;
        }
        Ok(Self {
            weight,
            bias,
            config,
            id,
            step: 0,
            cache: None,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn weight(&self) -> &FpTensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&FpTensor> {
        self.bias.as_ref()
    }

    pub fn weight_mut(&mut self) -> &mut FpTensor {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> Option<&mut FpTensor> {
        self.bias.as_mut()
    }

    /// Weight and bias masters, in that order.
    pub fn parameters_mut(&mut self) -> Vec<&mut FpTensor> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }

    pub fn config(&self) -> &QuantConfig {
        &self.config
    }

    /// Optimizer step index used to derive rounding streams.
    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn forward(&mut self, x: &FpTensor) -> Result<FpTensor> {
        let (rows, h) = as_matrix(x.shape());
        if h != self.in_features() {
            return Err(Error::shape(&[self.in_features()], &[h]));
        }
        let cfg = self.config;
        let x2 = x.clone().reshape(vec![rows, h])?;
        let xhat = map_to_dfp(&x2, cfg.b_activations, cfg.forward_mode(self.id, Slot::Input, self.step))?;
        let what = map_to_dfp(&self.weight, cfg.b_weights, cfg.forward_mode(self.id, Slot::Weight, self.step))?;
        let plan = MatmulPlan::for_operands(&xhat, &what, false, true)?;
        let mut acc = int_matmul(&xhat, &what, &plan)?;
        if let Some(b) = &self.bias {
            let bhat = map_to_dfp(b, cfg.b_weights, cfg.forward_mode(self.id, Slot::Bias, self.step))?;
            acc = add_row_broadcast(&acc, &bhat)?;
        }
        let out = if cfg.chain_integer {
            inverse_map(&requantize(&acc, cfg.b_activations, RoundingMode::Nearest)?)
        } else {
            inverse_map_wide(&acc)?
        };
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = self.out_features();
        self.cache = Some(Cache {
            xhat,
            what,
            input_shape: x.shape().to_vec(),
        });
        out.reshape(shape)
    }

    /// Consumes the forward cache.
    pub fn backward(&mut self, grad_out: &FpTensor) -> Result<LinearGrads> {
        let cached_rows = match &self.cache {
            Some(c) => c.xhat.shape()[0],
            None => return Err(Error::State("linear backward without a preceding forward")),
        };
        let (rows, out) = as_matrix(grad_out.shape());
        if out != self.out_features() || rows != cached_rows {
            return Err(Error::shape(&[cached_rows, self.out_features()], grad_out.shape()));
        }
        let cache = self.cache.take().expect("checked above");
        let g2 = grad_out.clone().reshape(vec![rows, out])?;
        let ghat = map_to_dfp(&g2, self.config.b_gradients, self.config.backward_mode(self.id, self.step))?;

        // G^T X: [out x in], the weight layout
        let gw = int_matmul_grad_w(&ghat, &cache.xhat)?;
        let plan = MatmulPlan::for_operands(&ghat, &cache.what, false, false)?;
        let gi = int_matmul(&ghat, &cache.what, &plan)?;
        let bias = match self.bias {
            Some(_) => Some(inverse_map_wide(&column_sum(&ghat)?)?),
            None => None,
        };
        Ok(LinearGrads {
            input: inverse_map_wide(&gi)?.reshape(cache.input_shape)?,
            weight: inverse_map_wide(&gw)?,
            bias,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::RoundingPolicy;

    fn cfg(bits: u32) -> QuantConfig {
        QuantConfig::uniform(bits, 7)
    }

    #[test]
    fn identity_weight_passes_input_through() {
        let mut w = FpTensor::zeros(&[4, 4]);
        for i in 0..4 {
            w.values_mut()[i * 4 + i] = 1.0;
        }
        let mut layer = IntLinear::new(w, None, cfg(16), 0).unwrap();
        let x = FpTensor::matrix(2, 4, vec![0.3, -1.7, 2.2, 0.01, 1.0, 0.5, -0.25, 3.9]).unwrap();
        let y = layer.forward(&x).unwrap();
        let step = 2f32.powi(1 - 16 + 2); // max exponent 1
        for (a, b) in y.values().iter().zip(x.values()) {
            assert!((a - b).abs() <= step);
        }
    }

    #[test]
    fn representable_inputs_give_exact_outputs() {
        let w = FpTensor::matrix(2, 2, vec![0.5, 1.0, 1.5, 2.0]).unwrap();
        let b = FpTensor::vector(vec![0.25, -1.0]);
        let mut layer = IntLinear::new(w, Some(b), cfg(8), 0).unwrap();
        let x = FpTensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = layer.forward(&x).unwrap();
        // X W^T + b in f64
        assert_eq!(y.values(), &[2.75, 4.5, 5.75, 11.5]);
    }

    #[test]
    fn zero_input_yields_bias() {
        let w = FpTensor::matrix(2, 3, vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]).unwrap();
        let b = FpTensor::vector(vec![0.75, -0.125]);
        let mut layer = IntLinear::new(w, Some(b), cfg(8), 0).unwrap();
        let y = layer.forward(&FpTensor::zeros(&[3, 3])).unwrap();
        for r in 0..3 {
            assert_eq!(y.row(r), &[0.75, -0.125]);
        }
    }

    #[test]
    fn zero_gradient_gives_zero_grads() {
        let w = FpTensor::matrix(2, 2, vec![0.5, 1.0, 1.5, 2.0]).unwrap();
        let mut layer = IntLinear::new(w, Some(FpTensor::vector(vec![0.0, 0.0])), cfg(8), 0).unwrap();
        layer.forward(&FpTensor::matrix(1, 2, vec![1.0, -1.0]).unwrap()).unwrap();
        let g = layer.backward(&FpTensor::zeros(&[1, 2])).unwrap();
        assert!(g.input.values().iter().all(|&v| v == 0.0));
        assert!(g.weight.values().iter().all(|&v| v == 0.0));
        assert!(g.bias.unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_chain_rule() {
        let mut layer = IntLinear::new(FpTensor::matrix(1, 1, vec![3.0]).unwrap(), None, cfg(16), 0).unwrap();
        layer.forward(&FpTensor::matrix(1, 1, vec![2.0]).unwrap()).unwrap();
        let g = layer.backward(&FpTensor::matrix(1, 1, vec![1.0]).unwrap()).unwrap();
        let step = 2f32.powi(-14);
        assert!((g.weight.values()[0] - 2.0).abs() <= 2.0 * step);
        assert!((g.input.values()[0] - 3.0).abs() <= 3.0 * step);
    }

    #[test]
    fn backward_requires_forward() {
        let mut layer = IntLinear::new(FpTensor::matrix(1, 1, vec![3.0]).unwrap(), None, cfg(8), 0).unwrap();
        assert!(matches!(layer.backward(&FpTensor::zeros(&[1, 1])), Err(Error::State(_))));
        layer.forward(&FpTensor::matrix(1, 1, vec![2.0]).unwrap()).unwrap();
        layer.backward(&FpTensor::matrix(1, 1, vec![1.0]).unwrap()).unwrap();
        assert!(matches!(layer.backward(&FpTensor::zeros(&[1, 1])), Err(Error::State(_))));
    }

    #[test]
    fn stochastic_backward_is_reproducible() {
        let w = FpTensor::from_fn(&[3, 4], |i| (i as f32 * 0.37).sin());
        let x = FpTensor::from_fn(&[5, 4], |i| (i as f32 * 0.11).cos());
        let g = FpTensor::from_fn(&[5, 3], |i| (i as f32 * 0.53).sin() * 1e-3);
        let run = |step| {
            let mut layer = IntLinear::new(w.clone(), None, cfg(6), 3).unwrap();
            layer.set_step(step);
            layer.forward(&x).unwrap();
            layer.backward(&g).unwrap()
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1).weight, run(2).weight);

        let nearest = cfg(6).with_backward_rounding(RoundingPolicy::Nearest);
        let mut layer = IntLinear::new(w.clone(), None, nearest, 3).unwrap();
        layer.forward(&x).unwrap();
        let a = layer.backward(&g).unwrap();
        layer.set_step(9);
        layer.forward(&x).unwrap();
        assert_eq!(a, layer.backward(&g).unwrap());
    }

    #[test]
    fn chained_mode_requantizes_output() {
        let w = FpTensor::from_fn(&[3, 4], |i| (i as f32 * 0.37).sin());
        let x = FpTensor::from_fn(&[2, 4], |i| (i as f32 * 0.11).cos());
        let mut c = cfg(6);
        c.chain_integer = true;
        let mut layer = IntLinear::new(w, None, c, 0).unwrap();
        let y = layer.forward(&x).unwrap();
        let q = map_to_dfp(&y, 6, RoundingMode::Nearest).unwrap();
        assert_eq!(inverse_map(&q), y);
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let mut layer = IntLinear::new(FpTensor::zeros(&[2, 3]), None, cfg(8), 0).unwrap();
        assert!(layer.forward(&FpTensor::zeros(&[2, 2])).is_err());
        layer.forward(&FpTensor::zeros(&[2, 3])).unwrap();
        assert!(layer.backward(&FpTensor::zeros(&[2, 3])).is_err());
        assert!(IntLinear::new(FpTensor::zeros(&[2, 3]), Some(FpTensor::zeros(&[3])), cfg(8), 0).is_err());
    }
}
