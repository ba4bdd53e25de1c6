use crate::dfp::{inverse_map_wide, map_to_dfp, DfpTensor, WideAccumulator};
use crate::error::{Error, Result};
use crate::kernels::{add_row_broadcast, column_sum, div_round, int_mean, int_variance, isqrt_u128, STAT_FRAC_BITS};
use crate::layers::{as_matrix, QuantConfig, Slot};
use crate::tensor::FpTensor;

const FRAC: u32 = STAT_FRAC_BITS;
/// Fraction bits of the normalized values `(x - mu) / sigma`.
pub const NORM_FRAC_BITS: u32 = 24;
const NFRAC: u32 = NORM_FRAC_BITS;

/// `gamma * (x - mu) / sqrt(var + eps) + beta` over the last dimension, with
/// the statistics, normalization and affine transform in integers.
#[derive(Debug, Clone)]
pub struct IntLayerNorm {
    gamma: FpTensor,
    beta: FpTensor,
    epsilon: f64,
    config: QuantConfig,
    id: u64,
    step: u64,
    cache: Option<Cache>,
}

#[derive(Debug, Clone)]
struct Cache {
    /// normalized inputs with `NORM_FRAC_BITS` fraction bits, `[rows x h]`
    normalized: Vec<i64>,
    /// per-row `isqrt(var + eps)` at `denom_step`
    denom: Vec<i64>,
    denom_step: i32,
    gamma_hat: DfpTensor,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormGrads {
    pub input: FpTensor,
    pub gamma: FpTensor,
    pub beta: FpTensor,
}

impl IntLayerNorm {
    pub fn new(gamma: FpTensor, beta: FpTensor, epsilon: f64, config: QuantConfig, id: u64) -> Result<Self> {
        config.validate()?;
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidInput(format!("epsilon must be positive, got {epsilon}")));
        }
        if gamma.shape().len() != 1 || gamma.is_empty() {
            return Err(Error::InvalidInput("layer-norm gamma must be a non-empty vector".into()));
        }
        if beta.shape() != gamma.shape() {
            return Err(Error::shape(gamma.shape(), beta.shape()));
        }
        gamma.check_finite()?;
        beta.check_finite()?;
        Ok(Self {
            gamma,
            beta,
            epsilon,
            config,
            id,
            step: 0,
            cache: None,
        })
    }

    /// `gamma = 1`, `beta = 0`.
    pub fn identity(h: usize, epsilon: f64, config: QuantConfig, id: u64) -> Result<Self> {
        Self::new(FpTensor::vector(vec![1.0; h]), FpTensor::zeros(&[h]), epsilon, config, id)
    }

    pub fn hidden(&self) -> usize {
        self.gamma.len()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn gamma(&self) -> &FpTensor {
        &self.gamma
    }

    pub fn beta(&self) -> &FpTensor {
        &self.beta
    }

    pub fn gamma_mut(&mut self) -> &mut FpTensor {
        &mut self.gamma
    }

    /// Gamma and beta masters, in that order.
    pub fn parameters_mut(&mut self) -> [&mut FpTensor; 2] {
        [&mut self.gamma, &mut self.beta]
    }

    pub fn beta_mut(&mut self) -> &mut FpTensor {
        &mut self.beta
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn forward(&mut self, x: &FpTensor) -> Result<FpTensor> {
        let (rows, h) = as_matrix(x.shape());
        if h == 0 {
            return Err(Error::InvalidInput("layer-norm over an empty dimension".into()));
        }
        if h != self.hidden() {
            return Err(Error::shape(&[self.hidden()], &[h]));
        }
        let cfg = self.config;
        let x2 = x.clone().reshape(vec![rows, h])?;
        let xhat = map_to_dfp(&x2, cfg.b_activations, cfg.forward_mode(self.id, Slot::Input, self.step))?;
        let mu = int_mean(&xhat)?;
        let var = int_variance(&xhat, &mu)?;

        // eps in variance units; at least one unit so the divisor is positive
        let eps_units = (self.epsilon / crate::dfp::pow2(var.step_exponent)).round().max(1.0);
        let eps_units = eps_units.min((1u64 << 62) as f64) as i128;
        let denom_step = var.step_exponent / 2;
        let denom: Vec<i64> = var
            .values
            .iter()
            .map(|&v| isqrt_u128((v as i128 + eps_units) as u128) as i64)
            .collect();

        // centred values sit at mu's step
        let frac_shift = NFRAC as i32 + mu.step_exponent - denom_step;
        let mut normalized = Vec::with_capacity(rows * h);
        for ((row, &m), &d) in xhat.values().chunks(h).zip(&mu.values).zip(&denom) {
            for &q in row {
                let c = ((q as i128) << FRAC) - m as i128;
                let n = if frac_shift >= 0 {
                    div_round(c << frac_shift, d as i128)
                } else {
                    div_round(c, (d as i128) << -frac_shift)
                };
                normalized.push(n as i64);
            }
        }

        let gamma_hat = map_to_dfp(&self.gamma, cfg.b_weights, cfg.forward_mode(self.id, Slot::Weight, self.step))?;
        let beta_hat = map_to_dfp(&self.beta, cfg.b_weights, cfg.forward_mode(self.id, Slot::Bias, self.step))?;
        let scaled: Vec<i64> = normalized
            .chunks(h)
            .flat_map(|row| row.iter().zip(gamma_hat.values()).map(|(&n, &g)| n * g as i64))
            .collect();
        let acc = WideAccumulator::new(scaled, gamma_hat.step_exponent() - NFRAC as i32, vec![rows, h])?;
        let acc = add_row_broadcast(&acc, &beta_hat)?;
        let out = inverse_map_wide(&acc)?.reshape(x.shape().to_vec())?;

        self.cache = Some(Cache {
            normalized,
            denom,
            denom_step,
            gamma_hat,
            shape: x.shape().to_vec(),
        });
        Ok(out)
    }

    /// Input, gamma and beta gradients from the standard three-term identity
    /// `dx = (h - mean(h) - n * mean(h * n)) / sigma` with `h = gamma * g`.
    pub fn backward(&mut self, grad_out: &FpTensor) -> Result<LayerNormGrads> {
        let expected = match &self.cache {
            Some(c) => c.shape.clone(),
            None => return Err(Error::State("layer-norm backward without a preceding forward")),
        };
        if grad_out.shape() != expected.as_slice() {
            return Err(Error::shape(&expected, grad_out.shape()));
        }
        let cache = self.cache.take().expect("checked above");
        let (rows, h) = as_matrix(&cache.shape);
        let g2 = grad_out.clone().reshape(vec![rows, h])?;
        let ghat = map_to_dfp(&g2, self.config.b_gradients, self.config.backward_mode(self.id, self.step))?;
        let tg = ghat.step_exponent();

        let grad_beta = inverse_map_wide(&column_sum(&ghat)?)?;

        let mut gamma_acc = vec![0i128; h];
        for (grow, nrow) in ghat.values().chunks(h).zip(cache.normalized.chunks(h)) {
            for ((acc, &g), &n) in gamma_acc.iter_mut().zip(grow).zip(nrow) {
                *acc += g as i128 * n as i128;
            }
        }
        let grad_gamma = inverse_map_wide(&WideAccumulator::from_wide(gamma_acc, tg - NFRAC as i32, vec![h]))?;

        let th = tg + cache.gamma_hat.step_exponent();
        let hn = h as i128;
        let mut dx = Vec::with_capacity(rows * h);
        for ((grow, nrow), &d) in ghat.values().chunks(h).zip(cache.normalized.chunks(h)).zip(&cache.denom) {
            let hv: Vec<i128> = grow
                .iter()
                .zip(cache.gamma_hat.values())
                .map(|(&g, &gm)| g as i128 * gm as i128)
                .collect();
            let sum_h: i128 = hv.iter().sum();
            let sum_hn: i128 = hv.iter().zip(nrow).map(|(&a, &n)| a * n as i128).sum();
            let mean_h = div_round(sum_h << NFRAC, hn);
            let mean_hn = div_round(sum_hn, hn);
            for (&a, &n) in hv.iter().zip(nrow) {
                let centred = (a << NFRAC) - mean_h - div_round(n as i128 * mean_hn, 1 << NFRAC);
                dx.push(div_round(centred << FRAC, d as i128));
            }
        }
        let dx_step = th - NFRAC as i32 - FRAC as i32 - cache.denom_step;
        let input = inverse_map_wide(&WideAccumulator::from_wide(dx, dx_step, vec![rows, h]))?
            .reshape(cache.shape)?;
        Ok(LayerNormGrads {
            input,
            gamma: grad_gamma,
            beta: grad_beta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dfp::{inverse_map, RoundingMode};

    fn cfg(bits: u32) -> QuantConfig {
        QuantConfig::uniform(bits, 1)
    }

    #[test]
    fn constant_rows_normalize_to_zero() {
        let mut ln = IntLayerNorm::identity(4, 1e-5, cfg(8), 0).unwrap();
        let x = FpTensor::matrix(2, 4, vec![0.5; 8]).unwrap();
        let y = ln.forward(&x).unwrap();
        assert!(y.values().iter().all(|&v| v == 0.0), "{:?}", y.values());
    }

    #[test]
    fn two_element_row_matches_closed_form() {
        let mut ln = IntLayerNorm::identity(2, 1e-6, cfg(16), 0).unwrap();
        let y = ln.forward(&FpTensor::matrix(1, 2, vec![1.0, -1.0]).unwrap()).unwrap();
        // (x - 0) / sqrt(1 + eps)
        let want = 1.0 / (1.0f64 + 1e-6).sqrt();
        assert!((y.values()[0] as f64 - want).abs() < 1e-2);
        assert!((y.values()[1] as f64 + want).abs() < 1e-2);
    }

    #[test]
    fn zero_gamma_outputs_beta() {
        let beta = FpTensor::vector(vec![0.5, -0.25, 1.0]);
        let mut ln = IntLayerNorm::new(FpTensor::zeros(&[3]), beta.clone(), 1e-5, cfg(8), 0).unwrap();
        let y = ln.forward(&FpTensor::matrix(2, 3, vec![1.0, 2.0, 4.0, -3.0, 0.1, 0.2]).unwrap()).unwrap();
        assert_eq!(y.row(0), beta.values());
        assert_eq!(y.row(1), beta.values());
    }

    #[test]
    fn zero_gradient_gives_zeros() {
        let mut ln = IntLayerNorm::identity(3, 1e-5, cfg(8), 0).unwrap();
        ln.forward(&FpTensor::matrix(2, 3, vec![1.0, 2.0, 4.0, -3.0, 0.1, 0.2]).unwrap()).unwrap();
        let g = ln.backward(&FpTensor::zeros(&[2, 3])).unwrap();
        for t in [&g.input, &g.gamma, &g.beta] {
            assert!(t.values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn beta_gradient_is_column_sum_of_mapped_gradient() {
        let mut ln = IntLayerNorm::identity(4, 1e-5, cfg(8), 5).unwrap();
        ln.set_step(3);
        let x = FpTensor::from_fn(&[3, 4], |i| (i as f32 * 0.7).sin());
        let go = FpTensor::from_fn(&[3, 4], |i| (i as f32 * 1.3).cos());
        ln.forward(&x).unwrap();
        let g = ln.backward(&go).unwrap();
        let ghat = map_to_dfp(&go, 8, cfg(8).backward_mode(5, 3)).unwrap();
        let mapped = inverse_map(&ghat);
        for j in 0..4 {
            let s: f64 = (0..3).map(|r| mapped.row(r)[j] as f64).sum();
            assert_eq!(g.beta.values()[j] as f64, s);
        }
        // nearest mode leaves representable gradients untouched
        assert_ne!(cfg(8).backward_mode(5, 3), RoundingMode::Nearest);
    }

    #[test]
    fn backward_requires_forward() {
        let mut ln = IntLayerNorm::identity(3, 1e-5, cfg(8), 0).unwrap();
        assert!(matches!(ln.backward(&FpTensor::zeros(&[1, 3])), Err(Error::State(_))));
    }

    #[test]
    fn rejects_bad_config() {
        assert!(IntLayerNorm::identity(3, 0.0, cfg(8), 0).is_err());
        assert!(IntLayerNorm::identity(0, 1e-5, cfg(8), 0).is_err());
        let mut ln = IntLayerNorm::identity(3, 1e-5, cfg(8), 0).unwrap();
        assert!(ln.forward(&FpTensor::zeros(&[2, 4])).is_err());
    }
}
