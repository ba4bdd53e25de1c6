//! Layer wrappers that dispatch to either the integer layers or plain FP32
//! twins with identical parameters and interfaces.

use intft_core::layers::{IntEmbedding, IntLayerNorm, IntLinear, LayerNormGrads, LinearGrads, QuantConfig};
use intft_core::{Error, FpTensor, Result};

fn shape_err(expected: &[usize], actual: &[usize]) -> Error {
    Error::Shape {
        expected: expected.to_vec(),
        actual: actual.to_vec(),
    }
}

#[derive(Debug, Clone)]
pub struct FpLinear {
    weight: FpTensor,
    bias: Option<FpTensor>,
    cache: Option<FpTensor>,
}

impl FpLinear {
    pub fn new(weight: FpTensor, bias: Option<FpTensor>) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(Error::InvalidInput("weight must be 2-D".into()));
        }
        if let Some(b) = &bias {
            if b.shape() != [weight.shape()[0]] {
                return Err(shape_err(&[weight.shape()[0]], b.shape()));
            }
        }
        Ok(Self {
            weight,
            bias,
            cache: None,
        })
    }

    fn dims(&self) -> (usize, usize) {
        (self.weight.shape()[0], self.weight.shape()[1])
    }

    pub fn forward(&mut self, x: &FpTensor) -> Result<FpTensor> {
        let (out, inp) = self.dims();
        if x.last_dim() != inp {
            return Err(shape_err(&[x.rows(), inp], x.shape()));
        }
        let rows = x.rows();
        let w = self.weight.values();
        let mut y = vec![0f32; rows * out];
        for r in 0..rows {
            let xr = x.row(r);
            for o in 0..out {
                let wo = &w[o * inp..(o + 1) * inp];
                let mut s = 0f32;
                for i in 0..inp {
                    s += xr[i] * wo[i];
                }
                if let Some(b) = &self.bias {
                    s += b.values()[o];
                }
                y[r * out + o] = s;
            }
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = out;
        self.cache = Some(x.clone());
        FpTensor::new(y, shape)
    }

    pub fn backward(&mut self, g: &FpTensor) -> Result<LinearGrads> {
        let (out, inp) = self.dims();
        let x = self.cache.as_ref().ok_or(Error::State("backward called before forward"))?;
        if g.last_dim() != out || g.rows() != x.rows() {
            return Err(shape_err(&[x.rows(), out], g.shape()));
        }
        let x = self.cache.take().unwrap();
        let rows = x.rows();
        let w = self.weight.values();
        let mut gi = vec![0f32; rows * inp];
        let mut gw = vec![0f32; out * inp];
        let mut gb = vec![0f32; out];
        for r in 0..rows {
            let gr = g.row(r);
            let xr = x.row(r);
            let gir = &mut gi[r * inp..(r + 1) * inp];
            for o in 0..out {
                let go = gr[o];
                gb[o] += go;
                let wo = &w[o * inp..(o + 1) * inp];
                let gwo = &mut gw[o * inp..(o + 1) * inp];
                for i in 0..inp {
                    gir[i] += go * wo[i];
                    gwo[i] += go * xr[i];
                }
            }
        }
        let mut shape = g.shape().to_vec();
        *shape.last_mut().unwrap() = inp;
        Ok(LinearGrads {
            input: FpTensor::new(gi, shape)?,
            weight: FpTensor::new(gw, vec![out, inp])?,
            bias: self.bias.as_ref().map(|_| FpTensor::vector(gb)),
        })
    }
}

#[derive(Debug, Clone)]
struct FpNormCache {
    normalized: Vec<f32>,
    inv_std: Vec<f32>,
    shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct FpLayerNorm {
    gamma: FpTensor,
    beta: FpTensor,
    epsilon: f32,
    cache: Option<FpNormCache>,
}

impl FpLayerNorm {
    pub fn new(gamma: FpTensor, beta: FpTensor, epsilon: f64) -> Result<Self> {
        if gamma.shape() != beta.shape() || gamma.shape().len() != 1 {
            return Err(shape_err(gamma.shape(), beta.shape()));
        }
        Ok(Self {
            gamma,
            beta,
            epsilon: epsilon as f32,
            cache: None,
        })
    }

    pub fn forward(&mut self, x: &FpTensor) -> Result<FpTensor> {
        let h = self.gamma.len();
        if x.last_dim() != h {
            return Err(shape_err(&[x.rows(), h], x.shape()));
        }
        let rows = x.rows();
        let mut normalized = vec![0f32; rows * h];
        let mut inv_std = vec![0f32; rows];
        let mut y = vec![0f32; rows * h];
        let (g, b) = (self.gamma.values(), self.beta.values());
        for r in 0..rows {
            let xr = x.row(r);
            let mean = xr.iter().sum::<f32>() / h as f32;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / h as f32;
            let is = 1.0 / (var + self.epsilon).sqrt();
            inv_std[r] = is;
            for i in 0..h {
                let n = (xr[i] - mean) * is;
                normalized[r * h + i] = n;
                y[r * h + i] = n * g[i] + b[i];
            }
        }
        self.cache = Some(FpNormCache {
            normalized,
            inv_std,
            shape: x.shape().to_vec(),
        });
        FpTensor::new(y, x.shape().to_vec())
    }

    pub fn backward(&mut self, grad: &FpTensor) -> Result<LayerNormGrads> {
        let h = self.gamma.len();
        let cache = self.cache.as_ref().ok_or(Error::State("backward called before forward"))?;
        if grad.shape() != cache.shape.as_slice() {
            return Err(shape_err(&cache.shape, grad.shape()));
        }
        let cache = self.cache.take().unwrap();
        let rows = grad.rows();
        let g = self.gamma.values();
        let mut dx = vec![0f32; rows * h];
        let mut dgamma = vec![0f32; h];
        let mut dbeta = vec![0f32; h];
        let mut hh = vec![0f32; h];
        for r in 0..rows {
            let gr = grad.row(r);
            let n = &cache.normalized[r * h..(r + 1) * h];
            for i in 0..h {
                dgamma[i] += gr[i] * n[i];
                dbeta[i] += gr[i];
                hh[i] = gr[i] * g[i];
            }
            let mean_h = hh.iter().sum::<f32>() / h as f32;
            let mean_hn = hh.iter().zip(n).map(|(a, b)| a * b).sum::<f32>() / h as f32;
            for i in 0..h {
                dx[r * h + i] = cache.inv_std[r] * (hh[i] - mean_h - n[i] * mean_hn);
            }
        }
        Ok(LayerNormGrads {
            input: FpTensor::new(dx, cache.shape)?,
            gamma: FpTensor::vector(dgamma),
            beta: FpTensor::vector(dbeta),
        })
    }
}

#[derive(Debug, Clone)]
pub struct FpEmbedding {
    table: FpTensor,
    cache: Option<Vec<usize>>,
}

impl FpEmbedding {
    pub fn new(table: FpTensor) -> Result<Self> {
        if table.shape().len() != 2 {
            return Err(Error::InvalidInput("embedding table must be 2-D".into()));
        }
        Ok(Self { table, cache: None })
    }

    pub fn forward(&mut self, indices: &[usize]) -> Result<FpTensor> {
        let (v, h) = (self.table.rows(), self.table.last_dim());
        let mut out = Vec::with_capacity(indices.len() * h);
        for &i in indices {
            if i >= v {
                return Err(Error::Index { index: i, len: v });
            }
            out.extend_from_slice(self.table.row(i));
        }
        self.cache = Some(indices.to_vec());
        FpTensor::new(out, vec![indices.len(), h])
    }

    pub fn backward(&mut self, grad: &FpTensor) -> Result<FpTensor> {
        let (v, h) = (self.table.rows(), self.table.last_dim());
        let idx = self.cache.as_ref().ok_or(Error::State("backward called before forward"))?;
        if grad.shape() != [idx.len(), h] {
            return Err(shape_err(&[idx.len(), h], grad.shape()));
        }
        let idx = self.cache.take().unwrap();
        let mut out = vec![0f32; v * h];
        for (r, &i) in idx.iter().enumerate() {
            for (o, g) in out[i * h..(i + 1) * h].iter_mut().zip(grad.row(r)) {
                *o += g;
            }
        }
        FpTensor::new(out, vec![v, h])
    }
}

#[derive(Debug, Clone)]
pub enum Linear {
    Int(IntLinear),
    Fp(FpLinear),
}

impl Linear {
    pub fn build(weight: FpTensor, bias: FpTensor, quant: Option<QuantConfig>, id: u64) -> Result<Self> {
        Ok(match quant {
            Some(q) => Self::Int(IntLinear::new(weight, Some(bias), q, id)?),
            None => Self::Fp(FpLinear::new(weight, Some(bias))?),
        })
    }

    pub fn forward(&mut self, x: &FpTensor) -> Result<FpTensor> {
        match self {
            Self::Int(l) => l.forward(x),
            Self::Fp(l) => l.forward(x),
        }
    }

    pub fn backward(&mut self, g: &FpTensor) -> Result<LinearGrads> {
        match self {
            Self::Int(l) => l.backward(g),
            Self::Fp(l) => l.backward(g),
        }
    }

    pub fn set_step(&mut self, step: u64) {
        if let Self::Int(l) = self {
            l.set_step(step);
        }
    }

    pub fn params(&self) -> Vec<&FpTensor> {
        let (w, b) = match self {
            Self::Int(l) => (l.weight(), l.bias()),
            Self::Fp(l) => (&l.weight, l.bias.as_ref()),
        };
        std::iter::once(w).chain(b).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut FpTensor> {
        match self {
            Self::Int(l) => l.parameters_mut(),
            Self::Fp(l) => std::iter::once(&mut l.weight).chain(l.bias.as_mut()).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum LayerNorm {
    Int(IntLayerNorm),
    Fp(FpLayerNorm),
}

impl LayerNorm {
    pub fn build(h: usize, epsilon: f64, quant: Option<QuantConfig>, id: u64) -> Result<Self> {
        let (gamma, beta) = (FpTensor::vector(vec![1.0; h]), FpTensor::zeros(&[h]));
        Ok(match quant {
            Some(q) => Self::Int(IntLayerNorm::new(gamma, beta, epsilon, q, id)?),
            None => Self::Fp(FpLayerNorm::new(gamma, beta, epsilon)?),
        })
    }

    pub fn forward(&mut self, x: &FpTensor) -> Result<FpTensor> {
        match self {
            Self::Int(l) => l.forward(x),
            Self::Fp(l) => l.forward(x),
        }
    }

    pub fn backward(&mut self, g: &FpTensor) -> Result<LayerNormGrads> {
        match self {
            Self::Int(l) => l.backward(g),
            Self::Fp(l) => l.backward(g),
        }
    }

    pub fn set_step(&mut self, step: u64) {
        if let Self::Int(l) = self {
            l.set_step(step);
        }
    }

    pub fn params(&self) -> Vec<&FpTensor> {
        match self {
            Self::Int(l) => vec![l.gamma(), l.beta()],
            Self::Fp(l) => vec![&l.gamma, &l.beta],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut FpTensor> {
        match self {
            Self::Int(l) => l.parameters_mut().into(),
            Self::Fp(l) => vec![&mut l.gamma, &mut l.beta],
        }
    }
}

#[derive(Debug, Clone)]
pub enum Embedding {
    Int(IntEmbedding),
    Fp(FpEmbedding),
}

impl Embedding {
    pub fn build(table: FpTensor, quant: Option<QuantConfig>, id: u64) -> Result<Self> {
        Ok(match quant {
            Some(q) => Self::Int(IntEmbedding::new(table, q, id)?),
            None => Self::Fp(FpEmbedding::new(table)?),
        })
    }

    pub fn forward(&mut self, idx: &[usize]) -> Result<FpTensor> {
        match self {
            Self::Int(l) => l.forward(idx),
            Self::Fp(l) => l.forward(idx),
        }
    }

    pub fn backward(&mut self, g: &FpTensor) -> Result<FpTensor> {
        match self {
            Self::Int(l) => l.backward(g),
            Self::Fp(l) => l.backward(g),
        }
    }

    pub fn set_step(&mut self, step: u64) {
        if let Self::Int(l) = self {
            l.set_step(step);
        }
    }

    pub fn params(&self) -> Vec<&FpTensor> {
        match self {
            Self::Int(l) => vec![l.table()],
            Self::Fp(l) => vec![&l.table],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut FpTensor> {
        match self {
            Self::Int(l) => vec![l.table_mut()],
            Self::Fp(l) => vec![&mut l.table],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fp_linear_matches_hand_values() {
        let w = FpTensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut l = FpLinear::new(w, Some(FpTensor::vector(vec![0.5, -0.5]))).unwrap();
        let y = l.forward(&FpTensor::matrix(1, 2, vec![1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(y.values(), &[3.5, 6.5]);
        let g = l.backward(&FpTensor::matrix(1, 2, vec![1.0, -1.0]).unwrap()).unwrap();
        assert_eq!(g.input.values(), &[-2.0, -2.0]);
        assert_eq!(g.weight.values(), &[1.0, 1.0, -1.0, -1.0]);
        assert_eq!(g.bias.unwrap().values(), &[1.0, -1.0]);
        assert!(matches!(
            l.backward(&FpTensor::matrix(1, 2, vec![0.0; 2]).unwrap()),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn fp_layernorm_normalizes() {
        let mut ln = LayerNorm::build(4, 1e-5, None, 0).unwrap();
        let y = ln.forward(&FpTensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let mean: f32 = y.values().iter().sum::<f32>() / 4.0;
        let var: f32 = y.values().iter().map(|v| v * v).sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-4);
        // dL/dx of sum(y) vanishes when gamma is uniform
        let g = ln.backward(&FpTensor::matrix(1, 4, vec![1.0; 4]).unwrap()).unwrap();
        assert!(g.input.values().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn params_mut_reaches_master_copies() {
        let q = QuantConfig::uniform(12, 0);
        let w = FpTensor::matrix(1, 1, vec![1.0]).unwrap();
        let mut l = Linear::build(w, FpTensor::vector(vec![0.0]), Some(q), 0).unwrap();
        for p in l.params_mut() {
            p.values_mut()[0] = 0.25;
        }
        assert_eq!(l.params()[0].values(), &[0.25]);
        assert_eq!(l.params()[1].values(), &[0.25]);
    }
}
