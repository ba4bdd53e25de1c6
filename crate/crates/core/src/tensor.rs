use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major FP32 tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpTensor {
    values: Vec<f32>,
    shape: Vec<usize>,
}

impl FpTensor {
    pub fn new(values: Vec<f32>, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::InvalidInput(format!(
                "{} values do not fill shape {:?}",
                values.len(),
                shape
            )));
        }
        Ok(Self { values, shape })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            values: vec![0.0; shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n = shape.iter().product();
        Self {
            values: (0..n).map(&mut f).collect(),
            shape: shape.to_vec(),
        }
    }

    pub fn vector(values: Vec<f32>) -> Self {
        let n = values.len();
        Self {
            values,
            shape: vec![n],
        }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        Self::new(values, vec![rows, cols])
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
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

    /// Size of the last dimension (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[len / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        match self.last_dim() {
            0 => 0,
            h => self.values.len() / h,
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let h = self.last_dim();
        &self.values[r * h..(r + 1) * h]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.values.len() {
            return Err(Error::shape(&shape, &self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// First non-finite element, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite {
                index,
                value: self.values[index],
            }),
            None => Ok(()),
        }
    }

    pub fn max_abs(&self) -> f32 {
        self.values.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}
