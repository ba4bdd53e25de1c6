use crate::dfp::{inverse_map, inverse_map_wide, map_to_dfp, DfpTensor, WideAccumulator};
use crate::error::{Error, Result};
use crate::kernels::max_reduction_len;
use crate::layers::{QuantConfig, Slot};
use crate::tensor::FpTensor;

/// Lookup table whose rows are served from a dynamic fixed-point copy of the
/// master table. The integer copy is rebuilt only after the master table or
/// the step changes.
#[derive(Debug, Clone)]
pub struct IntEmbedding {
    table: FpTensor,
    config: QuantConfig,
    id: u64,
    step: u64,
    quantized: Option<DfpTensor>,
    cache: Option<Vec<usize>>,
}

impl IntEmbedding {
    /// `table` is `[vocab x hidden]`.
    pub fn new(table: FpTensor, config: QuantConfig, id: u64) -> Result<Self> {
        config.validate()?;
        if table.shape().len() != 2 {
            return Err(Error::InvalidInput(format!(
                "embedding table must be rank 2, got {:?}",
                table.shape()
            )));
        }
        table.check_finite()?;
        Ok(Self {
            table,
            config,
            id,
            step: 0,
            quantized: None,
            cache: None,
        })
    }

    pub fn vocab(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn table(&self) -> &FpTensor {
        &self.table
    }

    /// Mutable master table; drops the integer copy.
    pub fn table_mut(&mut self) -> &mut FpTensor {
        self.quantized = None;
        &mut self.table
    }

    pub fn set_step(&mut self, step: u64) {
        if step != self.step {
            self.quantized = None;
        }
        self.step = step;
    }

    pub fn quantized_table(&mut self) -> Result<&DfpTensor> {
        if self.quantized.is_none() {
            let mode = self.config.forward_mode(self.id, Slot::Weight, self.step);
            self.quantized = Some(map_to_dfp(&self.table, self.config.b_weights, mode)?);
        }
        Ok(self.quantized.as_ref().expect("just filled"))
    }

    /// Gathers `[indices.len() x hidden]` rows.
    pub fn forward(&mut self, indices: &[usize]) -> Result<FpTensor> {
        let vocab = self.vocab();
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(Error::Index { index: bad, len: vocab });
        }
        let rows = self.quantized_table()?.gather_rows(indices)?;
        self.cache = Some(indices.to_vec());
        Ok(inverse_map(&rows))
    }

    /// Scatter-adds the mapped output gradient into a `[vocab x hidden]`
    /// table gradient. Rows that were not looked up stay zero.
    pub fn backward(&mut self, grad_out: &FpTensor) -> Result<FpTensor> {
        let h = self.hidden();
        let n = match &self.cache {
            Some(idx) => idx.len(),
            None => return Err(Error::State("embedding backward without a preceding forward")),
        };
        if grad_out.shape() != [n, h] {
            return Err(Error::shape(&[n, h], grad_out.shape()));
        }
        let indices = self.cache.take().expect("checked above");
        let ghat = map_to_dfp(grad_out, self.config.b_gradients, self.config.backward_mode(self.id, self.step))?;
        let max_k = max_reduction_len(ghat.bits(), 2);
        if n as u64 > max_k {
            return Err(Error::OverflowGuard {
                k: n,
                bits_a: ghat.bits(),
                bits_b: 2,
                max_k,
            });
        }
        let mut acc = vec![0i64; self.vocab() * h];
        for (&row, g) in indices.iter().zip(ghat.values().chunks(h)) {
            for (a, &v) in acc[row * h..(row + 1) * h].iter_mut().zip(g) {
                *a += v as i64;
            }
        }
        inverse_map_wide(&WideAccumulator::new(acc, ghat.step_exponent(), vec![self.vocab(), h])?)
    }
}
