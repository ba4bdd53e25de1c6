//! Tiny post-LN transformer encoder classifier.
//!
//! Linear, layer-norm and embedding layers run on integers when the model is
//! built with a [`QuantConfig`]; attention scores, softmax, GELU, dropout,
//! pooling and the loss stay in FP32. The FP32 build has the same topology
//! and, for a given seed, the same initial parameters.

mod attention;
pub mod layers;

use intft_core::layers::{LinearGrads, QuantConfig};
use intft_core::{FpTensor, StreamKey};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Result, TrainError};
use layers::{Embedding, LayerNorm, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TinyTransformerConfig {
    pub vocab: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub classes: usize,
    pub dropout: f32,
    pub init_std: f32,
    pub ln_epsilon: f64,
}

impl Default for TinyTransformerConfig {
    fn default() -> Self {
        Self {
            vocab: 32,
            hidden: 16,
            layers: 1,
            heads: 2,
            max_len: 8,
            classes: 2,
            dropout: 0.0,
            init_std: 0.1,
            ln_epsilon: 1e-5,
        }
    }
}

impl TinyTransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab", self.vocab),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("heads", self.heads),
            ("max_len", self.max_len),
            ("classes", self.classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(TrainError::Config(format!("{name} must be positive")));
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(TrainError::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TrainError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) || !(self.ln_epsilon > 0.0) {
            return Err(TrainError::Config("init_std and ln_epsilon must be positive".into()));
        }
        Ok(())
    }

    pub fn ffn_hidden(&self) -> usize {
        4 * self.hidden
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Precision {
    Fp32,
    Integer(QuantConfig),
}

impl Precision {
    fn quant(&self) -> Option<QuantConfig> {
        match self {
            Self::Fp32 => None,
            Self::Integer(q) => Some(*q),
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: LayerNorm,
    ffn1: Linear,
    ffn2: Linear,
    ln2: LayerNorm,
    cache: Option<BlockCache>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    attn: attention::AttentionCache,
    ffn_pre: FpTensor,
    drop_attn: Option<Vec<f32>>,
    drop_ffn: Option<Vec<f32>>,
}

const BLOCK_TENSORS: [&str; 16] = [
    "q.weight", "q.bias", "k.weight", "k.bias", "v.weight", "v.bias", "o.weight", "o.bias",
    "ln1.gamma", "ln1.beta", "ffn1.weight", "ffn1.bias", "ffn2.weight", "ffn2.bias",
    "ln2.gamma", "ln2.beta",
];

#[derive(Debug, Clone)]
struct ModelCache {
    lengths: Vec<usize>,
    batch: usize,
    pooled_rows: usize,
    logits: FpTensor,
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: TinyTransformerConfig,
    precision: Precision,
    seed: u64,
    tok: Embedding,
    pos: Embedding,
    emb_ln: LayerNorm,
    blocks: Vec<Block>,
    head: Linear,
    cache: Option<ModelCache>,
}

/// Dropout sites get stream ids above any layer id.
const DROPOUT_STREAM_BASE: u64 = 1 << 32;

impl Model {
    pub fn build(cfg: TinyTransformerConfig, precision: Precision, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let quant = precision.quant();
        if let Some(q) = &quant {
            q.validate()?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, cfg.init_std).map_err(|e| TrainError::Config(e.to_string()))?;
        let mut init = |shape: &[usize]| FpTensor::from_fn(shape, |_| normal.sample(&mut rng));
        let mut ids = 0u64..;
        let mut next = || ids.next().unwrap();

        let (h, f) = (cfg.hidden, cfg.ffn_hidden());
        let tok = Embedding::build(init(&[cfg.vocab, h]), quant, next())?;
        let pos = Embedding::build(init(&[cfg.max_len, h]), quant, next())?;
        let emb_ln = LayerNorm::build(h, cfg.ln_epsilon, quant, next())?;
        let linear = |i: usize, o: usize, init: &mut dyn FnMut(&[usize]) -> FpTensor, id: u64| {
            Linear::build(init(&[o, i]), FpTensor::zeros(&[o]), quant, id)
        };
        let mut blocks = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            blocks.push(Block {
                q: linear(h, h, &mut init, next())?,
                k: linear(h, h, &mut init, next())?,
                v: linear(h, h, &mut init, next())?,
                o: linear(h, h, &mut init, next())?,
                ln1: LayerNorm::build(h, cfg.ln_epsilon, quant, next())?,
                ffn1: linear(h, f, &mut init, next())?,
                ffn2: linear(f, h, &mut init, next())?,
                ln2: LayerNorm::build(h, cfg.ln_epsilon, quant, next())?,
                cache: None,
            });
        }
        let head = linear(h, cfg.classes, &mut init, next())?;
        Ok(Self {
            cfg,
            precision,
            seed,
            tok,
            pos,
            emb_ln,
            blocks,
            head,
            cache: None,
        })
    }

    pub fn config(&self) -> &TinyTransformerConfig {
        &self.cfg
    }

    pub fn precision(&self) -> &Precision {
        &self.precision
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut names: Vec<String> = ["tok.table", "pos.table", "emb_ln.gamma", "emb_ln.beta"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for l in 0..self.blocks.len() {
            names.extend(BLOCK_TENSORS.iter().map(|t| format!("blocks.{l}.{t}")));
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }

    pub fn parameters(&self) -> Vec<&FpTensor> {
        let mut out = self.tok.params();
        out.extend(self.pos.params());
        out.extend(self.emb_ln.params());
        for b in &self.blocks {
            for l in [&b.q, &b.k, &b.v, &b.o] {
                out.extend(l.params());
            }
            out.extend(b.ln1.params());
            out.extend(b.ffn1.params());
            out.extend(b.ffn2.params());
            out.extend(b.ln2.params());
        }
        out.extend(self.head.params());
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut FpTensor> {
        let mut out = self.tok.params_mut();
        out.extend(self.pos.params_mut());
        out.extend(self.emb_ln.params_mut());
        for b in &mut self.blocks {
            for l in [&mut b.q, &mut b.k, &mut b.v, &mut b.o] {
                out.extend(l.params_mut());
            }
            out.extend(b.ln1.params_mut());
            out.extend(b.ffn1.params_mut());
            out.extend(b.ffn2.params_mut());
            out.extend(b.ln2.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    /// Replaces every master tensor; shapes must match.
    pub fn load_parameters(&mut self, values: &[FpTensor]) -> Result<()> {
        let mut params = self.parameters_mut();
        if params.len() != values.len() {
            return Err(TrainError::Config(format!(
                "expected {} tensors, got {}",
                params.len(),
                values.len()
            )));
        }
        for (p, v) in params.iter_mut().zip(values) {
            if p.shape() != v.shape() {
                return Err(intft_core::Error::Shape {
                    expected: p.shape().to_vec(),
                    actual: v.shape().to_vec(),
                }
                .into());
            }
        }
        for (p, v) in params.into_iter().zip(values) {
            p.values_mut().copy_from_slice(v.values());
        }
        Ok(())
    }

    fn set_step(&mut self, step: u64) {
        self.tok.set_step(step);
        self.pos.set_step(step);
        self.emb_ln.set_step(step);
        for b in &mut self.blocks {
            for l in [&mut b.q, &mut b.k, &mut b.v, &mut b.o, &mut b.ffn1, &mut b.ffn2] {
                l.set_step(step);
            }
            b.ln1.set_step(step);
            b.ln2.set_step(step);
        }
        self.head.set_step(step);
    }

    fn dropout_mask(&self, len: usize, site: u64, step: u64) -> Option<Vec<f32>> {
        let p = self.cfg.dropout;
        if p == 0.0 {
            return None;
        }
        let key = StreamKey::new(self.seed, DROPOUT_STREAM_BASE + site, step);
        let mut rng = ChaCha8Rng::seed_from_u64(key.id());
        let keep = 1.0 / (1.0 - p);
        Some((0..len).map(|_| if rng.gen::<f32>() < p { 0.0 } else { keep }).collect())
    }

    /// Logits `[batch x classes]`. `step` selects rounding streams and, when
    /// `train` is set, dropout masks.
    pub fn forward(&mut self, batch: &Batch, train: bool, step: u64) -> Result<FpTensor> {
        let (bsz, s) = (batch.size(), batch.seq_len);
        if s > self.cfg.max_len {
            return Err(TrainError::Config(format!(
                "sequence length {s} exceeds max_len {}",
                self.cfg.max_len
            )));
        }
        if batch.lengths.iter().any(|&l| l == 0 || l > s) {
            return Err(TrainError::Config("every example needs 1..=seq_len tokens".into()));
        }
        self.set_step(step);
        let h = self.cfg.hidden;
        let n = bsz * s;

        let positions: Vec<usize> = (0..n).map(|i| i % s).collect();
        let mut x = self.tok.forward(&batch.tokens)?;
        let p = self.pos.forward(&positions)?;
        for (a, b) in x.values_mut().iter_mut().zip(p.values()) {
            *a += b;
        }
        let mut x = self.emb_ln.forward(&x)?;

        for li in 0..self.blocks.len() {
            let site = 2 * li as u64;
            let drop_attn = if train { self.dropout_mask(n * h, site, step) } else { None };
            let drop_ffn = if train { self.dropout_mask(n * h, site + 1, step) } else { None };
            let block = &mut self.blocks[li];

            let q = block.q.forward(&x)?;
            let k = block.k.forward(&x)?;
            let v = block.v.forward(&x)?;
            let (ctx, attn) = attention::forward(q, k, v, &batch.lengths, s, self.cfg.heads)?;
            let mut o = block.o.forward(&ctx)?;
            apply_mask(&mut o, drop_attn.as_deref());
            for (a, b) in o.values_mut().iter_mut().zip(x.values()) {
                *a += b;
            }
            let x1 = block.ln1.forward(&o)?;

            let u = block.ffn1.forward(&x1)?;
            let act = FpTensor::new(u.values().iter().map(|&v| gelu(v)).collect(), u.shape().to_vec())?;
            let mut f = block.ffn2.forward(&act)?;
            apply_mask(&mut f, drop_ffn.as_deref());
            for (a, b) in f.values_mut().iter_mut().zip(x1.values()) {
                *a += b;
            }
            x = block.ln2.forward(&f)?;
            block.cache = Some(BlockCache {
                attn,
                ffn_pre: u,
                drop_attn,
                drop_ffn,
            });
        }

        let mut pooled = vec![0f32; bsz * h];
        for b in 0..bsz {
            let len = batch.lengths[b];
            let out = &mut pooled[b * h..(b + 1) * h];
            for t in 0..len {
                for (o, v) in out.iter_mut().zip(x.row(b * s + t)) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|o| *o /= len as f32);
        }
        let logits = self.head.forward(&FpTensor::new(pooled, vec![bsz, h])?)?;
        self.cache = Some(ModelCache {
            lengths: batch.lengths.clone(),
            batch: bsz,
            pooled_rows: s,
            logits: logits.clone(),
        });
        Ok(logits)
    }

    /// Mean cross-entropy of the cached forward pass against `labels`, and
    /// gradients for every parameter in [`Model::parameters`] order.
    pub fn backward(&mut self, labels: &[usize]) -> Result<(f64, Vec<FpTensor>)> {
        let cache = self
            .cache
            .take()
            .ok_or(TrainError::Numeric(intft_core::Error::State("backward called before forward")))?;
        let (bsz, s, h) = (cache.batch, cache.pooled_rows, self.cfg.hidden);
        if labels.len() != bsz {
            return Err(TrainError::Config(format!("{} labels for a batch of {bsz}", labels.len())));
        }
        let (loss, dlogits) = cross_entropy(&cache.logits, labels)?;

        // gradients are collected back to front and reversed at the end
        let mut grads: Vec<FpTensor> = Vec::new();
        let g = self.head.backward(&dlogits)?;
        let dpooled = push_linear(&mut grads, g);

        let mut dx = vec![0f32; bsz * s * h];
        for b in 0..bsz {
            let len = cache.lengths[b];
            for t in 0..len {
                for (d, g) in dx[(b * s + t) * h..(b * s + t + 1) * h].iter_mut().zip(dpooled.row(b)) {
                    *d = g / len as f32;
                }
            }
        }
        let mut dx = FpTensor::new(dx, vec![bsz * s, h])?;

        for block in self.blocks.iter_mut().rev() {
            let bc = block
                .cache
                .take()
                .ok_or(TrainError::Numeric(intft_core::Error::State("backward called before forward")))?;
            let g = block.ln2.backward(&dx)?;
            grads.push(g.beta);
            grads.push(g.gamma);
            let dr2 = g.input;
            let mut df = dr2.clone();
            apply_mask(&mut df, bc.drop_ffn.as_deref());
            let g = block.ffn2.backward(&df)?;
            let mut du = push_linear(&mut grads, g);
            for (d, &u) in du.values_mut().iter_mut().zip(bc.ffn_pre.values()) {
                *d *= gelu_grad(u);
            }
            let g = block.ffn1.backward(&du)?;
            let mut dx1 = push_linear(&mut grads, g);
            for (a, b) in dx1.values_mut().iter_mut().zip(dr2.values()) {
                *a += b;
            }
            let g = block.ln1.backward(&dx1)?;
            grads.push(g.beta);
            grads.push(g.gamma);
            let dr1 = g.input;
            let mut d_o = dr1.clone();
            apply_mask(&mut d_o, bc.drop_attn.as_deref());
            let g = block.o.backward(&d_o)?;
            let dctx = push_linear(&mut grads, g);
            let (dq, dk, dv) = attention::backward(&bc.attn, &dctx)?;
            let mut dx0 = dr1;
            for (layer, d) in [(&mut block.v, dv), (&mut block.k, dk), (&mut block.q, dq)] {
                let g = layer.backward(&d)?;
                let di = push_linear(&mut grads, g);
                for (a, b) in dx0.values_mut().iter_mut().zip(di.values()) {
                    *a += b;
                }
            }
            dx = dx0;
        }

        let g = self.emb_ln.backward(&dx)?;
        grads.push(g.beta);
        grads.push(g.gamma);
        grads.push(self.pos.backward(&g.input)?);
        grads.push(self.tok.backward(&g.input)?);
        grads.reverse();
        Ok((loss, grads))
    }

    /// Forward plus backward on one batch.
    pub fn loss_and_grads(&mut self, batch: &Batch, step: u64) -> Result<(f64, Vec<FpTensor>)> {
        self.forward(batch, true, step)?;
        self.backward(&batch.labels)
    }

    /// Mean loss and number of correct argmax predictions, without dropout.
    pub fn evaluate(&mut self, batch: &Batch, step: u64) -> Result<(f64, usize)> {
        let logits = self.forward(batch, false, step)?;
        self.clear_cache();
        let (loss, _) = cross_entropy(&logits, &batch.labels)?;
        let correct = (0..batch.size())
            .filter(|&b| argmax(logits.row(b)) == batch.labels[b])
            .count();
        Ok((loss, correct))
    }

    fn clear_cache(&mut self) {
        self.cache = None;
        for b in &mut self.blocks {
            b.cache = None;
        }
    }
}

/// Pushes bias and weight gradients (reverse order) and returns the input gradient.
fn push_linear(grads: &mut Vec<FpTensor>, g: LinearGrads) -> FpTensor {
    grads.extend(g.bias);
    grads.push(g.weight);
    g.input
}

fn apply_mask(t: &mut FpTensor, mask: Option<&[f32]>) {
    if let Some(m) = mask {
        for (v, k) in t.values_mut().iter_mut().zip(m) {
            *v *= k;
        }
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &FpTensor, labels: &[usize]) -> Result<(f64, FpTensor)> {
    let (bsz, c) = (logits.rows(), logits.last_dim());
    if labels.len() != bsz {
        return Err(TrainError::Config(format!("{} labels for {bsz} rows", labels.len())));
    }
    let mut total = 0f64;
    let mut grad = vec![0f32; bsz * c];
    for (b, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(TrainError::Config(format!("label {label} out of range for {c} classes")));
        }
        let row = logits.row(b);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f32> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f32 = exps.iter().sum();
        total += (z.ln() - (row[label] - max)) as f64;
        for j in 0..c {
            let p = exps[j] / z;
            grad[b * c + j] = (p - f32::from(u8::from(j == label))) / bsz as f32;
        }
    }
    Ok((total / bsz as f64, FpTensor::new(grad, vec![bsz, c])?))
}

#[cfg(test)]
mod tests;
