//! FP32 multi-head scaled dot-product attention with key padding masks.

use intft_core::{FpTensor, Result};

#[derive(Debug, Clone)]
pub(super) struct AttentionCache {
    q: FpTensor,
    k: FpTensor,
    v: FpTensor,
    /// `[batch, heads, seq, seq]`; masked keys hold 0.
    probs: Vec<f32>,
    lengths: Vec<usize>,
    seq: usize,
    heads: usize,
}

/// `q`, `k`, `v` are `[batch * seq, hidden]`; keys at or beyond each
/// example's length are masked out.
pub(super) fn forward(
    q: FpTensor,
    k: FpTensor,
    v: FpTensor,
    lengths: &[usize],
    seq: usize,
    heads: usize,
) -> Result<(FpTensor, AttentionCache)> {
    let h = q.last_dim();
    let dh = h / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let bsz = lengths.len();
    let mut probs = vec![0f32; bsz * heads * seq * seq];
    let mut ctx = vec![0f32; bsz * seq * h];
    let mut scores = vec![0f32; seq];
    for b in 0..bsz {
        let len = lengths[b];
        for a in 0..heads {
            let cols = a * dh..(a + 1) * dh;
            for s in 0..seq {
                let qs = &q.row(b * seq + s)[cols.clone()];
                let mut max = f32::NEG_INFINITY;
                for t in 0..len {
                    let kt = &k.row(b * seq + t)[cols.clone()];
                    let dot: f32 = qs.iter().zip(kt).map(|(x, y)| x * y).sum();
                    scores[t] = dot * scale;
                    max = max.max(scores[t]);
                }
                let p = &mut probs[((b * heads + a) * seq + s) * seq..][..seq];
                let mut z = 0f32;
                for t in 0..len {
                    p[t] = (scores[t] - max).exp();
                    z += p[t];
                }
                let out = &mut ctx[(b * seq + s) * h..][cols.clone()];
                for t in 0..len {
                    p[t] /= z;
                    let vt = &v.row(b * seq + t)[cols.clone()];
                    for (o, x) in out.iter_mut().zip(vt) {
                        *o += p[t] * x;
                    }
                }
            }
        }
    }
    let ctx = FpTensor::new(ctx, vec![bsz * seq, h])?;
    Ok((
        ctx,
        AttentionCache {
            q,
            k,
            v,
            probs,
            lengths: lengths.to_vec(),
            seq,
            heads,
        },
    ))
}

/// Gradients with respect to `q`, `k`, `v` given the context gradient.
pub(super) fn backward(c: &AttentionCache, dctx: &FpTensor) -> Result<(FpTensor, FpTensor, FpTensor)> {
    let (seq, heads) = (c.seq, c.heads);
    let h = c.q.last_dim();
    let dh = h / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let n = c.q.rows();
    let mut dq = vec![0f32; n * h];
    let mut dk = vec![0f32; n * h];
    let mut dv = vec![0f32; n * h];
    let mut dp = vec![0f32; seq];
    for (b, &len) in c.lengths.iter().enumerate() {
        for a in 0..heads {
            let cols = a * dh..(a + 1) * dh;
            for s in 0..seq {
                let p = &c.probs[((b * heads + a) * seq + s) * seq..][..seq];
                let g = &dctx.row(b * seq + s)[cols.clone()];
                let mut dot_pdp = 0f32;
                for t in 0..len {
                    let vt = &c.v.row(b * seq + t)[cols.clone()];
                    dp[t] = g.iter().zip(vt).map(|(x, y)| x * y).sum();
                    dot_pdp += p[t] * dp[t];
                    let dvt = &mut dv[(b * seq + t) * h..][cols.clone()];
                    for (d, x) in dvt.iter_mut().zip(g) {
                        *d += p[t] * x;
                    }
                }
                let qs = &c.q.row(b * seq + s)[cols.clone()];
                for t in 0..len {
                    let ds = p[t] * (dp[t] - dot_pdp) * scale;
                    let kt = &c.k.row(b * seq + t)[cols.clone()];
                    let dqs = &mut dq[(b * seq + s) * h..][cols.clone()];
                    for (d, x) in dqs.iter_mut().zip(kt) {
                        *d += ds * x;
                    }
                    let dkt = &mut dk[(b * seq + t) * h..][cols.clone()];
                    for (d, x) in dkt.iter_mut().zip(qs) {
                        *d += ds * x;
                    }
                }
            }
        }
    }
    let shape = vec![n, h];
    Ok((
        FpTensor::new(dq, shape.clone())?,
        FpTensor::new(dk, shape.clone())?,
        FpTensor::new(dv, shape)?,
    ))
}
