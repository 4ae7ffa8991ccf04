//! Composite layers built from graph primitives, plus weight initializers.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::graph::{Graph, NodeId};
use crate::autodiff::tensor::TensorF;
use crate::error::{Error, Result};

/// Affine layer y = x W + b. Accepts rank-2 [N, d_in] or rank-3 [B, T, d_in]
/// activations; rank-3 inputs are flattened over the leading axes and
/// restored afterwards.
pub fn dense(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let sx = g.value(x).shape().to_vec();
    let sw = g.value(w).shape().to_vec();
    if sw.len() != 2 {
        return Err(Error::validation(format!("dense weight must be rank-2, got {:?}", sw)));
    }
    let d_in = *sx
        .last()
        .ok_or_else(|| Error::validation("dense input must have a last axis"))?;
    if d_in != sw[0] {
        return Err(Error::validation(format!("dense shapes {:?} x {:?}", sx, sw)));
    }
    let d_out = sw[1];
    match sx.len() {
        2 => {
            let h = g.matmul(x, w)?;
            g.add_suffix(h, b)
        }
        3 => {
            let rows = sx[0] * sx[1];
            let flat = g.reshape(x, vec![rows, d_in])?;
            let h = g.matmul(flat, w)?;
            let hb = g.add_suffix(h, b)?;
            g.reshape(hb, vec![sx[0], sx[1], d_out])
        }
        _ => Err(Error::validation(format!("dense input rank {} unsupported", sx.len()))),
    }
}

/// Projection weights for one attention layer. All four matrices are
/// [d_model, d_model]; biases are [d_model].
pub struct AttentionWeights {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

/// Scaled dot-product multi-head self-attention over x [B, T, D].
/// Pre/post-norm placement is the caller's job; this computes only
/// softmax(Q K^T / sqrt(d_head)) V followed by the output projection.
/// `attn_dropout` is applied to the attention probabilities in train mode.
pub fn multi_head_attention(
    g: &mut Graph,
    x: NodeId,
    w: &AttentionWeights,
    heads: usize,
    attn_dropout: f64,
) -> Result<NodeId> {
    let sx = g.value(x).shape().to_vec();
    if sx.len() != 3 {
        return Err(Error::validation(format!("attention input must be rank-3, got {:?}", sx)));
    }
    let d = sx[2];
    if heads == 0 || d % heads != 0 {
        return Err(Error::validation(format!("d_model {d} not divisible by {heads} heads")));
    }
    let d_head = d / heads;

    let q = dense(g, x, w.wq, w.bq)?;
    let k = dense(g, x, w.wk, w.bk)?;
    let v = dense(g, x, w.wv, w.bv)?;
    let qh = g.split_heads(q, heads)?;
    let kh = g.split_heads(k, heads)?;
    let vh = g.split_heads(v, heads)?;

    let scores = g.bmm(qh, kh, true)?;
    let scaled = g.scale(scores, 1.0 / (d_head as f64).sqrt())?;
    let probs = g.softmax(scaled)?;
    let probs = g.dropout(probs, attn_dropout)?;
    let ctx = g.bmm(probs, vh, false)?;
    let merged = g.merge_heads(ctx, heads)?;
    dense(g, merged, w.wo, w.bo)
}

/// Fixed sinusoidal positional-encoding table [seq_len, dim]:
/// even columns sin(pos / 10000^(2i/dim)), odd columns the matching cos.
pub fn sinusoidal_encoding(seq_len: usize, dim: usize) -> Result<TensorF> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::validation(format!("sinusoidal encoding dim {dim} must be even")));
    }
    let mut values = vec![0.0; seq_len * dim];
    for pos in 0..seq_len {
        for i in 0..dim / 2 {
            let rate = (pos as f64) / 10_000_f64.powf(2.0 * i as f64 / dim as f64);
            values[pos * dim + 2 * i] = rate.sin();
            values[pos * dim + 2 * i + 1] = rate.cos();
        }
    }
    TensorF::new(vec![seq_len, dim], values)
}

/// Glorot-uniform sample over [-limit, limit), limit = sqrt(6/(fan_in+fan_out)).
pub fn glorot_uniform(
    rng: &mut ChaCha12Rng,
    fan_in: usize,
    fan_out: usize,
    shape: Vec<usize>,
) -> TensorF {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| limit * (2.0 * rng.random::<f64>() - 1.0)).collect();
    TensorF::new(shape, values).expect("shape/product agree")
}

/// N(0, std) sample, used for CLS tokens and learnable positions.
pub fn normal_init(rng: &mut ChaCha12Rng, std: f64, shape: Vec<usize>) -> TensorF {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    TensorF::new(shape, values).expect("shape/product agree")
}
