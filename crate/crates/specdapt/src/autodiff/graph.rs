//! Reverse-mode automatic differentiation over a define-by-run tape.
//!
//! A [`Graph`] is built once per batch: leaves are inserted for the batch
//! input and for every parameter tensor, ops are applied eagerly (forward
//! values are computed at build time), and [`Graph::backward`] walks the
//! tape in reverse creation order accumulating analytic gradients.
//!
//! Shape contracts are stated on each op constructor. Every op output is
//! finite-checked; a NaN/Inf anywhere trips [`Error::NonFinite`].

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use statrs::function::erf::erf;

use crate::autodiff::tensor::TensorF;
use crate::error::{Error, Result};

pub type NodeId = usize;

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Probability floor applied before any log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Conv1d boundary handling; stride is always 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Bmm { a: NodeId, b: NodeId, transpose_b: bool },
    Add { a: NodeId, b: NodeId },
    /// `b`'s shape is a suffix of `x`'s shape; `b` is broadcast over the
    /// leading axes (bias add, positional-encoding add).
    AddSuffix { x: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    Relu { x: NodeId },
    Gelu { x: NodeId },
    /// Mask entries are 0 or 1/(1-rate) (inverted dropout).
    Dropout { x: NodeId, mask: Vec<f64> },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, normed: Vec<f64>, inv_std: Vec<f64> },
    /// Output value holds the softmax itself.
    Softmax { x: NodeId },
    /// Scalar mean over the batch of -sum_j y_j log softmax(logits)_j.
    CrossEntropy { logits: NodeId, labels: Vec<f64>, probs: Vec<f64> },
    Reshape { x: NodeId },
    /// [B, T, H*dh] -> [B*H, T, dh]
    SplitHeads { x: NodeId, heads: usize },
    /// [B*H, T, dh] -> [B, T, H*dh]
    MergeHeads { x: NodeId, heads: usize },
    /// token [D] broadcast to position 0 of every sample: [B,T,D] -> [B,T+1,D]
    PrependToken { token: NodeId, x: NodeId },
    /// [B, T, D] -> [B, D] picking one token index
    SelectToken { x: NodeId, index: usize },
    /// x [B,C,L], kernel [F,C,K] -> [B,F,L_out]; stores im2col buffers.
    Conv1d { x: NodeId, kernel: NodeId, padding: Padding, cols: Vec<f64> },
    /// x [B,C,L] + bias [C] broadcast over batch and position.
    AddChannelBias { x: NodeId, b: NodeId },
    SumAll { x: NodeId },
}

struct Node {
    value: TensorF,
    op: Op,
    /// True when some leaf below this node wants a gradient.
    grad_needed: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient w.r.t. the node's value, if it was required and reached.
    pub fn wrt(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like `shape`; zeros if never reached.
    pub fn wrt_or_zeros(&self, id: NodeId, shape: &[usize]) -> TensorF {
        match self.wrt(id) {
            Some(g) => TensorF::new(shape.to_vec(), g.to_vec()).expect("gradient shape"),
            None => TensorF::zeros(shape.to_vec()),
        }
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    rng: Option<ChaCha12Rng>,
    check_finite: bool,
}

impl Graph {
    /// Training-mode graph; `rng` drives dropout masks.
    pub fn train(rng: ChaCha12Rng) -> Self {
        Graph { nodes: Vec::new(), mode: Mode::Train, rng: Some(rng), check_finite: true }
    }

    pub fn eval() -> Self {
        Graph { nodes: Vec::new(), mode: Mode::Eval, rng: None, check_finite: true }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn value(&self, id: NodeId) -> &TensorF {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: TensorF, op: Op, grad_needed: bool) -> Result<NodeId> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::non_finite(format!(
                "op output of shape {:?} contains NaN/Inf",
                value.shape()
            )));
        }
        self.nodes.push(Node { value, op, grad_needed });
        Ok(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].grad_needed)
    }

    /// Inserts a leaf tensor. `requires_grad` marks it as a gradient target
    /// (trainable parameter, or an input being differentiated).
    pub fn leaf(&mut self, value: TensorF, requires_grad: bool) -> Result<NodeId> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: TensorF) -> Result<NodeId> {
        self.leaf(value, false)
    }

    // -- ops ---------------------------------------------------------------

    /// C[m,n] = A[m,k] . B[k,n]
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::validation(format!("matmul shapes {:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        dgemm_nn(
            m,
            k,
            n,
            self.nodes[a].value.values(),
            self.nodes[b].value.values(),
            &mut out,
            false,
        );
        let needed = self.needs(&[a, b]);
        self.push(TensorF::new(vec![m, n], out)?, Op::Matmul { a, b }, needed)
    }

    /// Batched matmul. `a` is [b,m,k]; `b` is [b,k,n] (or [b,n,k] with
    /// `transpose_b`, computing A . B^T per batch item).
    pub fn bmm(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        let (sa, sb) = (
            self.nodes[a].value.shape().to_vec(),
            self.nodes[b].value.shape().to_vec(),
        );
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::validation(format!("bmm shapes {:?} x {:?}", sa, sb)));
        }
        let (nb, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let k_b = if transpose_b { sb[2] } else { sb[1] };
        if k != k_b {
            return Err(Error::validation(format!("bmm inner dims {:?} x {:?}", sa, sb)));
        }
        let av = self.nodes[a].value.values();
        let bv = self.nodes[b].value.values();
        let mut out = vec![0.0; nb * m * n];
        for i in 0..nb {
            let asl = &av[i * m * k..(i + 1) * m * k];
            let bsl = &bv[i * k * n..(i + 1) * k * n];
            let osl = &mut out[i * m * n..(i + 1) * m * n];
            if transpose_b {
                dgemm_nt(m, k, n, asl, bsl, osl, false);
            } else {
                dgemm_nn(m, k, n, asl, bsl, osl, false);
            }
        }
        let needed = self.needs(&[a, b]);
        self.push(TensorF::new(vec![nb, m, n], out)?, Op::Bmm { a, b, transpose_b }, needed)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(Error::validation(format!(
                "add shapes {:?} vs {:?}",
                self.nodes[a].value.shape(),
                self.nodes[b].value.shape()
            )));
        }
        let out: Vec<f64> = self.nodes[a]
            .value
            .values()
            .iter()
            .zip(self.nodes[b].value.values())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a].value.shape().to_vec();
        let needed = self.needs(&[a, b]);
        self.push(TensorF::new(shape, out)?, Op::Add { a, b }, needed)
    }

    /// y = x + broadcast(b) where b's shape is a suffix of x's shape.
    pub fn add_suffix(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let sx = self.nodes[x].value.shape().to_vec();
        let sb = self.nodes[b].value.shape().to_vec();
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != sb[..] {
            return Err(Error::validation(format!("add_suffix shapes {:?} + {:?}", sx, sb)));
        }
        let bn = self.nodes[b].value.len();
        let xv = self.nodes[x].value.values();
        let bv = self.nodes[b].value.values();
        let mut out = Vec::with_capacity(xv.len());
        for chunk in xv.chunks_exact(bn) {
            out.extend(chunk.iter().zip(bv).map(|(x, y)| x + y));
        }
        let needed = self.needs(&[x, b]);
        self.push(TensorF::new(sx, out)?, Op::AddSuffix { x, b }, needed)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(Error::validation("mul shape mismatch".to_string()));
        }
        let out: Vec<f64> = self.nodes[a]
            .value
            .values()
            .iter()
            .zip(self.nodes[b].value.values())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a].value.shape().to_vec();
        let needed = self.needs(&[a, b]);
        self.push(TensorF::new(shape, out)?, Op::Mul { a, b }, needed)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let out: Vec<f64> = self.nodes[x].value.values().iter().map(|v| v * c).collect();
        let shape = self.nodes[x].value.shape().to_vec();
        let needed = self.needs(&[x]);
        self.push(TensorF::new(shape, out)?, Op::Scale { x, c }, needed)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.nodes[x].value.values().iter().map(|v| v.max(0.0)).collect();
        let shape = self.nodes[x].value.shape().to_vec();
        let needed = self.needs(&[x]);
        self.push(TensorF::new(shape, out)?, Op::Relu { x }, needed)
    }

    /// Exact GELU: 0.5 x (1 + erf(x / sqrt(2))).
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.nodes[x]
            .value
            .values()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + erf(v * INV_SQRT_2)))
            .collect();
        let shape = self.nodes[x].value.shape().to_vec();
        let needed = self.needs(&[x]);
        self.push(TensorF::new(shape, out)?, Op::Gelu { x }, needed)
    }

    /// Inverted dropout: in train mode keeps each unit with probability
    /// 1-rate and scales by 1/(1-rate); in eval mode it is the identity.
    pub fn dropout(&mut self, x: NodeId, rate: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::validation(format!("dropout rate {rate} outside [0,1)")));
        }
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let rng = self
            .rng
            .as_mut()
            .ok_or_else(|| Error::validation("train-mode dropout needs an rng"))?;
        let keep = 1.0 - rate;
        let inv = 1.0 / keep;
        let mask: Vec<f64> = (0..self.nodes[x].value.len())
            .map(|_| if rng.random::<f64>() < keep { inv } else { 0.0 })
            .collect();
        let out: Vec<f64> = self.nodes[x]
            .value
            .values()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let shape = self.nodes[x].value.shape().to_vec();
        let needed = self.needs(&[x]);
        self.push(TensorF::new(shape, out)?, Op::Dropout { x, mask }, needed)
    }

    /// Layer normalization over the last axis with epsilon 1e-5.
    /// gain and bias are rank-1 of the last-axis width.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        const EPS: f64 = 1e-5;
        let sx = self.nodes[x].value.shape().to_vec();
        let d = *sx.last().ok_or_else(|| Error::validation("layer_norm on rank-0"))?;
        if self.nodes[gain].value.shape() != [d] || self.nodes[bias].value.shape() != [d] {
            return Err(Error::validation("layer_norm gain/bias must be rank-1 of last-axis width"));
        }
        let xv = self.nodes[x].value.values();
        let g = self.nodes[gain].value.values();
        let bv = self.nodes[bias].value.values();
        let rows = xv.len() / d;
        let mut normed = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let nm = (row[j] - mean) * is;
                normed[r * d + j] = nm;
                out[r * d + j] = g[j] * nm + bv[j];
            }
        }
        let needed = self.needs(&[x, gain, bias]);
        self.push(
            TensorF::new(sx, out)?,
            Op::LayerNorm { x, gain, bias, normed, inv_std },
            needed,
        )
    }

    /// Row-wise softmax over the last axis, stabilized by max subtraction.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.nodes[x].value.shape().to_vec();
        let d = *sx.last().ok_or_else(|| Error::validation("softmax on rank-0"))?;
        let out = softmax_rows(self.nodes[x].value.values(), d);
        let needed = self.needs(&[x]);
        self.push(TensorF::new(sx, out)?, Op::Softmax { x }, needed)
    }

    /// Mean over the batch of the soft-label cross entropy
    /// -sum_j y_j log softmax(logits)_j. Labels are a constant [B,M] tensor
    /// whose rows must lie on the probability simplex (tolerance 1e-6).
    pub fn cross_entropy_mean(&mut self, logits: NodeId, labels: &TensorF) -> Result<NodeId> {
        let sl = self.nodes[logits].value.shape().to_vec();
        if sl.len() != 2 || labels.shape() != sl {
            return Err(Error::validation(format!(
                "cross_entropy shapes: logits {:?}, labels {:?}",
                sl,
                labels.shape()
            )));
        }
        let (b, m) = (sl[0], sl[1]);
        for (i, row) in labels.values().chunks_exact(m).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < -1e-12) {
                return Err(Error::validation(format!(
                    "label row {i} off the probability simplex (sum {s})"
                )));
            }
        }
        let lv = self.nodes[logits].value.values();
        let probs = softmax_rows(lv, m);
        let mut total = 0.0;
        for i in 0..b {
            let row = &lv[i * m..(i + 1) * m];
            let y = &labels.values()[i * m..(i + 1) * m];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let dot: f64 = row.iter().zip(y).map(|(l, yy)| l * yy).sum();
            total += lse - dot;
        }
        let needed = self.needs(&[logits]);
        self.push(
            TensorF::scalar(total / b as f64),
            Op::CrossEntropy { logits, labels: labels.values().to_vec(), probs },
            needed,
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.nodes[x].value.reshaped(shape)?;
        let needed = self.needs(&[x]);
        self.push(value, Op::Reshape { x }, needed)
    }

    /// [B, T, H*dh] -> [B*H, T, dh] so attention heads become batch items.
    pub fn split_heads(&mut self, x: NodeId, heads: usize) -> Result<NodeId> {
        let s = self.nodes[x].value.shape().to_vec();
        if s.len() != 3 || s[2] % heads != 0 {
            return Err(Error::validation(format!("split_heads on {:?} with {heads} heads", s)));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let dh = d / heads;
        let xv = self.nodes[x].value.values();
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            for h in 0..heads {
                for ti in 0..t {
                    let src = (bi * t + ti) * d + h * dh;
                    let dst = ((bi * heads + h) * t + ti) * dh;
                    out[dst..dst + dh].copy_from_slice(&xv[src..src + dh]);
                }
            }
        }
        let needed = self.needs(&[x]);
        self.push(
            TensorF::new(vec![b * heads, t, dh], out)?,
            Op::SplitHeads { x, heads },
            needed,
        )
    }

    /// [B*H, T, dh] -> [B, T, H*dh], inverse of `split_heads`.
    pub fn merge_heads(&mut self, x: NodeId, heads: usize) -> Result<NodeId> {
        let s = self.nodes[x].value.shape().to_vec();
        if s.len() != 3 || s[0] % heads != 0 {
            return Err(Error::validation(format!("merge_heads on {:?} with {heads} heads", s)));
        }
        let (bh, t, dh) = (s[0], s[1], s[2]);
        let b = bh / heads;
        let d = dh * heads;
        let xv = self.nodes[x].value.values();
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            for h in 0..heads {
                for ti in 0..t {
                    let src = ((bi * heads + h) * t + ti) * dh;
                    let dst = (bi * t + ti) * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&xv[src..src + dh]);
                }
            }
        }
        let needed = self.needs(&[x]);
        self.push(TensorF::new(vec![b, t, d], out)?, Op::MergeHeads { x, heads }, needed)
    }

    /// Broadcasts a learnable token [D] to sequence position 0 of every
    /// sample: [B,T,D] -> [B,T+1,D].
    pub fn prepend_token(&mut self, token: NodeId, x: NodeId) -> Result<NodeId> {
        let st = self.nodes[token].value.shape().to_vec();
        let sx = self.nodes[x].value.shape().to_vec();
        if st.len() != 1 || sx.len() != 3 || st[0] != sx[2] {
            return Err(Error::validation(format!("prepend_token {:?} to {:?}", st, sx)));
        }
        let (b, t, d) = (sx[0], sx[1], sx[2]);
        let tv = self.nodes[token].value.values();
        let xv = self.nodes[x].value.values();
        let mut out = vec![0.0; b * (t + 1) * d];
        for bi in 0..b {
            let base = bi * (t + 1) * d;
            out[base..base + d].copy_from_slice(tv);
            out[base + d..base + (t + 1) * d].copy_from_slice(&xv[bi * t * d..(bi + 1) * t * d]);
        }
        let needed = self.needs(&[token, x]);
        self.push(
            TensorF::new(vec![b, t + 1, d], out)?,
            Op::PrependToken { token, x },
            needed,
        )
    }

    /// [B,T,D] -> [B,D] extracting one sequence position.
    pub fn select_token(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let s = self.nodes[x].value.shape().to_vec();
        if s.len() != 3 || index >= s[1] {
            return Err(Error::validation(format!("select_token {index} from {:?}", s)));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let xv = self.nodes[x].value.values();
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            let src = (bi * t + index) * d;
            out[bi * d..(bi + 1) * d].copy_from_slice(&xv[src..src + d]);
        }
        let needed = self.needs(&[x]);
        self.push(TensorF::new(vec![b, d], out)?, Op::SelectToken { x, index }, needed)
    }

    /// 1-D convolution, stride 1. x is [B,C,L], kernel [F,C,K].
    /// Valid padding gives L-K+1 output positions; Same keeps L.
    pub fn conv1d(&mut self, x: NodeId, kernel: NodeId, padding: Padding) -> Result<NodeId> {
        let sx = self.nodes[x].value.shape().to_vec();
        let sk = self.nodes[kernel].value.shape().to_vec();
        if sx.len() != 3 || sk.len() != 3 || sx[1] != sk[1] {
            return Err(Error::validation(format!("conv1d shapes x {:?}, kernel {:?}", sx, sk)));
        }
        let (b, c, l) = (sx[0], sx[1], sx[2]);
        let (f, _, k) = (sk[0], sk[1], sk[2]);
        if k > l && padding == Padding::Valid {
            return Err(Error::validation(format!("conv1d kernel {k} longer than input {l}")));
        }
        let (l_out, pad_left) = match padding {
            Padding::Valid => (l - k + 1, 0usize),
            Padding::Same => (l, (k - 1) / 2),
        };
        let xv = self.nodes[x].value.values();
        let kv = self.nodes[kernel].value.values();
        // im2col: per sample, cols[(ci*k + kk), t] = x[ci, t + kk - pad]
        let ck = c * k;
        let mut cols = vec![0.0; b * ck * l_out];
        for bi in 0..b {
            let xb = &xv[bi * c * l..(bi + 1) * c * l];
            let cb = &mut cols[bi * ck * l_out..(bi + 1) * ck * l_out];
            for ci in 0..c {
                for kk in 0..k {
                    let row = &mut cb[(ci * k + kk) * l_out..(ci * k + kk + 1) * l_out];
                    for (t, slot) in row.iter_mut().enumerate() {
                        let src = t + kk;
                        if src >= pad_left && src - pad_left < l {
                            *slot = xb[ci * l + (src - pad_left)];
                        }
                    }
                }
            }
        }
        let mut out = vec![0.0; b * f * l_out];
        for bi in 0..b {
            dgemm_nn(
                f,
                ck,
                l_out,
                kv,
                &cols[bi * ck * l_out..(bi + 1) * ck * l_out],
                &mut out[bi * f * l_out..(bi + 1) * f * l_out],
                false,
            );
        }
        let needed = self.needs(&[x, kernel]);
        self.push(
            TensorF::new(vec![b, f, l_out], out)?,
            Op::Conv1d { x, kernel, padding, cols },
            needed,
        )
    }

    /// Per-channel bias: x [B,C,L] + b [C].
    pub fn add_channel_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let sx = self.nodes[x].value.shape().to_vec();
        let sb = self.nodes[b].value.shape().to_vec();
        if sx.len() != 3 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::validation(format!("add_channel_bias {:?} + {:?}", sx, sb)));
        }
        let (nb, c, l) = (sx[0], sx[1], sx[2]);
        let xv = self.nodes[x].value.values();
        let bv = self.nodes[b].value.values();
        let mut out = Vec::with_capacity(xv.len());
        for bi in 0..nb {
            for ci in 0..c {
                let base = (bi * c + ci) * l;
                out.extend(xv[base..base + l].iter().map(|v| v + bv[ci]));
            }
        }
        let needed = self.needs(&[x, b]);
        self.push(TensorF::new(sx, out)?, Op::AddChannelBias { x, b }, needed)
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let s: f64 = self.nodes[x].value.values().iter().sum();
        let needed = self.needs(&[x]);
        self.push(TensorF::scalar(s), Op::SumAll { x }, needed)
    }

    // -- backward ----------------------------------------------------------

    /// Reverse pass from a scalar loss node. Returns per-node gradients for
    /// every leaf marked `requires_grad` (and intermediate flow-through).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes[loss].value.len() != 1 {
            return Err(Error::validation("backward needs a scalar loss node"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            if !self.nodes[id].grad_needed {
                grads[id] = None;
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue; // keep leaf grads for the caller
            }
            let Some(gy) = grads[id].take() else { continue };
            self.propagate(id, &gy, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: NodeId, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |i: NodeId| nodes[i].grad_needed;
        macro_rules! buf {
            ($i:expr) => {{
                let i = $i;
                if grads[i].is_none() {
                    grads[i] = Some(vec![0.0; nodes[i].value.len()]);
                }
                grads[i].as_mut().unwrap()
            }};
        }
        match &nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    // dA += dC . B^T
                    let bv = nodes[*b].value.values().to_vec();
                    dgemm_nt(m, n, k, gy, &bv, buf!(*a), true);
                }
                if wants(*b) {
                    // dB += A^T . dC
                    let av = nodes[*a].value.values().to_vec();
                    dgemm_tn(k, m, n, &av, gy, buf!(*b), true);
                }
            }
            Op::Bmm { a, b, transpose_b } => {
                let sa = nodes[*a].value.shape().to_vec();
                let sb = nodes[*b].value.shape().to_vec();
                let (nb, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *transpose_b { sb[1] } else { sb[2] };
                let av = nodes[*a].value.values().to_vec();
                let bv = nodes[*b].value.values().to_vec();
                if wants(*a) {
                    let ga = buf!(*a);
                    for i in 0..nb {
                        let gsl = &gy[i * m * n..(i + 1) * m * n];
                        let bsl = &bv[i * bv.len() / nb..(i + 1) * bv.len() / nb];
                        let asl = &mut ga[i * m * k..(i + 1) * m * k];
                        if *transpose_b {
                            // C = A.B^T  =>  dA += dC . B
                            dgemm_nn(m, n, k, gsl, bsl, asl, true);
                        } else {
                            // dA += dC . B^T
                            dgemm_nt(m, n, k, gsl, bsl, asl, true);
                        }
                    }
                }
                if wants(*b) {
                    let gb = buf!(*b);
                    let bsz = gb.len() / nb;
                    for i in 0..nb {
                        let gsl = &gy[i * m * n..(i + 1) * m * n];
                        let asl = &av[i * m * k..(i + 1) * m * k];
                        let bslot = &mut gb[i * bsz..(i + 1) * bsz];
                        if *transpose_b {
                            // dB += dC^T . A
                            dgemm_tn(n, m, k, gsl, asl, bslot, true);
                        } else {
                            // dB += A^T . dC
                            dgemm_tn(k, m, n, asl, gsl, bslot, true);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    axpy(buf!(*a), gy, 1.0);
                }
                if wants(*b) {
                    axpy(buf!(*b), gy, 1.0);
                }
            }
            Op::AddSuffix { x, b } => {
                if wants(*x) {
                    axpy(buf!(*x), gy, 1.0);
                }
                if wants(*b) {
                    let gb = buf!(*b);
                    let bn = gb.len();
                    for chunk in gy.chunks_exact(bn) {
                        for (g, c) in gb.iter_mut().zip(chunk) {
                            *g += c;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                if wants(*a) {
                    let bv = nodes[*b].value.values().to_vec();
                    for ((g, y), v) in buf!(*a).iter_mut().zip(gy).zip(&bv) {
                        *g += y * v;
                    }
                }
                if wants(*b) {
                    let av = nodes[*a].value.values().to_vec();
                    for ((g, y), v) in buf!(*b).iter_mut().zip(gy).zip(&av) {
                        *g += y * v;
                    }
                }
            }
            Op::Scale { x, c } => {
                if wants(*x) {
                    axpy(buf!(*x), gy, *c);
                }
            }
            Op::Relu { x } => {
                if wants(*x) {
                    let xv = nodes[*x].value.values().to_vec();
                    for ((g, y), v) in buf!(*x).iter_mut().zip(gy).zip(&xv) {
                        if *v > 0.0 {
                            *g += y;
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                if wants(*x) {
                    let xv = nodes[*x].value.values().to_vec();
                    for ((g, y), &v) in buf!(*x).iter_mut().zip(gy).zip(&xv) {
                        let cdf = 0.5 * (1.0 + erf(v * INV_SQRT_2));
                        let pdf = INV_SQRT_2PI * (-0.5 * v * v).exp();
                        *g += y * (cdf + v * pdf);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if wants(*x) {
                    for ((g, y), m) in buf!(*x).iter_mut().zip(gy).zip(mask) {
                        *g += y * m;
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, normed, inv_std } => {
                let d = nodes[*gain].value.len();
                let rows = normed.len() / d;
                let gv = nodes[*gain].value.values().to_vec();
                if wants(*gain) {
                    let gg = buf!(*gain);
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += gy[r * d + j] * normed[r * d + j];
                        }
                    }
                }
                if wants(*bias) {
                    let gb = buf!(*bias);
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += gy[r * d + j];
                        }
                    }
                }
                if wants(*x) {
                    let gx = buf!(*x);
                    let dn = d as f64;
                    for r in 0..rows {
                        let base = r * d;
                        let mut mean_dn = 0.0;
                        let mut mean_dn_nm = 0.0;
                        for j in 0..d {
                            let dnorm = gy[base + j] * gv[j];
                            mean_dn += dnorm;
                            mean_dn_nm += dnorm * normed[base + j];
                        }
                        mean_dn /= dn;
                        mean_dn_nm /= dn;
                        for j in 0..d {
                            let dnorm = gy[base + j] * gv[j];
                            gx[base + j] +=
                                inv_std[r] * (dnorm - mean_dn - normed[base + j] * mean_dn_nm);
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                if wants(*x) {
                    let sv = nodes[id].value.values().to_vec();
                    let d = *nodes[id].value.shape().last().unwrap();
                    let gx = buf!(*x);
                    for r in 0..sv.len() / d {
                        let base = r * d;
                        let dot: f64 =
                            (0..d).map(|j| gy[base + j] * sv[base + j]).sum();
                        for j in 0..d {
                            gx[base + j] += sv[base + j] * (gy[base + j] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if wants(*logits) {
                    let m = *nodes[*logits].value.shape().last().unwrap();
                    let b = probs.len() / m;
                    let scale = gy[0] / b as f64;
                    let gl = buf!(*logits);
                    for i in 0..probs.len() {
                        gl[i] += scale * (probs[i] - labels[i]);
                    }
                }
            }
            Op::Reshape { x } => {
                if wants(*x) {
                    axpy(buf!(*x), gy, 1.0);
                }
            }
            Op::SplitHeads { x, heads } => {
                if wants(*x) {
                    let s = nodes[id].value.shape();
                    let (bh, t, dh) = (s[0], s[1], s[2]);
                    let b = bh / heads;
                    let d = dh * heads;
                    let gx = buf!(*x);
                    for bi in 0..b {
                        for h in 0..*heads {
                            for ti in 0..t {
                                let src = ((bi * heads + h) * t + ti) * dh;
                                let dst = (bi * t + ti) * d + h * dh;
                                for j in 0..dh {
                                    gx[dst + j] += gy[src + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { x, heads } => {
                if wants(*x) {
                    let s = nodes[id].value.shape();
                    let (b, t, d) = (s[0], s[1], s[2]);
                    let dh = d / heads;
                    let gx = buf!(*x);
                    for bi in 0..b {
                        for h in 0..*heads {
                            for ti in 0..t {
                                let src = (bi * t + ti) * d + h * dh;
                                let dst = ((bi * heads + h) * t + ti) * dh;
                                for j in 0..dh {
                                    gx[dst + j] += gy[src + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::PrependToken { token, x } => {
                let s = nodes[id].value.shape();
                let (b, t1, d) = (s[0], s[1], s[2]);
                let t = t1 - 1;
                if wants(*token) {
                    let gt = buf!(*token);
                    for bi in 0..b {
                        let base = bi * t1 * d;
                        for j in 0..d {
                            gt[j] += gy[base + j];
                        }
                    }
                }
                if wants(*x) {
                    let gx = buf!(*x);
                    for bi in 0..b {
                        let src = bi * t1 * d + d;
                        let dst = bi * t * d;
                        for j in 0..t * d {
                            gx[dst + j] += gy[src + j];
                        }
                    }
                }
            }
            Op::SelectToken { x, index } => {
                if wants(*x) {
                    let s = nodes[*x].value.shape();
                    let (b, t, d) = (s[0], s[1], s[2]);
                    let gx = buf!(*x);
                    for bi in 0..b {
                        let dst = (bi * t + index) * d;
                        for j in 0..d {
                            gx[dst + j] += gy[bi * d + j];
                        }
                    }
                }
            }
            Op::Conv1d { x, kernel, padding, cols } => {
                let sx = nodes[*x].value.shape().to_vec();
                let sk = nodes[*kernel].value.shape().to_vec();
                let (b, c, l) = (sx[0], sx[1], sx[2]);
                let (f, _, k) = (sk[0], sk[1], sk[2]);
                let l_out = nodes[id].value.shape()[2];
                let pad_left = match padding {
                    Padding::Valid => 0usize,
                    Padding::Same => (k - 1) / 2,
                };
                let ck = c * k;
                if wants(*kernel) {
                    let gk = buf!(*kernel);
                    for bi in 0..b {
                        // dK += dOut_b . cols_b^T
                        dgemm_nt(
                            f,
                            l_out,
                            ck,
                            &gy[bi * f * l_out..(bi + 1) * f * l_out],
                            &cols[bi * ck * l_out..(bi + 1) * ck * l_out],
                            gk,
                            true,
                        );
                    }
                }
                if wants(*x) {
                    let kv = nodes[*kernel].value.values().to_vec();
                    let gx = buf!(*x);
                    let mut dcols = vec![0.0; ck * l_out];
                    for bi in 0..b {
                        dcols.iter_mut().for_each(|v| *v = 0.0);
                        // dcols = K^T . dOut_b
                        dgemm_tn(
                            ck,
                            f,
                            l_out,
                            &kv,
                            &gy[bi * f * l_out..(bi + 1) * f * l_out],
                            &mut dcols,
                            true,
                        );
                        let gxb = &mut gx[bi * c * l..(bi + 1) * c * l];
                        for ci in 0..c {
                            for kk in 0..k {
                                let row = &dcols[(ci * k + kk) * l_out..(ci * k + kk + 1) * l_out];
                                for (t, &g) in row.iter().enumerate() {
                                    let src = t + kk;
                                    if src >= pad_left && src - pad_left < l {
                                        gxb[ci * l + (src - pad_left)] += g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::AddChannelBias { x, b } => {
                if wants(*x) {
                    axpy(buf!(*x), gy, 1.0);
                }
                if wants(*b) {
                    let s = nodes[*x].value.shape();
                    let (nb, c, l) = (s[0], s[1], s[2]);
                    let gb = buf!(*b);
                    for bi in 0..nb {
                        for ci in 0..c {
                            let base = (bi * c + ci) * l;
                            gb[ci] += gy[base..base + l].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::SumAll { x } => {
                if wants(*x) {
                    let g = gy[0];
                    for slot in buf!(*x).iter_mut() {
                        *slot += g;
                    }
                }
            }
        }
    }
}

// -- kernels ----------------------------------------------------------------

fn axpy(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

/// C (+)= A[m,k] . B[k,n], all row-major.
fn dgemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C (+)= A[m,k] . B^T where B is stored row-major [n,k].
fn dgemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C (+)= A^T . B where A is stored row-major [k,m], B row-major [k,n],
/// producing C [m,n].
fn dgemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn softmax_rows(x: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}
