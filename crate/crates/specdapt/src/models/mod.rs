//! The four classifier architectures, built over the autodiff layer set.
//!
//! A [`ModelBundle`] owns the parameter store plus an ordered list of
//! logical layers (the freeze-indexing unit: each entry is one trainable
//! layer such as a dense map, a layer norm, or the CLS token, never a
//! composite block). Construction order defines layer order.

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::graph::{Graph, NodeId, Padding};
use crate::autodiff::layers::{
    dense, glorot_uniform, multi_head_attention, normal_init, sinusoidal_encoding,
    AttentionWeights,
};
use crate::autodiff::params::ParamStore;
use crate::autodiff::tensor::TensorF;
use crate::error::{Error, Result};
use crate::spectra::synth::zscore;
use crate::spectra::types::LabeledDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMethod {
    Linear,
    Mlp,
    Cnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosEncoding {
    Sinusoidal,
    Learnable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchSpec {
    Mlp {
        n_bins: usize,
        n_classes: usize,
        hidden: Vec<usize>,
        dropout: f64,
    },
    Cnn {
        n_bins: usize,
        n_classes: usize,
        filters: usize,
        kernel: usize,
        hidden: Vec<usize>,
        dropout: f64,
    },
    /// Reshapes the input into sqrt(n_bins) tokens of that same width,
    /// adds fixed sinusoidal encodings, then post-norm attention blocks
    /// and a flatten+dense head.
    TbnnLi {
        n_bins: usize,
        n_classes: usize,
        blocks: usize,
        heads: usize,
        ff_dim: usize,
        dropout: f64,
    },
    /// Patch embedding, learnable CLS token and positions, pre-norm
    /// blocks, CLS extraction, MLP head.
    TbnnOurs {
        n_bins: usize,
        n_classes: usize,
        patch: usize,
        embed_filters: usize,
        embed_dim: usize,
        blocks: usize,
        heads: usize,
        ff_dim: usize,
        embedding: EmbeddingMethod,
        pos_encoding: PosEncoding,
        dropout: f64,
    },
}

impl ArchSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ArchSpec::Mlp { .. } => "MLP",
            ArchSpec::Cnn { .. } => "CNN",
            ArchSpec::TbnnLi { .. } => "TBNN(Li)",
            ArchSpec::TbnnOurs { .. } => "TBNN(ours)",
        }
    }

    /// Stable identifier used in file names and result records.
    pub fn kind_id(&self) -> &'static str {
        match self {
            ArchSpec::Mlp { .. } => "mlp",
            ArchSpec::Cnn { .. } => "cnn",
            ArchSpec::TbnnLi { .. } => "tbnn_li",
            ArchSpec::TbnnOurs { .. } => "tbnn_ours",
        }
    }

    pub fn n_bins(&self) -> usize {
        match *self {
            ArchSpec::Mlp { n_bins, .. }
            | ArchSpec::Cnn { n_bins, .. }
            | ArchSpec::TbnnLi { n_bins, .. }
            | ArchSpec::TbnnOurs { n_bins, .. } => n_bins,
        }
    }

    pub fn n_classes(&self) -> usize {
        match *self {
            ArchSpec::Mlp { n_classes, .. }
            | ArchSpec::Cnn { n_classes, .. }
            | ArchSpec::TbnnLi { n_classes, .. }
            | ArchSpec::TbnnOurs { n_classes, .. } => n_classes,
        }
    }

    pub fn dropout(&self) -> f64 {
        match *self {
            ArchSpec::Mlp { dropout, .. }
            | ArchSpec::Cnn { dropout, .. }
            | ArchSpec::TbnnLi { dropout, .. }
            | ArchSpec::TbnnOurs { dropout, .. } => dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bins() == 0 || self.n_classes() < 2 {
            return Err(Error::validation("need n_bins > 0 and at least two classes"));
        }
        if !(0.0..1.0).contains(&self.dropout()) {
            return Err(Error::validation(format!("dropout {} outside [0,1)", self.dropout())));
        }
        match *self {
            ArchSpec::Mlp { ref hidden, .. } => {
                if hidden.is_empty() || hidden.contains(&0) {
                    return Err(Error::validation("MLP needs nonempty, nonzero hidden sizes"));
                }
            }
            ArchSpec::Cnn { n_bins, filters, kernel, ref hidden, .. } => {
                if filters == 0 || kernel == 0 || kernel > n_bins {
                    return Err(Error::validation(format!(
                        "CNN filters {filters} / kernel {kernel} invalid for {n_bins} bins"
                    )));
                }
                if hidden.is_empty() || hidden.contains(&0) {
                    return Err(Error::validation("CNN needs nonempty, nonzero hidden sizes"));
                }
            }
            ArchSpec::TbnnLi { n_bins, blocks, heads, ff_dim, .. } => {
                let t = token_width(n_bins)?;
                if heads == 0 || t % heads != 0 {
                    return Err(Error::validation(format!(
                        "token width {t} not divisible by {heads} heads"
                    )));
                }
                if blocks == 0 || ff_dim == 0 {
                    return Err(Error::validation("need at least one block and ff_dim > 0"));
                }
            }
            ArchSpec::TbnnOurs {
                n_bins,
                patch,
                embed_filters,
                embed_dim,
                blocks,
                heads,
                ff_dim,
                embedding,
                ..
            } => {
                if patch == 0 || n_bins % patch != 0 {
                    return Err(Error::validation(format!(
                        "patch size {patch} must divide n_bins {n_bins}"
                    )));
                }
                if heads == 0 || embed_dim % heads != 0 {
                    return Err(Error::validation(format!(
                        "embedding dim {embed_dim} not divisible by {heads} heads"
                    )));
                }
                if blocks == 0 || ff_dim == 0 || embed_dim == 0 {
                    return Err(Error::validation("need blocks, ff_dim, embed_dim all > 0"));
                }
                if embedding == EmbeddingMethod::Cnn && embed_filters == 0 {
                    return Err(Error::validation("CNN embedding needs at least one filter"));
                }
            }
        }
        Ok(())
    }

    // Best-run architecture hyperparameters for the full-size models.

    pub fn paper_mlp(n_bins: usize, n_classes: usize) -> Self {
        ArchSpec::Mlp { n_bins, n_classes, hidden: vec![4096, 2048], dropout: 0.346 }
    }

    pub fn paper_cnn(n_bins: usize, n_classes: usize) -> Self {
        ArchSpec::Cnn {
            n_bins,
            n_classes,
            filters: 32,
            kernel: 7,
            hidden: vec![2048, 1024],
            dropout: 0.101,
        }
    }

    pub fn paper_tbnn_li(n_bins: usize, n_classes: usize) -> Self {
        ArchSpec::TbnnLi { n_bins, n_classes, blocks: 5, heads: 4, ff_dim: 1024, dropout: 4.53e-4 }
    }

    pub fn paper_tbnn_ours(n_bins: usize, n_classes: usize) -> Self {
        ArchSpec::TbnnOurs {
            n_bins,
            n_classes,
            patch: 64,
            embed_filters: 8,
            embed_dim: 256,
            blocks: 4,
            heads: 8,
            ff_dim: 512,
            embedding: EmbeddingMethod::Cnn,
            pos_encoding: PosEncoding::Learnable,
            dropout: 0.0198,
        }
    }
}

fn token_width(n_bins: usize) -> Result<usize> {
    let t = (n_bins as f64).sqrt().round() as usize;
    if t * t != n_bins {
        return Err(Error::validation(format!(
            "n_bins {n_bins} is not a perfect square, cannot reshape to tokens"
        )));
    }
    Ok(t)
}

/// One freeze-indexing unit and the parameter tensors it owns.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerInfo {
    pub name: String,
    pub tensors: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub spec: ArchSpec,
    pub params: ParamStore,
    pub layers: Vec<LayerInfo>,
}

struct Builder<'r> {
    params: ParamStore,
    layers: Vec<LayerInfo>,
    rng: &'r mut ChaCha12Rng,
}

impl<'r> Builder<'r> {
    fn new(rng: &'r mut ChaCha12Rng) -> Self {
        Builder { params: ParamStore::new(), layers: Vec::new(), rng }
    }

    fn dense(&mut self, name: &str, d_in: usize, d_out: usize) -> Result<()> {
        let w = glorot_uniform(self.rng, d_in, d_out, vec![d_in, d_out]);
        self.params.insert(&format!("{name}.w"), w)?;
        self.params.insert(&format!("{name}.b"), TensorF::zeros(vec![d_out]))?;
        self.layers.push(LayerInfo {
            name: name.to_string(),
            tensors: vec![format!("{name}.w"), format!("{name}.b")],
        });
        Ok(())
    }

    fn conv(&mut self, name: &str, filters: usize, in_ch: usize, kernel: usize) -> Result<()> {
        let k = glorot_uniform(
            self.rng,
            in_ch * kernel,
            filters * kernel,
            vec![filters, in_ch, kernel],
        );
        self.params.insert(&format!("{name}.k"), k)?;
        self.params.insert(&format!("{name}.b"), TensorF::zeros(vec![filters]))?;
        self.layers.push(LayerInfo {
            name: name.to_string(),
            tensors: vec![format!("{name}.k"), format!("{name}.b")],
        });
        Ok(())
    }

    fn layer_norm(&mut self, name: &str, d: usize) -> Result<()> {
        self.params.insert(&format!("{name}.g"), TensorF::full(vec![d], 1.0))?;
        self.params.insert(&format!("{name}.b"), TensorF::zeros(vec![d]))?;
        self.layers.push(LayerInfo {
            name: name.to_string(),
            tensors: vec![format!("{name}.g"), format!("{name}.b")],
        });
        Ok(())
    }

    fn token(&mut self, name: &str, shape: Vec<usize>) -> Result<()> {
        let t = normal_init(self.rng, 0.02, shape);
        self.params.insert(name, t)?;
        self.layers.push(LayerInfo { name: name.to_string(), tensors: vec![name.to_string()] });
        Ok(())
    }

    fn attention(&mut self, prefix: &str, d: usize) -> Result<()> {
        for part in ["q", "k", "v", "o"] {
            self.dense(&format!("{prefix}.attn.{part}"), d, d)?;
        }
        Ok(())
    }
}

/// Builds a freshly initialized model: Glorot-uniform weights, zero
/// biases, N(0, 0.02) CLS token and learnable positions.
pub fn build(spec: &ArchSpec, rng: &mut ChaCha12Rng) -> Result<ModelBundle> {
    spec.validate()?;
    let mut b = Builder::new(rng);
    match spec {
        ArchSpec::Mlp { n_bins, n_classes, hidden, .. } => {
            let mut d = *n_bins;
            for (i, &h) in hidden.iter().enumerate() {
                b.dense(&format!("dense{}", i + 1), d, h)?;
                d = h;
            }
            b.dense("out", d, *n_classes)?;
        }
        ArchSpec::Cnn { n_bins, n_classes, filters, kernel, hidden, .. } => {
            b.conv("conv1", *filters, 1, *kernel)?;
            let l_out = n_bins - kernel + 1;
            let mut d = filters * l_out;
            for (i, &h) in hidden.iter().enumerate() {
                b.dense(&format!("dense{}", i + 1), d, h)?;
                d = h;
            }
            b.dense("out", d, *n_classes)?;
        }
        ArchSpec::TbnnLi { n_bins, n_classes, blocks, ff_dim, .. } => {
            let t = token_width(*n_bins)?;
            for i in 1..=*blocks {
                b.attention(&format!("block{i}"), t)?;
                b.layer_norm(&format!("block{i}.ln1"), t)?;
                b.dense(&format!("block{i}.ff1"), t, *ff_dim)?;
                b.dense(&format!("block{i}.ff2"), *ff_dim, t)?;
                b.layer_norm(&format!("block{i}.ln2"), t)?;
            }
            b.dense("out", t * t, *n_classes)?;
        }
        ArchSpec::TbnnOurs {
            n_bins,
            n_classes,
            patch,
            embed_filters,
            embed_dim,
            blocks,
            ff_dim,
            embedding,
            pos_encoding,
            ..
        } => {
            match embedding {
                EmbeddingMethod::Linear => {
                    b.dense("embed.proj", *patch, *embed_dim)?;
                }
                EmbeddingMethod::Mlp => {
                    b.dense("embed.fc1", *patch, *embed_dim)?;
                    b.dense("embed.proj", *embed_dim, *embed_dim)?;
                }
                EmbeddingMethod::Cnn => {
                    b.conv("embed.conv", *embed_filters, 1, 3)?;
                    b.dense("embed.proj", embed_filters * patch, *embed_dim)?;
                }
            }
            b.token("embed.cls", vec![*embed_dim])?;
            if *pos_encoding == PosEncoding::Learnable {
                let tokens = n_bins / patch + 1;
                b.token("embed.pos", vec![tokens, *embed_dim])?;
            }
            for i in 1..=*blocks {
                b.layer_norm(&format!("block{i}.ln1"), *embed_dim)?;
                b.attention(&format!("block{i}"), *embed_dim)?;
                b.layer_norm(&format!("block{i}.ln2"), *embed_dim)?;
                b.dense(&format!("block{i}.ff1"), *embed_dim, *ff_dim)?;
                b.dense(&format!("block{i}.ff2"), *ff_dim, *embed_dim)?;
            }
            b.dense("head.fc", *embed_dim, *embed_dim)?;
            b.dense("out", *embed_dim, *n_classes)?;
        }
    }
    Ok(ModelBundle { spec: spec.clone(), params: b.params, layers: b.layers })
}

/// A built computation graph, input and logits node handles, and the
/// graph node for every parameter (aligned with the store's order).
pub struct Forward {
    pub graph: Graph,
    pub input: NodeId,
    pub logits: NodeId,
    pub param_nodes: Vec<NodeId>,
}

#[derive(Default)]
pub struct GraphOpts {
    pub train: bool,
    pub rng: Option<ChaCha12Rng>,
    pub dropout_override: Option<f64>,
    pub param_grads: bool,
    pub input_grad: bool,
}

impl ModelBundle {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.params.save(path)
    }

    /// Loads a checkpoint for a known architecture, verifying that the
    /// stored tensors line up with what the spec would construct.
    pub fn load(spec: &ArchSpec, path: &std::path::Path) -> Result<ModelBundle> {
        use rand::SeedableRng;
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut bundle = build(spec, &mut rng)?;
        let loaded = ParamStore::load(path)?;
        if loaded.names() != bundle.params.names() {
            return Err(Error::corrupt(format!(
                "{}: stored parameters do not match a {} model",
                path.display(),
                spec.kind_name()
            )));
        }
        for i in 0..loaded.len() {
            let (name, tensor, _) = loaded.at(i);
            if tensor.shape() != bundle.params.at(i).1.shape() {
                return Err(Error::corrupt(format!(
                    "{}: parameter {name} has shape {:?}, expected {:?}",
                    path.display(),
                    tensor.shape(),
                    bundle.params.at(i).1.shape()
                )));
            }
        }
        bundle.params = loaded;
        Ok(bundle)
    }

    pub fn n_params(&self) -> usize {
        self.params.n_values()
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.layers.iter().map(|l| l.name.as_str()).collect()
    }

    /// Builds the forward graph over a [B, n_bins] batch of zscored
    /// inputs, returning logits [B, n_classes].
    pub fn build_graph(&self, x: &TensorF, opts: GraphOpts) -> Result<Forward> {
        if x.rank() != 2 || x.shape()[1] != self.spec.n_bins() {
            return Err(Error::validation(format!(
                "input shape {:?}, expected [batch, {}]",
                x.shape(),
                self.spec.n_bins()
            )));
        }
        let mut graph = if opts.train {
            let rng = opts
                .rng
                .ok_or_else(|| Error::validation("train-mode graph needs an rng"))?;
            Graph::train(rng)
        } else {
            Graph::eval()
        };
        let input = graph.leaf(x.clone(), opts.input_grad)?;
        let mut param_nodes = Vec::with_capacity(self.params.len());
        for i in 0..self.params.len() {
            let (_, tensor, trainable) = self.params.at(i);
            let requires = opts.param_grads && trainable;
            param_nodes.push(graph.leaf(tensor.clone(), requires)?);
        }
        let dropout = opts.dropout_override.unwrap_or(self.spec.dropout());
        let logits = emit_logits(&self.spec, &mut graph, &self.params, &param_nodes, input, dropout)?;
        Ok(Forward { graph, input, logits, param_nodes })
    }

    /// Eval-mode logits, computed in batches of 256 rows.
    pub fn predict_logits(&self, x: &TensorF) -> Result<TensorF> {
        let n = x.shape()[0];
        let n_bins = self.spec.n_bins();
        let m = self.spec.n_classes();
        let mut out = Vec::with_capacity(n * m);
        let mut row = 0;
        while row < n {
            let take = (n - row).min(256);
            let chunk = TensorF::new(
                vec![take, n_bins],
                x.values()[row * n_bins..(row + take) * n_bins].to_vec(),
            )?;
            let fwd = self.build_graph(&chunk, GraphOpts::default())?;
            out.extend_from_slice(fwd.graph.value(fwd.logits).values());
            row += take;
        }
        TensorF::new(vec![n, m], out)
    }

    /// Eval-mode class probabilities (rows on the simplex).
    pub fn predict_proba(&self, x: &TensorF) -> Result<TensorF> {
        let logits = self.predict_logits(x)?;
        Ok(logits_to_probs(&logits))
    }
}

/// Stabilized row-wise softmax over a [N, M] logits tensor.
pub fn logits_to_probs(logits: &TensorF) -> TensorF {
    let m = *logits.shape().last().expect("rank >= 1");
    let mut out = logits.values().to_vec();
    for row in out.chunks_exact_mut(m) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    TensorF::new(logits.shape().to_vec(), out).expect("shape preserved")
}

/// Per-spectrum zscored inputs as an [N, n_bins] tensor.
pub fn zscored_inputs(ds: &LabeledDataset) -> TensorF {
    let n_bins = ds.spectra.first().map(|s| s.counts.len()).unwrap_or(0);
    let mut values = Vec::with_capacity(ds.n() * n_bins);
    for sp in &ds.spectra {
        values.extend(zscore(&sp.counts));
    }
    TensorF::new(vec![ds.n(), n_bins], values).expect("consistent dataset")
}

/// Label matrix as an [N, M] tensor.
pub fn labels_tensor(ds: &LabeledDataset) -> TensorF {
    TensorF::new(vec![ds.n(), ds.n_classes()], ds.labels.clone()).expect("consistent dataset")
}

fn node_of(params: &ParamStore, nodes: &[NodeId], name: &str) -> NodeId {
    nodes[params.position(name).unwrap_or_else(|| panic!("parameter {name} exists"))]
}

fn attention_weights(params: &ParamStore, nodes: &[NodeId], prefix: &str) -> AttentionWeights {
    let n = |suffix: &str| node_of(params, nodes, &format!("{prefix}.attn.{suffix}"));
    AttentionWeights {
        wq: n("q.w"),
        bq: n("q.b"),
        wk: n("k.w"),
        bk: n("k.b"),
        wv: n("v.w"),
        bv: n("v.b"),
        wo: n("o.w"),
        bo: n("o.b"),
    }
}

fn emit_logits(
    spec: &ArchSpec,
    g: &mut Graph,
    params: &ParamStore,
    nodes: &[NodeId],
    input: NodeId,
    dropout: f64,
) -> Result<NodeId> {
    let nd = |name: &str| node_of(params, nodes, name);
    let batch = g.value(input).shape()[0];
    match spec {
        ArchSpec::Mlp { hidden, .. } => {
            let mut h = input;
            for i in 1..=hidden.len() {
                h = dense(g, h, nd(&format!("dense{i}.w")), nd(&format!("dense{i}.b")))?;
                h = g.relu(h)?;
                h = g.dropout(h, dropout)?;
            }
            dense(g, h, nd("out.w"), nd("out.b"))
        }
        ArchSpec::Cnn { n_bins, filters, kernel, hidden, .. } => {
            let mut h = g.reshape(input, vec![batch, 1, *n_bins])?;
            h = g.conv1d(h, nd("conv1.k"), Padding::Valid)?;
            h = g.add_channel_bias(h, nd("conv1.b"))?;
            h = g.relu(h)?;
            h = g.dropout(h, dropout)?;
            let l_out = n_bins - kernel + 1;
            h = g.reshape(h, vec![batch, filters * l_out])?;
            for i in 1..=hidden.len() {
                h = dense(g, h, nd(&format!("dense{i}.w")), nd(&format!("dense{i}.b")))?;
                h = g.relu(h)?;
                h = g.dropout(h, dropout)?;
            }
            dense(g, h, nd("out.w"), nd("out.b"))
        }
        ArchSpec::TbnnLi { n_bins, blocks, heads, .. } => {
            let t = token_width(*n_bins)?;
            let mut h = g.reshape(input, vec![batch, t, t])?;
            let pe = g.constant(sinusoidal_encoding(t, t)?)?;
            h = g.add_suffix(h, pe)?;
            for i in 1..=*blocks {
                let w = attention_weights(params, nodes, &format!("block{i}"));
                let a = multi_head_attention(g, h, &w, *heads, dropout)?;
                let a = g.dropout(a, dropout)?;
                let s = g.add(h, a)?;
                let n1 = g.layer_norm(
                    s,
                    nd(&format!("block{i}.ln1.g")),
                    nd(&format!("block{i}.ln1.b")),
                )?;
                let mut f = dense(g, n1, nd(&format!("block{i}.ff1.w")), nd(&format!("block{i}.ff1.b")))?;
                f = g.gelu(f)?;
                f = g.dropout(f, dropout)?;
                f = dense(g, f, nd(&format!("block{i}.ff2.w")), nd(&format!("block{i}.ff2.b")))?;
                f = g.dropout(f, dropout)?;
                let s2 = g.add(n1, f)?;
                h = g.layer_norm(
                    s2,
                    nd(&format!("block{i}.ln2.g")),
                    nd(&format!("block{i}.ln2.b")),
                )?;
            }
            let flat = g.reshape(h, vec![batch, t * t])?;
            dense(g, flat, nd("out.w"), nd("out.b"))
        }
        ArchSpec::TbnnOurs {
            n_bins,
            patch,
            embed_filters,
            embed_dim,
            blocks,
            heads,
            embedding,
            pos_encoding,
            ..
        } => {
            let p = n_bins / patch;
            let mut e = match embedding {
                EmbeddingMethod::Linear => {
                    let flat = g.reshape(input, vec![batch * p, *patch])?;
                    dense(g, flat, nd("embed.proj.w"), nd("embed.proj.b"))?
                }
                EmbeddingMethod::Mlp => {
                    let flat = g.reshape(input, vec![batch * p, *patch])?;
                    let h1 = dense(g, flat, nd("embed.fc1.w"), nd("embed.fc1.b"))?;
                    let h1 = g.gelu(h1)?;
                    dense(g, h1, nd("embed.proj.w"), nd("embed.proj.b"))?
                }
                EmbeddingMethod::Cnn => {
                    let chans = g.reshape(input, vec![batch * p, 1, *patch])?;
                    let c = g.conv1d(chans, nd("embed.conv.k"), Padding::Same)?;
                    let c = g.add_channel_bias(c, nd("embed.conv.b"))?;
                    let c = g.relu(c)?;
                    let flat = g.reshape(c, vec![batch * p, embed_filters * patch])?;
                    dense(g, flat, nd("embed.proj.w"), nd("embed.proj.b"))?
                }
            };
            e = g.reshape(e, vec![batch, p, *embed_dim])?;
            let mut h = g.prepend_token(nd("embed.cls"), e)?;
            let pos = match pos_encoding {
                PosEncoding::Learnable => nd("embed.pos"),
                PosEncoding::Sinusoidal => g.constant(sinusoidal_encoding(p + 1, *embed_dim)?)?,
            };
            h = g.add_suffix(h, pos)?;
            for i in 1..=*blocks {
                let n1 = g.layer_norm(
                    h,
                    nd(&format!("block{i}.ln1.g")),
                    nd(&format!("block{i}.ln1.b")),
                )?;
                let w = attention_weights(params, nodes, &format!("block{i}"));
                let a = multi_head_attention(g, n1, &w, *heads, dropout)?;
                let a = g.dropout(a, dropout)?;
                h = g.add(h, a)?;
                let n2 = g.layer_norm(
                    h,
                    nd(&format!("block{i}.ln2.g")),
                    nd(&format!("block{i}.ln2.b")),
                )?;
                let mut f = dense(g, n2, nd(&format!("block{i}.ff1.w")), nd(&format!("block{i}.ff1.b")))?;
                f = g.gelu(f)?;
                f = g.dropout(f, dropout)?;
                f = dense(g, f, nd(&format!("block{i}.ff2.w")), nd(&format!("block{i}.ff2.b")))?;
                f = g.dropout(f, dropout)?;
                h = g.add(h, f)?;
            }
            let cls = g.select_token(h, 0)?;
            let hh = dense(g, cls, nd("head.fc.w"), nd("head.fc.b"))?;
            let hh = g.gelu(hh)?;
            let hh = g.dropout(hh, dropout)?;
            dense(g, hh, nd("out.w"), nd("out.b"))
        }
    }
}

#[cfg(test)]
mod tests;
