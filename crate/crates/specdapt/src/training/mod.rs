//! Training protocols: from-scratch runs, fine-tuning with layer
//! freezing, the paired-trial scheme, and random hyperparameter search.
//!
//! One training run minimizes soft-label cross entropy with decoupled
//! weight decay, shuffles per epoch from its seed, and returns the
//! best-validation checkpoint rather than the last epoch.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::graph::Gradients;
use crate::autodiff::params::ParamStore;
use crate::autodiff::tensor::TensorF;
use crate::error::{Error, Result};
use crate::metrics::{diagnostics, DiagnosticsReport};
use crate::models::{build, labels_tensor, zscored_inputs, ArchSpec, GraphOpts, ModelBundle};
use crate::rng::{fingerprint_indices, substream};
use crate::spectra::scenario::Scenario;
use crate::spectra::types::LabeledDataset;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Which layers stay fixed during fine-tuning. Counts refer to the
/// model's ordered layer list, not to composite blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Freeze {
    #[default]
    None,
    First {
        k: usize,
    },
    Last {
        k: usize,
    },
}

impl std::fmt::Display for Freeze {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Freeze::None => write!(f, "none"),
            Freeze::First { k } => write!(f, "first {k}"),
            Freeze::Last { k } => write!(f, "last {k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Overrides the architecture's dropout rate when set.
    pub dropout: Option<f64>,
    pub max_epochs: usize,
    pub patience: usize,
    #[serde(default)]
    pub freeze: Freeze,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::validation(format!("learning rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::validation("batch size and max epochs must be positive"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::validation(format!("weight decay {}", self.weight_decay)));
        }
        if let Some(d) = self.dropout {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::validation(format!("dropout override {d} outside [0,1)")));
            }
        }
        Ok(())
    }
}

/// Adaptive moments with decoupled weight decay. Moments are kept per
/// parameter tensor; frozen tensors are skipped entirely.
pub struct AdamW {
    lr: f64,
    weight_decay: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, params: &ParamStore) -> Self {
        let m = (0..params.len()).map(|i| vec![0.0; params.at(i).1.len()]).collect();
        let v = (0..params.len()).map(|i| vec![0.0; params.at(i).1.len()]).collect();
        AdamW { lr, weight_decay, t: 0, m, v }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, nodes: &[usize]) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t);
        for i in 0..params.len() {
            if !params.is_trainable(i) {
                continue;
            }
            let Some(g) = grads.wrt(nodes[i]) else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let theta = params.at_mut(i).1.values_mut();
            for j in 0..theta.len() {
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                theta[j] -= self.lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + self.weight_decay * theta[j]);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Mean cross-entropy of a model over a dataset, in eval mode.
pub fn dataset_loss(model: &ModelBundle, ds: &LabeledDataset) -> Result<f64> {
    if ds.n() == 0 {
        return Err(Error::validation("empty dataset"));
    }
    let x = zscored_inputs(ds);
    let y = labels_tensor(ds);
    let bins = x.shape()[1];
    let m = y.shape()[1];
    let mut total = 0.0;
    let mut row = 0;
    while row < ds.n() {
        let take = (ds.n() - row).min(256);
        let xc = TensorF::new(vec![take, bins], x.values()[row * bins..(row + take) * bins].to_vec())?;
        let yc = TensorF::new(vec![take, m], y.values()[row * m..(row + take) * m].to_vec())?;
        let mut fwd = model.build_graph(&xc, GraphOpts::default())?;
        let loss = fwd.graph.cross_entropy_mean(fwd.logits, &yc)?;
        total += fwd.graph.value(loss).item() * take as f64;
        row += take;
    }
    Ok(total / ds.n() as f64)
}

fn gather_rows(t: &TensorF, rows: &[usize], width: usize) -> TensorF {
    let mut out = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        out.extend_from_slice(&t.values()[r * width..(r + 1) * width]);
    }
    TensorF::new(vec![rows.len(), width], out).expect("consistent rows")
}

/// Copies the selected rows of a dataset, preserving order of `indices`.
pub fn subset(ds: &LabeledDataset, indices: &[usize]) -> Result<LabeledDataset> {
    let m = ds.n_classes();
    let mut spectra = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len() * m);
    for &i in indices {
        if i >= ds.n() {
            return Err(Error::validation(format!("subset index {i} out of range {}", ds.n())));
        }
        spectra.push(ds.spectra[i].clone());
        labels.extend_from_slice(ds.label_row(i));
    }
    Ok(LabeledDataset {
        spectra,
        labels,
        classes: ds.classes.clone(),
        domain_tag: ds.domain_tag,
        split_tag: ds.split_tag,
    })
}

/// Marks layers untrainable according to the directive. All other
/// layers are reset to trainable.
pub fn apply_freeze(bundle: &mut ModelBundle, freeze: Freeze) -> Result<()> {
    bundle.params.set_all_trainable(true);
    let n = bundle.layers.len();
    let range = match freeze {
        Freeze::None => return Ok(()),
        Freeze::First { k } if k <= n => 0..k,
        Freeze::Last { k } if k <= n => n - k..n,
        Freeze::First { k } | Freeze::Last { k } => {
            return Err(Error::validation(format!(
                "cannot freeze {k} layers, model has only {n}"
            )));
        }
    };
    for layer in &bundle.layers[range] {
        for tensor in &layer.tensors {
            let i = bundle
                .params
                .position(tensor)
                .ok_or_else(|| Error::validation(format!("unknown tensor {tensor}")))?;
            bundle.params.set_trainable(i, false);
        }
    }
    Ok(())
}

fn check_inputs(model: &ModelBundle, train_set: &LabeledDataset, val_set: &LabeledDataset) -> Result<()> {
    if train_set.n() == 0 {
        return Err(Error::validation("empty training set"));
    }
    if val_set.n() == 0 {
        return Err(Error::validation("empty validation set"));
    }
    train_set.validate()?;
    val_set.validate()?;
    if train_set.classes != val_set.classes {
        return Err(Error::validation("train and validation class lists differ"));
    }
    let bins = train_set.spectra[0].counts.len();
    if bins != model.spec.n_bins() || train_set.n_classes() != model.spec.n_classes() {
        return Err(Error::validation(format!(
            "model expects {} bins x {} classes, dataset has {} x {}",
            model.spec.n_bins(),
            model.spec.n_classes(),
            bins,
            train_set.n_classes()
        )));
    }
    Ok(())
}

fn at_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite(msg) => Error::non_finite(format!("epoch {epoch}: {msg}")),
        other => other,
    }
}

fn train_inner(
    model: &ModelBundle,
    train_set: &LabeledDataset,
    val_set: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<(ModelBundle, Vec<EpochStats>)> {
    check_inputs(model, train_set, val_set)?;
    let x = zscored_inputs(train_set);
    let y = labels_tensor(train_set);
    let n = train_set.n();
    let bins = x.shape()[1];
    let m = y.shape()[1];

    let mut work = model.clone();
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay, &work.params);
    let mut best = work.params.snapshot_values();
    let mut best_val = f64::INFINITY;
    let mut stale = 0usize;
    let mut history = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut substream(cfg.seed, "train/shuffle", epoch as u64));
        let mut dropout_rng = substream(cfg.seed, "train/dropout", epoch as u64);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let xb = gather_rows(&x, batch, bins);
            let yb = gather_rows(&y, batch, m);
            let mut step = || -> Result<()> {
                let mut fwd = work.build_graph(
                    &xb,
                    GraphOpts {
                        train: true,
                        rng: Some(ChaCha12Rng::from_rng(&mut dropout_rng)),
                        dropout_override: cfg.dropout,
                        param_grads: true,
                        input_grad: false,
                    },
                )?;
                let loss = fwd.graph.cross_entropy_mean(fwd.logits, &yb)?;
                epoch_loss += fwd.graph.value(loss).item() * batch.len() as f64;
                let grads = fwd.graph.backward(loss)?;
                opt.step(&mut work.params, &grads, &fwd.param_nodes);
                Ok(())
            };
            step().map_err(|e| at_epoch(e, epoch))?;
        }
        let val_loss = dataset_loss(&work, val_set).map_err(|e| at_epoch(e, epoch))?;
        history.push(EpochStats { epoch, train_loss: epoch_loss / n as f64, val_loss });
        if val_loss < best_val {
            best_val = val_loss;
            best = work.params.snapshot_values();
            stale = 0;
        } else {
            stale += 1;
        }
        if stale >= cfg.patience {
            break;
        }
    }
    work.params.restore_values(&best)?;
    Ok((work, history))
}

/// Trains from the given initialization. The freeze directive is only
/// meaningful when fine-tuning, so it is rejected here.
pub fn train(
    model: &ModelBundle,
    train_set: &LabeledDataset,
    val_set: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<(ModelBundle, Vec<EpochStats>)> {
    cfg.validate()?;
    if cfg.freeze != Freeze::None {
        return Err(Error::validation("freeze directive is only valid for fine-tuning runs"));
    }
    train_inner(model, train_set, val_set, cfg)
}

/// Continues training from a pretrained checkpoint with the configured
/// layers frozen.
pub fn finetune(
    pretrained: &ModelBundle,
    target_subset: &LabeledDataset,
    val_set: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<(ModelBundle, Vec<EpochStats>)> {
    cfg.validate()?;
    let mut start = pretrained.clone();
    apply_freeze(&mut start, cfg.freeze)?;
    let (mut tuned, history) = train_inner(&start, target_subset, val_set, cfg)?;
    tuned.params.set_all_trainable(true);
    Ok((tuned, history))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    SourceOnly,
    TargetOnly,
    DomainAdapted,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Protocol::SourceOnly => "source_only",
            Protocol::TargetOnly => "target_only",
            Protocol::DomainAdapted => "domain_adapted",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub protocol: Protocol,
    pub arch: String,
    pub size: usize,
    pub trial: usize,
    pub seed: u64,
    pub subset_fingerprint: String,
    /// Target test split size, for finite-test-set variance terms.
    pub n_test: usize,
    pub config_hash: String,
    pub master_seed: u64,
    pub metrics: DiagnosticsReport,
}

/// Everything needed to reproduce one paired-trial sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialPlan {
    pub arch: ArchSpec,
    pub sizes: Vec<usize>,
    pub n_trials: usize,
    pub pretrain: TrainConfig,
    pub target: TrainConfig,
    pub finetune: TrainConfig,
    pub knn_k: usize,
}

/// For each (size, trial): one shared target subset, a target-only
/// model trained on it, the trial's pretrained source model fine-tuned
/// on the same subset, and all three protocols evaluated on the target
/// test split.
pub fn run_paired_trials(
    scenario: &Scenario,
    plan: &TrialPlan,
    master_seed: u64,
    config_hash: &str,
) -> Result<Vec<TrialRecord>> {
    if plan.n_trials == 0 {
        return Err(Error::validation("need at least one trial"));
    }
    let tgt_train_n = scenario.target.train.n();
    for &size in &plan.sizes {
        if size == 0 || size > tgt_train_n {
            return Err(Error::validation(format!(
                "subset size {size} outside the target train split of {tgt_train_n}"
            )));
        }
    }
    let arch_id = plan.arch.kind_id().to_string();
    let mut records = Vec::new();
    for trial in 0..plan.n_trials {
        let seed = substream(master_seed, "trial-seed", trial as u64).random::<u64>();
        let mut init_rng = substream(seed, "init/source", 0);
        let init = build(&plan.arch, &mut init_rng)?;
        let pre_cfg = TrainConfig { seed, ..plan.pretrain.clone() };
        let (pretrained, _) = train(&init, &scenario.source.train, &scenario.source.val, &pre_cfg)?;
        let source_metrics = diagnostics(&pretrained, &scenario.target.test, plan.knn_k)?;

        for &size in &plan.sizes {
            let mut subset_rng = substream(master_seed, &format!("trial-subset/{size}"), trial as u64);
            let mut indices =
                rand::seq::index::sample(&mut subset_rng, tgt_train_n, size).into_vec();
            indices.sort_unstable();
            let fingerprint = format!("{:016x}", fingerprint_indices(&indices));
            let shared = subset(&scenario.target.train, &indices)?;

            let mut target_rng = substream(seed, "init/target", size as u64);
            let target_init = build(&plan.arch, &mut target_rng)?;
            let tgt_cfg = TrainConfig { seed, ..plan.target.clone() };
            let (target_model, _) = train(&target_init, &shared, &scenario.target.val, &tgt_cfg)?;

            let ft_cfg = TrainConfig { seed, ..plan.finetune.clone() };
            let (adapted, _) = finetune(&pretrained, &shared, &scenario.target.val, &ft_cfg)?;

            let mut push = |protocol: Protocol, metrics: DiagnosticsReport| {
                records.push(TrialRecord {
                    protocol,
                    arch: arch_id.clone(),
                    size,
                    trial,
                    seed,
                    subset_fingerprint: fingerprint.clone(),
                    n_test: scenario.target.test.n(),
                    config_hash: config_hash.to_string(),
                    master_seed,
                    metrics,
                });
            };
            push(Protocol::SourceOnly, source_metrics);
            push(Protocol::TargetOnly, diagnostics(&target_model, &scenario.target.test, plan.knn_k)?);
            push(Protocol::DomainAdapted, diagnostics(&adapted, &scenario.target.test, plan.knn_k)?);
        }
    }
    Ok(records)
}

pub fn append_records(path: &Path, records: &[TrialRecord]) -> Result<()> {
    let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    for r in records {
        serde_json::to_writer(&mut file, r)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<TrialRecord>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TrialRecord = serde_json::from_str(&line).map_err(|e| {
            Error::corrupt(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Sampling ranges for the random hyperparameter search. Learning rate
/// and weight decay are drawn log-uniformly, dropout uniformly, batch
/// size and freeze directive from their categorical sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub learning_rate: (f64, f64),
    pub weight_decay: (f64, f64),
    pub dropout: (f64, f64),
    pub batch_sizes: Vec<usize>,
    pub freeze_options: Vec<Freeze>,
}

impl SearchSpace {
    /// Ranges used for from-scratch runs.
    pub fn pretraining() -> Self {
        SearchSpace {
            learning_rate: (1e-6, 1e-3),
            weight_decay: (1e-7, 1e-1),
            dropout: (0.0, 0.4),
            batch_sizes: vec![32, 64, 128, 256, 512],
            freeze_options: vec![Freeze::None],
        }
    }

    /// Fine-tuning adds the freeze directive, spanning none to all of
    /// the model's individual layers.
    pub fn finetuning(n_layers: usize) -> Self {
        let mut freeze_options = vec![Freeze::None];
        freeze_options.extend((1..=n_layers).map(|k| Freeze::Last { k }));
        freeze_options.extend((1..n_layers).map(|k| Freeze::First { k }));
        SearchSpace { freeze_options, ..SearchSpace::pretraining() }
    }

    pub fn validate(&self) -> Result<()> {
        for (lo, hi) in [self.learning_rate, self.weight_decay] {
            if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                return Err(Error::validation(format!("bad log-uniform range ({lo}, {hi})")));
            }
        }
        let (lo, hi) = self.dropout;
        if !(lo >= 0.0 && hi >= lo && hi < 1.0) {
            return Err(Error::validation(format!("bad dropout range ({lo}, {hi})")));
        }
        if self.batch_sizes.is_empty() || self.freeze_options.is_empty() {
            return Err(Error::validation("empty categorical set in search space"));
        }
        Ok(())
    }

    pub fn sample(&self, base: &TrainConfig, rng: &mut ChaCha12Rng) -> TrainConfig {
        let log_uniform = |(lo, hi): (f64, f64), rng: &mut ChaCha12Rng| {
            (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
        };
        TrainConfig {
            learning_rate: log_uniform(self.learning_rate, rng),
            weight_decay: log_uniform(self.weight_decay, rng),
            dropout: Some(self.dropout.0 + rng.random::<f64>() * (self.dropout.1 - self.dropout.0)),
            batch_size: self.batch_sizes[rng.random_range(0..self.batch_sizes.len())],
            freeze: self.freeze_options[rng.random_range(0..self.freeze_options.len())],
            ..base.clone()
        }
    }
}

/// Outcome of one search trial, kept for reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrial {
    pub index: usize,
    pub config: TrainConfig,
    pub val_loss: Option<f64>,
}

/// Draws `budget` configurations and returns the one with the lowest
/// finite validation loss (ties keep the earliest trial). Divergent
/// trials are recorded and skipped.
pub fn random_search(
    space: &SearchSpace,
    base: &TrainConfig,
    budget: usize,
    seed: u64,
    mut eval: impl FnMut(&TrainConfig) -> Result<f64>,
) -> Result<(TrainConfig, f64, Vec<SearchTrial>)> {
    if budget == 0 {
        return Err(Error::validation("search budget must be at least 1"));
    }
    space.validate()?;
    let mut trials = Vec::with_capacity(budget);
    let mut best: Option<(f64, TrainConfig)> = None;
    for index in 0..budget {
        let mut rng = substream(seed, "search", index as u64);
        let cfg = space.sample(base, &mut rng);
        let loss = match eval(&cfg) {
            Ok(l) if l.is_finite() => Some(l),
            Ok(_) | Err(Error::NonFinite(_)) => None,
            Err(e) => return Err(e),
        };
        trials.push(SearchTrial { index, config: cfg.clone(), val_loss: loss });
        if let Some(l) = loss {
            if best.as_ref().is_none_or(|(b, _)| l < *b) {
                best = Some((l, cfg));
            }
        }
    }
    let (loss, config) = best.ok_or_else(|| Error::degenerate("no finite trial"))?;
    Ok((config, loss, trials))
}

#[cfg(test)]
mod tests;
