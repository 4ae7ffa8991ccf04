//! Command-line surface: experiment configs, checkpoint sidecars, and
//! the synth/search/train/finetune/trials/report/explain pipeline.
//!
//! Every artifact a stage writes embeds the experiment config hash and
//! master seed; later stages refuse inputs whose hash disagrees with
//! the config in hand.

mod report;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::explain::{background_baseline, explain_report, report_json, report_svg, ExplainConfig};
use crate::models::{build, ArchSpec, ModelBundle};
use crate::rng::substream;
use crate::spectra::io::{load_dataset, save_dataset, sidecar_path};
use crate::spectra::scenario::{build_scenario, config_hash, ScenarioConfig};
use crate::spectra::types::{DomainTag, LabeledDataset, SplitTag};
use crate::training::{
    finetune, run_paired_trials, subset, train, EpochStats, Protocol, SearchSpace, SearchTrial,
    TrainConfig, TrialPlan,
};

/// Per-protocol training defaults, overridable per command with
/// --train-config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingDefaults {
    pub pretrain: TrainConfig,
    pub target: TrainConfig,
    pub finetune: TrainConfig,
}

impl Default for TrainingDefaults {
    fn default() -> Self {
        let base = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            weight_decay: 1e-5,
            dropout: None,
            max_epochs: 60,
            patience: 10,
            freeze: Default::default(),
            seed: 0,
        };
        TrainingDefaults {
            pretrain: base.clone(),
            target: TrainConfig { max_epochs: 80, patience: 15, ..base.clone() },
            finetune: TrainConfig { learning_rate: 3e-4, ..base },
        }
    }
}

fn default_knn_k() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub architectures: Vec<ArchSpec>,
    pub protocols: Vec<Protocol>,
    /// Target subset sizes for paired trials, ascending powers of two.
    pub size_ladder: Vec<usize>,
    pub n_trials: usize,
    pub search_budget: usize,
    #[serde(default = "default_knn_k")]
    pub knn_k: usize,
    #[serde(default)]
    pub training: TrainingDefaults,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::validation(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        if self.architectures.is_empty() {
            return Err(Error::validation("config lists no architectures"));
        }
        let mut seen = Vec::new();
        for arch in &self.architectures {
            arch.validate()?;
            if arch.n_bins() != self.scenario.grid.n_bins
                || arch.n_classes() != self.scenario.isotopes.len()
            {
                return Err(Error::validation(format!(
                    "architecture {} is {}x{}, scenario needs {}x{}",
                    arch.kind_id(),
                    arch.n_bins(),
                    arch.n_classes(),
                    self.scenario.grid.n_bins,
                    self.scenario.isotopes.len()
                )));
            }
            if seen.contains(&arch.kind_id()) {
                return Err(Error::validation(format!("duplicate architecture {}", arch.kind_id())));
            }
            seen.push(arch.kind_id());
        }
        if self.protocols.is_empty() {
            return Err(Error::validation("config lists no protocols"));
        }
        if self.size_ladder.is_empty() {
            return Err(Error::validation("size ladder is empty"));
        }
        for pair in self.size_ladder.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::validation("size ladder must be strictly ascending"));
            }
        }
        for &s in &self.size_ladder {
            if !s.is_power_of_two() {
                return Err(Error::validation(format!("ladder size {s} is not a power of two")));
            }
            if s > self.scenario.sizes.train {
                return Err(Error::validation(format!(
                    "ladder size {s} exceeds the target train pool of {}",
                    self.scenario.sizes.train
                )));
            }
        }
        if self.n_trials == 0 || self.search_budget == 0 || self.knn_k == 0 {
            return Err(Error::validation("n_trials, search_budget, knn_k must be positive"));
        }
        for tc in [&self.training.pretrain, &self.training.target, &self.training.finetune] {
            tc.validate()?;
        }
        Ok(())
    }

    /// Hash over everything that defines the experiment; the output
    /// directory is plumbing and stays out.
    pub fn hash(&self) -> String {
        let essence = serde_json::to_string(&(
            &self.scenario,
            &self.architectures,
            &self.protocols,
            &self.size_ladder,
            self.n_trials,
            self.search_budget,
            self.knn_k,
            &self.training,
        ))
        .expect("config serializes");
        let mut h = Sha256::new();
        h.update(essence.as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn arch(&self, id: &str) -> Result<&ArchSpec> {
        self.architectures.iter().find(|a| a.kind_id() == id).ok_or_else(|| {
            let known: Vec<&str> = self.architectures.iter().map(|a| a.kind_id()).collect();
            Error::validation(format!("unknown architecture {id:?}; config has: {}", known.join(", ")))
        })
    }

    fn datasets_dir(&self) -> PathBuf {
        self.output_dir.join("datasets")
    }
}

/// JSON companion to an SPDW1 checkpoint; carries enough to rebuild
/// and verify the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSidecar {
    pub arch: ArchSpec,
    pub protocol: Protocol,
    pub size: Option<usize>,
    pub train_config: TrainConfig,
    pub best_val_loss: f64,
    pub config_hash: String,
    pub master_seed: u64,
}

pub fn save_checkpoint(
    path: &Path,
    model: &ModelBundle,
    sidecar: &CheckpointSidecar,
    history: &[EpochStats],
) -> Result<()> {
    model.save(path)?;
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(sidecar)?)?;
    let mut hist = std::fs::File::create(history_path(path))?;
    for stats in history {
        serde_json::to_writer(&mut hist, stats)?;
        hist.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelBundle, CheckpointSidecar)> {
    let text = std::fs::read_to_string(sidecar_path(path))?;
    let sidecar: CheckpointSidecar = serde_json::from_str(&text)
        .map_err(|e| Error::corrupt(format!("{}: {e}", sidecar_path(path).display())))?;
    let model = ModelBundle::load(&sidecar.arch, path)?;
    Ok((model, sidecar))
}

pub fn history_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".history.jsonl");
    ckpt.with_file_name(name)
}

fn parse_protocol(s: &str) -> std::result::Result<Protocol, String> {
    match s {
        "source_only" => Ok(Protocol::SourceOnly),
        "target_only" => Ok(Protocol::TargetOnly),
        "domain_adapted" => Ok(Protocol::DomainAdapted),
        other => Err(format!("unknown protocol {other:?} (source_only, target_only, domain_adapted)")),
    }
}

#[derive(Debug, Parser)]
#[command(name = "specdapt", version, about = "Surrogate gamma-spectrum domain-adaptation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Synthesize the six dataset files (two domains, three splits).
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to <output_dir>/datasets.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Random hyperparameter search for one (arch, protocol, size) cell.
    Search {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        arch: String,
        #[arg(long, value_parser = parse_protocol)]
        protocol: Protocol,
        /// Target subset size (target_only / domain_adapted).
        #[arg(long)]
        size: Option<usize>,
        /// Pretrained checkpoint, required for domain_adapted.
        #[arg(long)]
        from: Option<PathBuf>,
        /// Overrides the config's search budget.
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train from scratch under source_only or target_only.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        arch: String,
        #[arg(long, value_parser = parse_protocol)]
        protocol: Protocol,
        /// Target subset size (target_only).
        #[arg(long)]
        size: Option<usize>,
        /// JSON TrainConfig overriding the config defaults.
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune a pretrained checkpoint on a target subset.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Paired trials across the architecture and size grid.
    Trials {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to <output_dir>/trials.jsonl; records append.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summary tables, p-values, curves, and rankings from trial records.
    Report {
        #[arg(long)]
        results: PathBuf,
        /// Defaults to the results file's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Channel-group attribution artifact for one test spectrum.
    Explain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        model_b: Option<PathBuf>,
        #[arg(long)]
        spectrum_index: usize,
        /// Class to explain; defaults to the spectrum's top label.
        #[arg(long)]
        class: Option<usize>,
        #[arg(long, default_value_t = 32)]
        groups: usize,
        #[arg(long, default_value_t = 2048)]
        coalitions: usize,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Entry point for main(); parses std::env::args.
pub fn run() -> i32 {
    let cli = Cli::parse();
    init_threads();
    finish(dispatch(cli))
}

/// Same as run() but parses the given arguments; used by tests.
pub fn run_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => {
            init_threads();
            finish(dispatch(cli))
        }
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            code
        }
    }
}

fn finish(outcome: Result<()>) -> i32 {
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// SPECDAPT_THREADS caps the worker pool; unset means the rayon default.
fn init_threads() {
    if let Some(n) = std::env::var("SPECDAPT_THREADS").ok().and_then(|v| v.parse::<usize>().ok())
    {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth { config, out } => cmd_synth(&config, out),
        Cmd::Search { config, arch, protocol, size, from, budget, data, out } => {
            cmd_search(&config, &arch, protocol, size, from, budget, data, out)
        }
        Cmd::Train { config, arch, protocol, size, train_config, data, out } => {
            cmd_train(&config, &arch, protocol, size, train_config, data, out)
        }
        Cmd::Finetune { config, from, size, train_config, data, out } => {
            cmd_finetune(&config, &from, size, train_config, data, out)
        }
        Cmd::Trials { config, out } => cmd_trials(&config, out),
        Cmd::Report { results, out } => report::cmd_report(&results, out),
        Cmd::Explain {
            config,
            model,
            model_b,
            spectrum_index,
            class,
            groups,
            coalitions,
            data,
            out,
        } => cmd_explain(&config, &model, model_b, spectrum_index, class, groups, coalitions, data, out),
    }
}

const SPLIT_FILES: [(DomainTag, SplitTag); 6] = [
    (DomainTag::Source, SplitTag::Train),
    (DomainTag::Source, SplitTag::Val),
    (DomainTag::Source, SplitTag::Test),
    (DomainTag::Target, SplitTag::Train),
    (DomainTag::Target, SplitTag::Val),
    (DomainTag::Target, SplitTag::Test),
];

fn split_file(dir: &Path, domain: DomainTag, split: SplitTag) -> PathBuf {
    dir.join(format!("{domain}_{split}.spda"))
}

fn cmd_synth(config_path: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    let dir = out.unwrap_or_else(|| cfg.datasets_dir());
    std::fs::create_dir_all(&dir)?;
    let scenario = build_scenario(&cfg.scenario)?;
    let scenario_hash = config_hash(&cfg.scenario);
    for (domain, split) in SPLIT_FILES {
        let ds = scenario.domain(domain).get(split);
        let path = split_file(&dir, domain, split);
        save_dataset(ds, &path, cfg.scenario.master_seed, &scenario_hash)?;
        println!("wrote {} ({} spectra)", path.display(), ds.n());
    }
    Ok(())
}

/// Loads one split and checks it against the config's scenario hash.
fn load_split(
    cfg: &ExperimentConfig,
    dir: &Path,
    domain: DomainTag,
    split: SplitTag,
) -> Result<LabeledDataset> {
    let path = split_file(dir, domain, split);
    let (ds, sidecar) = load_dataset(&path)?;
    let expected = config_hash(&cfg.scenario);
    if sidecar.scenario_hash != expected {
        return Err(Error::validation(format!(
            "{} was synthesized under scenario hash {}, config hash is {expected}",
            path.display(),
            sidecar.scenario_hash
        )));
    }
    Ok(ds)
}

/// Deterministic target-train subset for a requested size, matching
/// the draw the paired-trials runner uses for trial 0.
fn sized_subset(cfg: &ExperimentConfig, ds: &LabeledDataset, size: usize) -> Result<LabeledDataset> {
    if size == 0 || size > ds.n() {
        return Err(Error::validation(format!(
            "subset size {size} outside the target train split of {}",
            ds.n()
        )));
    }
    let mut rng = substream(cfg.scenario.master_seed, &format!("trial-subset/{size}"), 0);
    let mut indices = rand::seq::index::sample(&mut rng, ds.n(), size).into_vec();
    indices.sort_unstable();
    subset(ds, &indices)
}

fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)?;
    let tc: TrainConfig = serde_json::from_str(&text)
        .map_err(|e| Error::validation(format!("train config {}: {e}", path.display())))?;
    tc.validate()?;
    Ok(tc)
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config_path: &Path,
    arch_id: &str,
    protocol: Protocol,
    size: Option<usize>,
    train_config: Option<PathBuf>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    let arch = cfg.arch(arch_id)?.clone();
    let data_dir = data.unwrap_or_else(|| cfg.datasets_dir());
    let (train_set, val_set, base_tc) = match protocol {
        Protocol::SourceOnly => (
            load_split(&cfg, &data_dir, DomainTag::Source, SplitTag::Train)?,
            load_split(&cfg, &data_dir, DomainTag::Source, SplitTag::Val)?,
            cfg.training.pretrain.clone(),
        ),
        Protocol::TargetOnly => {
            let full = load_split(&cfg, &data_dir, DomainTag::Target, SplitTag::Train)?;
            let train_set = match size {
                Some(s) => sized_subset(&cfg, &full, s)?,
                None => full,
            };
            (
                train_set,
                load_split(&cfg, &data_dir, DomainTag::Target, SplitTag::Val)?,
                cfg.training.target.clone(),
            )
        }
        Protocol::DomainAdapted => {
            return Err(Error::validation("use the finetune command for domain_adapted models"))
        }
    };
    let mut tc = match train_config {
        Some(p) => load_train_config(&p)?,
        None => base_tc,
    };
    tc.seed = substream(cfg.scenario.master_seed, "trial-seed", 0).random();

    let mut init_rng = substream(tc.seed, "init/source", 0);
    let init = build(&arch, &mut init_rng)?;
    let (model, history) = train(&init, &train_set, &val_set, &tc)?;
    let best_val_loss =
        history.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);

    let dir = out.unwrap_or_else(|| cfg.output_dir.join("models"));
    std::fs::create_dir_all(&dir)?;
    let stem = match size {
        Some(s) => format!("{arch_id}_{protocol}_n{s}"),
        None => format!("{arch_id}_{protocol}"),
    };
    let path = dir.join(format!("{stem}.spdw"));
    let sidecar = CheckpointSidecar {
        arch,
        protocol,
        size,
        train_config: tc,
        best_val_loss,
        config_hash: cfg.hash(),
        master_seed: cfg.scenario.master_seed,
    };
    save_checkpoint(&path, &model, &sidecar, &history)?;
    println!("wrote {} (val loss {best_val_loss:.4}, {} epochs)", path.display(), history.len());
    Ok(())
}

fn cmd_finetune(
    config_path: &Path,
    from: &Path,
    size: Option<usize>,
    train_config: Option<PathBuf>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    let (pretrained, from_sidecar) = load_checkpoint(from)?;
    if from_sidecar.config_hash != cfg.hash() {
        return Err(Error::validation(format!(
            "{} carries config hash {}, this config is {}",
            from.display(),
            from_sidecar.config_hash,
            cfg.hash()
        )));
    }
    let data_dir = data.unwrap_or_else(|| cfg.datasets_dir());
    let full = load_split(&cfg, &data_dir, DomainTag::Target, SplitTag::Train)?;
    let train_set = match size {
        Some(s) => sized_subset(&cfg, &full, s)?,
        None => full,
    };
    let val_set = load_split(&cfg, &data_dir, DomainTag::Target, SplitTag::Val)?;
    let mut tc = match train_config {
        Some(p) => load_train_config(&p)?,
        None => cfg.training.finetune.clone(),
    };
    tc.seed = substream(cfg.scenario.master_seed, "trial-seed", 0).random();

    let (model, history) = finetune(&pretrained, &train_set, &val_set, &tc)?;
    let best_val_loss =
        history.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);

    let dir = out.unwrap_or_else(|| cfg.output_dir.join("models"));
    std::fs::create_dir_all(&dir)?;
    let arch_id = from_sidecar.arch.kind_id();
    let stem = match size {
        Some(s) => format!("{arch_id}_domain_adapted_n{s}"),
        None => format!("{arch_id}_domain_adapted"),
    };
    let path = dir.join(format!("{stem}.spdw"));
    let sidecar = CheckpointSidecar {
        arch: from_sidecar.arch,
        protocol: Protocol::DomainAdapted,
        size,
        train_config: tc,
        best_val_loss,
        config_hash: cfg.hash(),
        master_seed: cfg.scenario.master_seed,
    };
    save_checkpoint(&path, &model, &sidecar, &history)?;
    println!("wrote {} (val loss {best_val_loss:.4}, {} epochs)", path.display(), history.len());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchArtifact {
    pub arch: String,
    pub protocol: Protocol,
    pub size: Option<usize>,
    pub budget: usize,
    pub best: TrainConfig,
    pub best_val_loss: f64,
    pub trials: Vec<SearchTrial>,
    pub config_hash: String,
    pub master_seed: u64,
}

#[allow(clippy::too_many_arguments)]
fn cmd_search(
    config_path: &Path,
    arch_id: &str,
    protocol: Protocol,
    size: Option<usize>,
    from: Option<PathBuf>,
    budget: Option<usize>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    let arch = cfg.arch(arch_id)?.clone();
    let data_dir = data.unwrap_or_else(|| cfg.datasets_dir());
    let budget = budget.unwrap_or(cfg.search_budget);
    let seed = cfg.scenario.master_seed;

    let (train_set, val_set, base_tc) = match protocol {
        Protocol::SourceOnly => (
            load_split(&cfg, &data_dir, DomainTag::Source, SplitTag::Train)?,
            load_split(&cfg, &data_dir, DomainTag::Source, SplitTag::Val)?,
            cfg.training.pretrain.clone(),
        ),
        Protocol::TargetOnly | Protocol::DomainAdapted => {
            let full = load_split(&cfg, &data_dir, DomainTag::Target, SplitTag::Train)?;
            let train_set = match size {
                Some(s) => sized_subset(&cfg, &full, s)?,
                None => full,
            };
            let base = if protocol == Protocol::TargetOnly {
                cfg.training.target.clone()
            } else {
                cfg.training.finetune.clone()
            };
            (train_set, load_split(&cfg, &data_dir, DomainTag::Target, SplitTag::Val)?, base)
        }
    };

    let pretrained = match (protocol, from) {
        (Protocol::DomainAdapted, Some(path)) => {
            let (model, sidecar) = load_checkpoint(&path)?;
            if sidecar.config_hash != cfg.hash() {
                return Err(Error::validation(format!(
                    "{} carries config hash {}, this config is {}",
                    path.display(),
                    sidecar.config_hash,
                    cfg.hash()
                )));
            }
            Some(model)
        }
        (Protocol::DomainAdapted, None) => {
            return Err(Error::validation("domain_adapted search needs --from <pretrained checkpoint>"))
        }
        (_, _) => None,
    };
    let space = match protocol {
        Protocol::DomainAdapted => {
            SearchSpace::finetuning(pretrained.as_ref().expect("checked above").layer_names().len())
        }
        _ => SearchSpace::pretraining(),
    };

    // one shared init, so trials differ only in hyperparameters
    let mut init_rng = substream(seed, "search/init", 0);
    let init = build(&arch, &mut init_rng)?;
    let eval = |tc: &TrainConfig| -> Result<f64> {
        let (_, history) = match &pretrained {
            Some(model) => finetune(model, &train_set, &val_set, tc)?,
            None => train(&init, &train_set, &val_set, tc)?,
        };
        Ok(history.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min))
    };
    let base = TrainConfig { seed: substream(seed, "search/seed", 0).random(), ..base_tc };
    let (best, best_val_loss, trials) = crate::training::random_search(&space, &base, budget, seed, eval)?;

    let artifact = SearchArtifact {
        arch: arch_id.to_string(),
        protocol,
        size,
        budget,
        best,
        best_val_loss,
        trials,
        config_hash: cfg.hash(),
        master_seed: seed,
    };
    let path = out.unwrap_or_else(|| {
        let stem = match size {
            Some(s) => format!("{arch_id}_{protocol}_n{s}.json"),
            None => format!("{arch_id}_{protocol}.json"),
        };
        cfg.output_dir.join("search").join(stem)
    });
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&path, serde_json::to_string_pretty(&artifact)?)?;
    println!("wrote {} (best val loss {best_val_loss:.4})", path.display());
    Ok(())
}

fn cmd_trials(config_path: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    let scenario = build_scenario(&cfg.scenario)?;
    let hash = cfg.hash();
    let path = out.unwrap_or_else(|| cfg.output_dir.join("trials.jsonl"));
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    for arch in &cfg.architectures {
        let plan = TrialPlan {
            arch: arch.clone(),
            sizes: cfg.size_ladder.clone(),
            n_trials: cfg.n_trials,
            pretrain: cfg.training.pretrain.clone(),
            target: cfg.training.target.clone(),
            finetune: cfg.training.finetune.clone(),
            knn_k: cfg.knn_k,
        };
        let mut records = run_paired_trials(&scenario, &plan, cfg.scenario.master_seed, &hash)?;
        records.retain(|r| cfg.protocols.contains(&r.protocol));
        crate::training::append_records(&path, &records)?;
        println!("{}: appended {} records to {}", arch.kind_id(), records.len(), path.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_explain(
    config_path: &Path,
    model_path: &Path,
    model_b_path: Option<PathBuf>,
    spectrum_index: usize,
    class: Option<usize>,
    groups: usize,
    coalitions: usize,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    let hash = cfg.hash();
    let data_dir = data.unwrap_or_else(|| cfg.datasets_dir());
    let test = load_split(&cfg, &data_dir, DomainTag::Target, SplitTag::Test)?;
    if spectrum_index >= test.n() {
        return Err(Error::validation(format!(
            "spectrum index {spectrum_index} outside the {}-spectrum test split",
            test.n()
        )));
    }

    let check = |path: &Path, sidecar: &CheckpointSidecar| -> Result<()> {
        if sidecar.config_hash != hash {
            return Err(Error::validation(format!(
                "{} carries config hash {}, this config is {hash}",
                path.display(),
                sidecar.config_hash
            )));
        }
        Ok(())
    };
    let (model_a, sidecar_a) = load_checkpoint(model_path)?;
    check(model_path, &sidecar_a)?;
    let label_a = format!("{} {}", sidecar_a.arch.kind_id(), sidecar_a.protocol);
    let model_b = match &model_b_path {
        Some(p) => {
            let (m, s) = load_checkpoint(p)?;
            check(p, &s)?;
            Some((m, format!("{} {}", s.arch.kind_id(), s.protocol)))
        }
        None => None,
    };

    let spectrum = &test.spectra[spectrum_index];
    let labels = test.label_row(spectrum_index);
    let class_index = class.unwrap_or_else(|| {
        labels
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite label").then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap_or(0)
    });
    let baseline = background_baseline(&cfg.scenario, 64)?;
    let ecfg = ExplainConfig {
        n_groups: groups,
        n_coalitions: coalitions,
        class_index,
        seed: cfg.scenario.master_seed,
        top_k: 5,
        config_hash: hash,
        master_seed: cfg.scenario.master_seed,
    };
    let report = explain_report(
        &model_a,
        &label_a,
        model_b.as_ref().map(|(m, l)| (m, l.as_str())),
        spectrum,
        &baseline,
        &test.classes,
        &ecfg,
    )?;

    let dir = out.unwrap_or_else(|| cfg.output_dir.join("explain"));
    std::fs::create_dir_all(&dir)?;
    let stem = format!("explain_i{spectrum_index}_c{class_index}");
    let json_path = dir.join(format!("{stem}.json"));
    let svg_path = dir.join(format!("{stem}.svg"));
    std::fs::write(&json_path, report_json(&report)?)?;
    std::fs::write(&svg_path, report_svg(&report))?;
    println!("wrote {}", json_path.display());
    println!("wrote {}", svg_path.display());
    for r in &report.a.top_ranges {
        println!(
            "{}: group {} [{:.0}, {:.0}) keV phi {:+.4}",
            report.a.label, r.group, r.lo_kev, r.hi_kev, r.phi
        );
    }
    Ok(())
}
