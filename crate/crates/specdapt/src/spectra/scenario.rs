//! Scenario assembly: a built-in line library, source/target detector
//! models, and deterministic six-way dataset synthesis.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::spectra::response::render_template;
use crate::spectra::synth::{mix_seeds, synthesize};
use crate::spectra::types::{
    DetectorModel, DomainTag, EnergyGrid, LabeledDataset, Line, LineList, SeedTemplate, SplitTag,
};

/// Emission lines (keV, branching weight) for the isotopes the scenarios
/// can name. Mo-99 is modeled in transient equilibrium with its Tc-99m
/// daughter, so its 140.5 keV line is strong alongside 739.5 keV.
pub fn line_library() -> Vec<LineList> {
    let mk = |isotope: &str, lines: &[(f64, f64)]| LineList {
        isotope: isotope.to_string(),
        lines: lines.iter().map(|&(energy, intensity)| Line { energy, intensity }).collect(),
    };
    vec![
        mk("Am-241", &[(59.5, 0.359)]),
        mk("Ba-133", &[
            (81.0, 0.329),
            (276.4, 0.0716),
            (302.9, 0.1834),
            (356.0, 0.6205),
            (383.8, 0.0894),
        ]),
        mk("Co-60", &[(1173.2, 0.9985), (1332.5, 0.9998)]),
        mk("Cs-137", &[(661.7, 0.851)]),
        mk("Eu-152", &[
            (121.8, 0.2853),
            (244.7, 0.0755),
            (344.3, 0.2659),
            (778.9, 0.1293),
            (964.1, 0.1451),
            (1112.1, 0.1367),
            (1408.0, 0.2087),
        ]),
        mk("I-131", &[(284.3, 0.0614), (364.5, 0.817), (637.0, 0.0717)]),
        mk("Ir-192", &[
            (295.9, 0.287),
            (308.5, 0.297),
            (316.5, 0.828),
            (468.1, 0.478),
            (604.4, 0.082),
        ]),
        mk("K-40", &[(1460.8, 0.1066)]),
        mk("Mo-99", &[(140.5, 0.89), (181.1, 0.0599), (739.5, 0.1212), (777.9, 0.0428)]),
        mk("Na-22", &[(511.0, 1.798), (1274.5, 0.9994)]),
        mk("Ra-226", &[(186.2, 0.0359), (609.3, 0.446), (1120.3, 0.147), (1764.5, 0.152)]),
        mk("Tc-99m", &[(140.5, 0.885)]),
        mk("Th-232", &[
            (238.6, 0.436),
            (583.2, 0.304),
            (911.2, 0.258),
            (968.9, 0.158),
            (2614.5, 0.358),
        ]),
        mk("U-235", &[(143.8, 0.1096), (185.7, 0.572)]),
    ]
}

/// Aggregate natural-background lines (K-40 plus U/Th chain daughters).
pub fn background_lines() -> LineList {
    LineList {
        isotope: "background".to_string(),
        lines: vec![
            Line { energy: 238.6, intensity: 0.15 },
            Line { energy: 351.9, intensity: 0.12 },
            Line { energy: 583.2, intensity: 0.10 },
            Line { energy: 609.3, intensity: 0.15 },
            Line { energy: 911.2, intensity: 0.08 },
            Line { energy: 1460.8, intensity: 0.35 },
            Line { energy: 1764.5, intensity: 0.06 },
            Line { energy: 2614.5, intensity: 0.12 },
        ],
    }
}

impl DetectorModel {
    /// NaI(Tl)-like reference response (~6.6% FWHM at 662 keV).
    pub fn reference() -> Self {
        DetectorModel {
            fwhm_a: 2.0,
            fwhm_b: 1.6,
            fwhm_c: 0.001,
            gain: 1.0,
            offset: 0.0,
            compton_fraction: 0.35,
            low_energy_cutoff: 20.0,
        }
    }

    /// The default cross-domain shift: 1% gain error, +5 keV offset, and
    /// 30% worse sqrt-term resolution. Degrades source-trained accuracy
    /// noticeably without destroying it.
    pub fn shifted_from(source: &DetectorModel) -> Self {
        DetectorModel {
            gain: source.gain * 1.01,
            offset: source.offset + 5.0,
            fwhm_b: source.fwhm_b * 1.3,
            ..*source
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum MixingMode {
    /// One isotope per spectrum, one-hot labels (classes cycle so every
    /// split covers all of them).
    SingleLabel,
    /// Dirichlet mixtures of up to `max_components` isotopes, proportion
    /// labels.
    Mixed { max_components: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub isotopes: Vec<String>,
    pub grid: EnergyGrid,
    pub source_detector: DetectorModel,
    pub target_detector: DetectorModel,
    pub mixing: MixingMode,
    pub dirichlet_alpha: f64,
    pub sizes: SplitSizes,
    pub snr_min: f64,
    pub snr_max: f64,
    pub bg_cps: f64,
    pub live_time: f64,
    pub master_seed: u64,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.source_detector.validate(&self.grid)?;
        self.target_detector.validate(&self.grid)?;
        if self.isotopes.is_empty() {
            return Err(Error::validation("scenario needs at least one isotope"));
        }
        let library: Vec<String> = line_library().into_iter().map(|l| l.isotope).collect();
        for iso in &self.isotopes {
            if !library.contains(iso) {
                return Err(Error::validation(format!(
                    "unknown isotope {iso:?}; known: {}",
                    library.join(", ")
                )));
            }
        }
        if let MixingMode::Mixed { max_components } = self.mixing {
            if max_components == 0 || max_components > self.isotopes.len() {
                return Err(Error::validation(format!(
                    "max_components {max_components} exceeds the {} isotopes",
                    self.isotopes.len()
                )));
            }
        }
        if !(self.dirichlet_alpha > 0.0) {
            return Err(Error::validation("dirichlet_alpha must be > 0"));
        }
        if self.sizes.train == 0 || self.sizes.val == 0 || self.sizes.test == 0 {
            return Err(Error::validation("all split sizes must be nonzero"));
        }
        if !(self.snr_min > 0.0) || self.snr_max < self.snr_min {
            return Err(Error::validation(format!(
                "snr range [{}, {}] invalid",
                self.snr_min, self.snr_max
            )));
        }
        if !(self.bg_cps > 0.0) || !(self.live_time > 0.0) {
            return Err(Error::validation("bg_cps and live_time must be > 0"));
        }
        Ok(())
    }
}

/// Hex SHA-256 of the scenario's canonical JSON, embedded in every output
/// so downstream stages can refuse mixed-provenance inputs.
pub fn config_hash(cfg: &ScenarioConfig) -> String {
    let json = serde_json::to_string(cfg).expect("scenario serializes");
    let mut h = Sha256::new();
    h.update(json.as_bytes());
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone)]
pub struct DatasetTriple {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

impl DatasetTriple {
    pub fn get(&self, split: SplitTag) -> &LabeledDataset {
        match split {
            SplitTag::Train => &self.train,
            SplitTag::Val => &self.val,
            SplitTag::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub source: DatasetTriple,
    pub target: DatasetTriple,
}

impl Scenario {
    pub fn domain(&self, tag: DomainTag) -> &DatasetTriple {
        match tag {
            DomainTag::Source => &self.source,
            DomainTag::Target => &self.target,
        }
    }
}

/// Renders the per-class seed templates for one domain's detector.
pub fn class_templates(cfg: &ScenarioConfig, domain: DomainTag) -> Result<Vec<SeedTemplate>> {
    let det = match domain {
        DomainTag::Source => &cfg.source_detector,
        DomainTag::Target => &cfg.target_detector,
    };
    let library = line_library();
    cfg.isotopes
        .iter()
        .map(|iso| {
            let lines = library
                .iter()
                .find(|l| &l.isotope == iso)
                .ok_or_else(|| Error::validation(format!("unknown isotope {iso:?}")))?;
            render_template(lines, det, &cfg.grid)
        })
        .collect()
}

/// Renders the aggregate background template for one domain's detector.
pub fn background_template(cfg: &ScenarioConfig, domain: DomainTag) -> Result<SeedTemplate> {
    let det = match domain {
        DomainTag::Source => &cfg.source_detector,
        DomainTag::Target => &cfg.target_detector,
    };
    render_template(&background_lines(), det, &cfg.grid)
}

fn synth_split(
    cfg: &ScenarioConfig,
    templates: &[SeedTemplate],
    bg: &SeedTemplate,
    domain: DomainTag,
    split: SplitTag,
    n: usize,
) -> Result<LabeledDataset> {
    let m = templates.len();
    let alpha = vec![cfg.dirichlet_alpha; m];
    let stream_label = format!("synth/{domain}/{split}");
    let mut spectra = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n * m);
    for i in 0..n {
        let mut rng = substream(cfg.master_seed, &stream_label, i as u64);
        let (mixture, label) = match cfg.mixing {
            MixingMode::SingleLabel => {
                let c = i % m;
                let mut label = vec![0.0; m];
                label[c] = 1.0;
                (templates[c].clone(), label)
            }
            MixingMode::Mixed { max_components } => {
                mix_seeds(templates, &alpha, max_components, &mut rng)?
            }
        };
        let snr = if cfg.snr_max > cfg.snr_min {
            rng.random_range(cfg.snr_min..=cfg.snr_max)
        } else {
            cfg.snr_min
        };
        let sp = synthesize(&mixture, bg, &cfg.grid, snr, cfg.bg_cps, cfg.live_time, &mut rng)?;
        spectra.push(sp);
        labels.extend_from_slice(&label);
    }
    let ds = LabeledDataset {
        spectra,
        labels,
        classes: cfg.isotopes.clone(),
        domain_tag: domain,
        split_tag: split,
    };
    ds.validate()?;
    Ok(ds)
}

/// Synthesizes all six datasets (2 domains x 3 splits). Splits draw from
/// independent rng substreams, so they are disjoint by construction and
/// byte-stable across re-runs of the same config.
pub fn build_scenario(cfg: &ScenarioConfig) -> Result<Scenario> {
    cfg.validate()?;
    let mut triples = Vec::with_capacity(2);
    for domain in [DomainTag::Source, DomainTag::Target] {
        let templates = class_templates(cfg, domain)?;
        let bg = background_template(cfg, domain)?;
        triples.push(DatasetTriple {
            train: synth_split(cfg, &templates, &bg, domain, SplitTag::Train, cfg.sizes.train)?,
            val: synth_split(cfg, &templates, &bg, domain, SplitTag::Val, cfg.sizes.val)?,
            test: synth_split(cfg, &templates, &bg, domain, SplitTag::Test, cfg.sizes.test)?,
        });
    }
    let target = triples.pop().expect("two triples");
    let source = triples.pop().expect("two triples");
    Ok(Scenario { source, target })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ScenarioConfig {
        let source = DetectorModel::reference();
        ScenarioConfig {
            isotopes: vec![
                "Cs-137".into(),
                "Co-60".into(),
                "Ba-133".into(),
                "Mo-99".into(),
                "K-40".into(),
                "Na-22".into(),
                "Ir-192".into(),
                "U-235".into(),
            ],
            grid: EnergyGrid { n_bins: 256, e_min: 0.0, e_max: 3000.0 },
            source_detector: source,
            target_detector: DetectorModel::shifted_from(&source),
            mixing: MixingMode::SingleLabel,
            dirichlet_alpha: 1.0,
            sizes: SplitSizes { train: 32, val: 16, test: 16 },
            snr_min: 5.0,
            snr_max: 10.0,
            bg_cps: 60.0,
            live_time: 10.0,
            master_seed: 42,
        }
    }

    #[test]
    fn single_label_scenario_has_one_hot_rows() {
        let cfg = tiny_config();
        let sc = build_scenario(&cfg).unwrap();
        assert_eq!(sc.source.train.n_classes(), 8);
        for ds in [&sc.source.train, &sc.target.test] {
            for i in 0..ds.n() {
                let row = ds.label_row(i);
                assert_eq!(row.iter().filter(|&&v| v > 0.0).count(), 1);
                assert_eq!(row.iter().sum::<f64>(), 1.0);
            }
        }
    }

    #[test]
    fn mixed_scenario_rows_bounded_by_max_components() {
        let mut cfg = tiny_config();
        cfg.mixing = MixingMode::Mixed { max_components: 3 };
        let sc = build_scenario(&cfg).unwrap();
        for i in 0..sc.source.train.n() {
            let row = sc.source.train.label_row(i);
            assert!(row.iter().filter(|&&v| v > 0.0).count() <= 3);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn same_seed_reproduces_byte_identical_datasets() {
        let cfg = tiny_config();
        let a = build_scenario(&cfg).unwrap();
        let b = build_scenario(&cfg).unwrap();
        for (x, y) in [(&a.source.train, &b.source.train), (&a.target.val, &b.target.val)] {
            assert_eq!(x.labels, y.labels);
            for (sx, sy) in x.spectra.iter().zip(&y.spectra) {
                assert_eq!(sx.counts, sy.counts);
            }
        }
    }

    #[test]
    fn splits_differ_from_each_other() {
        let cfg = tiny_config();
        let sc = build_scenario(&cfg).unwrap();
        assert_ne!(sc.source.train.spectra[0].counts, sc.source.val.spectra[0].counts);
        assert_ne!(sc.source.train.spectra[0].counts, sc.target.train.spectra[0].counts);
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = tiny_config();
        let mut b = tiny_config();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.master_seed = 43;
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
    }

    #[test]
    fn mixed_mode_rejects_too_many_components() {
        let mut cfg = tiny_config();
        cfg.mixing = MixingMode::Mixed { max_components: 9 };
        assert!(build_scenario(&cfg).is_err());
    }

    #[test]
    fn library_templates_all_render() {
        let grid = EnergyGrid::default();
        let det = DetectorModel::reference();
        for lines in line_library() {
            let t = render_template(&lines, &det, &grid).unwrap();
            t.validate().unwrap();
        }
    }
}
