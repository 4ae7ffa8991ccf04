//! Surrogate spectrum synthesis: detector response, seed mixing, Poisson
//! draws, scenario assembly, and the SPDA1 container.

pub mod io;
pub mod response;
pub mod scenario;
pub mod synth;
pub mod types;

pub use response::{compton_edge, gaussian_broaden, render_template};
pub use scenario::{
    build_scenario, config_hash, background_template, class_templates, DatasetTriple,
    MixingMode, Scenario, ScenarioConfig, SplitSizes,
};
pub use synth::{mix_seeds, synthesize, zscore};
pub use types::{
    DetectorModel, DomainTag, EnergyGrid, LabeledDataset, Line, LineList, SeedTemplate, Spectrum,
    SplitTag,
};
