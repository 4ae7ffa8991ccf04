//! Core domain types for surrogate gamma spectra.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform energy binning. Bin i covers [e_min + i*w, e_min + (i+1)*w).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyGrid {
    pub n_bins: usize,
    pub e_min: f64,
    pub e_max: f64,
}

impl Default for EnergyGrid {
    fn default() -> Self {
        EnergyGrid { n_bins: 1024, e_min: 0.0, e_max: 3000.0 }
    }
}

impl EnergyGrid {
    pub fn validate(&self) -> Result<()> {
        if self.n_bins == 0 || !(self.e_max > self.e_min) {
            return Err(Error::validation(format!(
                "energy grid needs positive bin width: n_bins {}, range [{}, {}]",
                self.n_bins, self.e_min, self.e_max
            )));
        }
        Ok(())
    }

    pub fn bin_width(&self) -> f64 {
        (self.e_max - self.e_min) / self.n_bins as f64
    }

    pub fn bin_lo(&self, i: usize) -> f64 {
        self.e_min + i as f64 * self.bin_width()
    }

    pub fn bin_center(&self, i: usize) -> f64 {
        self.e_min + (i as f64 + 0.5) * self.bin_width()
    }

    /// Bin index containing `energy`, or None outside the grid.
    pub fn bin_of(&self, energy: f64) -> Option<usize> {
        if energy < self.e_min || energy >= self.e_max {
            return None;
        }
        let i = ((energy - self.e_min) / self.bin_width()) as usize;
        Some(i.min(self.n_bins - 1))
    }
}

/// Detector response: resolution FWHM(E) = a + b*sqrt(E) + c*E (keV),
/// linear energy calibration (gain, offset), and a flat Compton continuum
/// carrying `compton_fraction` of each line's intensity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub fwhm_a: f64,
    pub fwhm_b: f64,
    pub fwhm_c: f64,
    pub gain: f64,
    pub offset: f64,
    pub compton_fraction: f64,
    pub low_energy_cutoff: f64,
}

impl DetectorModel {
    pub fn fwhm(&self, energy_kev: f64) -> f64 {
        self.fwhm_a + self.fwhm_b * energy_kev.max(0.0).sqrt() + self.fwhm_c * energy_kev
    }

    pub fn validate(&self, grid: &EnergyGrid) -> Result<()> {
        if !(self.gain > 0.0) {
            return Err(Error::validation(format!("detector gain {} must be > 0", self.gain)));
        }
        if !(0.0..1.0).contains(&self.compton_fraction) {
            return Err(Error::validation(format!(
                "compton_fraction {} outside [0, 1)",
                self.compton_fraction
            )));
        }
        for i in 0..=grid.n_bins {
            let e = grid.e_min + i as f64 * grid.bin_width();
            if !(self.fwhm(e) > 0.0) {
                return Err(Error::validation(format!(
                    "FWHM({e:.1} keV) = {} not positive",
                    self.fwhm(e)
                )));
            }
        }
        Ok(())
    }
}

/// One emission line: energy in keV and a positive branching weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub energy: f64,
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineList {
    pub isotope: String,
    pub lines: Vec<Line>,
}

impl LineList {
    pub fn validate(&self, grid: &EnergyGrid) -> Result<()> {
        if self.lines.is_empty() {
            return Err(Error::validation(format!("isotope {:?} has no lines", self.isotope)));
        }
        for l in &self.lines {
            if !(l.intensity > 0.0) {
                return Err(Error::validation(format!(
                    "{}: line {} keV has nonpositive intensity",
                    self.isotope, l.energy
                )));
            }
            if l.energy < grid.e_min || l.energy > grid.e_max {
                return Err(Error::validation(format!(
                    "{}: line {} keV outside grid [{}, {}]",
                    self.isotope, l.energy, grid.e_min, grid.e_max
                )));
            }
        }
        Ok(())
    }
}

/// A counts histogram over an energy grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub counts: Vec<f64>,
    pub live_time: f64,
    pub grid: EnergyGrid,
}

/// An l1-normalized emission shape for one isotope.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedTemplate {
    pub isotope: String,
    pub shape: Vec<f64>,
}

impl SeedTemplate {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.shape.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.shape.iter().any(|&v| v < 0.0) {
            return Err(Error::validation(format!(
                "template {:?} not l1-normalized (sum {sum})",
                self.isotope
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Source,
    Target,
}

impl std::fmt::Display for DomainTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DomainTag::Source => "source",
            DomainTag::Target => "target",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for SplitTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        })
    }
}

/// N spectra with an N x M proportion-label matrix (flat, row-major).
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub spectra: Vec<Spectrum>,
    pub labels: Vec<f64>,
    pub classes: Vec<String>,
    pub domain_tag: DomainTag,
    pub split_tag: SplitTag,
}

impl LabeledDataset {
    pub fn n(&self) -> usize {
        self.spectra.len()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn label_row(&self, i: usize) -> &[f64] {
        let m = self.n_classes();
        &self.labels[i * m..(i + 1) * m]
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.n_classes();
        if self.labels.len() != self.n() * m {
            return Err(Error::validation(format!(
                "label matrix is {}, expected {} x {}",
                self.labels.len(),
                self.n(),
                m
            )));
        }
        for i in 0..self.n() {
            let row = self.label_row(i);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&v| v < 0.0) {
                return Err(Error::validation(format!("label row {i} off the simplex (sum {sum})")));
            }
        }
        let n_bins = self.spectra.first().map(|s| s.grid.n_bins).unwrap_or(0);
        if self.spectra.iter().any(|s| s.counts.len() != n_bins) {
            return Err(Error::validation("spectra disagree on bin count"));
        }
        Ok(())
    }
}
