//! Surrogate detector response: Gaussian photopeaks plus a flat Compton
//! shelf. This stands in for full transport simulation while keeping the
//! calibration/resolution/continuum differences that create a domain gap.

use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::spectra::types::{DetectorModel, EnergyGrid, LineList, SeedTemplate};

const FWHM_TO_SIGMA: f64 = 2.3548;
const ELECTRON_REST_KEV: f64 = 511.0;

fn normal_cdf(x: f64, mu: f64, sigma: f64) -> f64 {
    0.5 * (1.0 + erf((x - mu) / (sigma * std::f64::consts::SQRT_2)))
}

/// Energy handed to the electron by 180-degree Compton scattering of a
/// photon at `e` keV; the continuum shelf ends here.
pub fn compton_edge(e: f64) -> f64 {
    // e minus the backscattered photon energy e / (1 + 2e/511)
    e - e / (1.0 + 2.0 * e / ELECTRON_REST_KEV)
}

/// Renders an isotope's line list through the detector model into an
/// l1-normalized template. Each line deposits intensity*(1-cf) as a
/// Gaussian photopeak at gain*E + offset with sigma = FWHM/2.3548, and
/// intensity*cf spread uniformly from the low-energy cutoff up to the
/// (calibrated) Compton edge. Bins below the cutoff are zeroed.
pub fn render_template(
    lines: &LineList,
    det: &DetectorModel,
    grid: &EnergyGrid,
) -> Result<SeedTemplate> {
    grid.validate()?;
    det.validate(grid)?;
    lines.validate(grid)?;

    let w = grid.bin_width();
    let mut shape = vec![0.0; grid.n_bins];
    let cf = det.compton_fraction;
    let mut any_above_cutoff = false;

    for line in &lines.lines {
        let center = det.gain * line.energy + det.offset;
        if center >= det.low_energy_cutoff {
            any_above_cutoff = true;
        }
        // photopeak: integrate the Gaussian over each bin
        let sigma = det.fwhm(center) / FWHM_TO_SIGMA;
        let peak_mass = line.intensity * (1.0 - cf);
        if peak_mass > 0.0 {
            let lo_bin = grid
                .bin_of(center - 8.0 * sigma)
                .unwrap_or(0);
            let hi_bin = grid
                .bin_of(center + 8.0 * sigma)
                .unwrap_or(grid.n_bins - 1);
            for (i, slot) in shape.iter_mut().enumerate().take(hi_bin + 1).skip(lo_bin) {
                let lo = grid.e_min + i as f64 * w;
                let mass = normal_cdf(lo + w, center, sigma) - normal_cdf(lo, center, sigma);
                *slot += peak_mass * mass;
            }
        }
        // Compton shelf: uniform from cutoff to the calibrated edge
        if cf > 0.0 {
            let edge = det.gain * compton_edge(line.energy) + det.offset;
            let shelf_lo = det.low_energy_cutoff.max(grid.e_min);
            let shelf_hi = edge.min(grid.e_max);
            if shelf_hi > shelf_lo {
                let shelf_mass = line.intensity * cf;
                let density = shelf_mass / (shelf_hi - shelf_lo);
                let first = grid.bin_of(shelf_lo).unwrap_or(0);
                let last = grid.bin_of(shelf_hi).unwrap_or(grid.n_bins - 1);
                for (i, slot) in shape.iter_mut().enumerate().take(last + 1).skip(first) {
                    let lo = (grid.e_min + i as f64 * w).max(shelf_lo);
                    let hi = (grid.e_min + (i + 1) as f64 * w).min(shelf_hi);
                    if hi > lo {
                        *slot += density * (hi - lo);
                    }
                }
            }
        }
    }

    if let Some(cut_bin) = grid.bin_of(det.low_energy_cutoff) {
        for slot in shape.iter_mut().take(cut_bin) {
            *slot = 0.0;
        }
    } else if det.low_energy_cutoff >= grid.e_max {
        shape.iter_mut().for_each(|v| *v = 0.0);
    }

    if !any_above_cutoff {
        return Err(Error::validation(format!(
            "{}: every line falls below the {} keV cutoff",
            lines.isotope, det.low_energy_cutoff
        )));
    }
    let total: f64 = shape.iter().sum();
    if !(total > 0.0) {
        return Err(Error::degenerate(format!(
            "{}: rendered template has zero mass",
            lines.isotope
        )));
    }
    shape.iter_mut().for_each(|v| *v /= total);
    Ok(SeedTemplate { isotope: lines.isotope.clone(), shape })
}

/// Redistributes each bin's counts through a Gaussian kernel whose width
/// follows `fwhm_fn` at the bin center. The kernel is renormalized over the
/// grid so the total is conserved even at the boundaries.
pub fn gaussian_broaden(
    counts: &[f64],
    fwhm_fn: impl Fn(f64) -> f64,
    grid: &EnergyGrid,
) -> Result<Vec<f64>> {
    grid.validate()?;
    if counts.len() != grid.n_bins {
        return Err(Error::validation(format!(
            "counts length {} != n_bins {}",
            counts.len(),
            grid.n_bins
        )));
    }
    let w = grid.bin_width();
    let mut out = vec![0.0; counts.len()];
    for (j, &c) in counts.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let center = grid.bin_center(j);
        let fwhm = fwhm_fn(center);
        if !(fwhm > 0.0) {
            return Err(Error::validation(format!(
                "FWHM({center:.1} keV) = {fwhm} not positive"
            )));
        }
        let sigma = fwhm / FWHM_TO_SIGMA;
        let lo_bin = grid.bin_of(center - 8.0 * sigma).unwrap_or(0);
        let hi_bin = grid.bin_of(center + 8.0 * sigma).unwrap_or(grid.n_bins - 1);
        let mut weights = Vec::with_capacity(hi_bin - lo_bin + 1);
        let mut wsum = 0.0;
        for i in lo_bin..=hi_bin {
            let lo = grid.e_min + i as f64 * w;
            let m = normal_cdf(lo + w, center, sigma) - normal_cdf(lo, center, sigma);
            weights.push(m);
            wsum += m;
        }
        for (i, wt) in weights.into_iter().enumerate() {
            out[lo_bin + i] += c * wt / wsum;
        }
    }
    Ok(out)
}
