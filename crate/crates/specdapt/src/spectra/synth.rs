//! Seed mixing, Poisson count synthesis, and input normalization.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Gamma, Poisson};

use crate::error::{Error, Result};
use crate::spectra::types::{EnergyGrid, SeedTemplate, Spectrum};

/// Mixes up to `max_components` templates with Dirichlet-drawn fractions.
/// The component count k is drawn uniformly from 1..=max_components, the k
/// templates are chosen uniformly without replacement, and the fractions
/// come from Dirichlet(alpha restricted to the chosen components). Returns
/// the mixture shape and a label vector over all templates.
pub fn mix_seeds(
    templates: &[SeedTemplate],
    alpha: &[f64],
    max_components: usize,
    rng: &mut ChaCha12Rng,
) -> Result<(SeedTemplate, Vec<f64>)> {
    if templates.is_empty() {
        return Err(Error::validation("mix_seeds needs at least one template"));
    }
    if max_components == 0 || max_components > templates.len() {
        return Err(Error::validation(format!(
            "max_components {max_components} outside 1..={}",
            templates.len()
        )));
    }
    if alpha.len() != templates.len() || alpha.iter().any(|&a| !(a > 0.0)) {
        return Err(Error::validation("alpha must be positive, one entry per template"));
    }
    let n_bins = templates[0].shape.len();

    let k = rng.random_range(1..=max_components);
    let chosen = sample(rng, templates.len(), k).into_vec();
    let fractions: Vec<f64> = if k == 1 {
        vec![1.0]
    } else {
        // Dirichlet via normalized Gamma(alpha_i, 1) draws; the n-ary
        // distribution in rand_distr is const-generic, k is runtime.
        let mut draws = Vec::with_capacity(k);
        for &i in &chosen {
            let g = Gamma::new(alpha[i], 1.0)
                .map_err(|e| Error::validation(format!("gamma({}): {e}", alpha[i])))?;
            draws.push(g.sample(rng));
        }
        let total: f64 = draws.iter().sum();
        if total > 0.0 {
            draws.iter().map(|d| d / total).collect()
        } else {
            vec![1.0 / k as f64; k]
        }
    };

    let mut shape = vec![0.0; n_bins];
    let mut label = vec![0.0; templates.len()];
    for (&idx, &f) in chosen.iter().zip(&fractions) {
        for (s, t) in shape.iter_mut().zip(&templates[idx].shape) {
            *s += f * t;
        }
        label[idx] = f;
    }
    // guard against Dirichlet rounding drift
    let lsum: f64 = label.iter().sum();
    label.iter_mut().for_each(|v| *v /= lsum);

    Ok((SeedTemplate { isotope: format!("mix[{k}]"), shape }, label))
}

/// Draws a Poisson spectrum from foreground + background rates. The SNR is
/// defined as expected foreground counts over the square root of expected
/// background counts: B = bg_cps * live_time, F = snr * sqrt(B).
pub fn synthesize(
    fg: &SeedTemplate,
    bg: &SeedTemplate,
    grid: &EnergyGrid,
    snr_target: f64,
    bg_cps: f64,
    live_time: f64,
    rng: &mut ChaCha12Rng,
) -> Result<Spectrum> {
    if fg.shape.len() != grid.n_bins {
        return Err(Error::validation("template does not match grid"));
    }
    if !(live_time > 0.0) {
        return Err(Error::validation(format!("live_time {live_time} must be > 0")));
    }
    if !(bg_cps > 0.0) || !(snr_target >= 0.0) {
        return Err(Error::validation(format!(
            "rates must be positive (bg_cps {bg_cps}) and snr nonnegative ({snr_target})"
        )));
    }
    if fg.shape.len() != bg.shape.len() {
        return Err(Error::validation("foreground/background bin mismatch"));
    }
    let b = bg_cps * live_time;
    let f = snr_target * b.sqrt();
    let mut counts = Vec::with_capacity(fg.shape.len());
    for (pf, pb) in fg.shape.iter().zip(&bg.shape) {
        let lambda = f * pf + b * pb;
        let c = if lambda > 0.0 {
            Poisson::new(lambda)
                .map_err(|e| Error::validation(format!("poisson({lambda}): {e}")))?
                .sample(rng)
        } else {
            0.0
        };
        counts.push(c.round());
    }
    Ok(Spectrum { counts, live_time, grid: *grid })
}

/// Z-score over one spectrum with the population standard deviation.
/// A zero-variance input maps to the all-zeros vector.
pub fn zscore(counts: &[f64]) -> Vec<f64> {
    let n = counts.len();
    if n == 0 {
        return Vec::new();
    }
    let mean = counts.iter().sum::<f64>() / n as f64;
    let var = counts.iter().map(|&c| (c - mean) * (c - mean)).sum::<f64>() / n as f64;
    if var == 0.0 {
        return vec![0.0; n];
    }
    let inv = 1.0 / var.sqrt();
    counts.iter().map(|&c| (c - mean) * inv).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn templates2() -> Vec<SeedTemplate> {
        vec![
            SeedTemplate { isotope: "a".into(), shape: vec![1.0, 0.0, 0.0, 0.0] },
            SeedTemplate { isotope: "b".into(), shape: vec![0.0, 0.0, 0.5, 0.5] },
        ]
    }

    #[test]
    fn mixture_stays_on_simplex() {
        let t = templates2();
        let alpha = [1.0, 1.0];
        let mut rng = substream(5, "mix", 0);
        for _ in 0..200 {
            let (mixed, label) = mix_seeds(&t, &alpha, 2, &mut rng).unwrap();
            assert!((mixed.shape.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((label.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(label.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn symmetric_alpha_has_symmetric_mean_fractions() {
        let t = templates2();
        let alpha = [1.0, 1.0];
        let mut rng = substream(5, "mix-mean", 0);
        let n = 10_000;
        let mut mean = [0.0, 0.0];
        for _ in 0..n {
            let (_, label) = mix_seeds(&t, &alpha, 2, &mut rng).unwrap();
            mean[0] += label[0];
            mean[1] += label[1];
        }
        mean[0] /= n as f64;
        mean[1] /= n as f64;
        assert!((mean[0] - 0.5).abs() < 0.02, "mean fraction {}", mean[0]);
        assert!((mean[1] - 0.5).abs() < 0.02, "mean fraction {}", mean[1]);
    }

    #[test]
    fn single_component_mixture_is_one_hot() {
        let t = templates2();
        let alpha = [1.0, 1.0];
        let mut rng = substream(6, "mix-k1", 0);
        let (mixed, label) = mix_seeds(&t, &alpha, 1, &mut rng).unwrap();
        let hot: Vec<usize> = label
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(hot.len(), 1);
        assert_eq!(label[hot[0]], 1.0);
        assert_eq!(mixed.shape, t[hot[0]].shape);
    }

    fn grid4() -> EnergyGrid {
        EnergyGrid { n_bins: 4, e_min: 0.0, e_max: 4.0 }
    }

    fn grid2() -> EnergyGrid {
        EnergyGrid { n_bins: 2, e_min: 0.0, e_max: 2.0 }
    }

    #[test]
    fn poisson_totals_concentrate_around_f_plus_b() {
        // B = 500, snr = 22.36 -> F ~ 500, total ~ 1000
        let fg = SeedTemplate { isotope: "fg".into(), shape: vec![0.25; 4] };
        let bg = SeedTemplate { isotope: "bg".into(), shape: vec![0.25; 4] };
        let mut rng = substream(7, "synth", 0);
        let sp = synthesize(&fg, &bg, &grid4(), 22.36, 50.0, 10.0, &mut rng).unwrap();
        let total: f64 = sp.counts.iter().sum();
        let expected = 22.36 * 500.0_f64.sqrt() + 500.0;
        assert!((total - expected).abs() < 5.0 * expected.sqrt());
        assert!(sp.counts.iter().all(|&c| c >= 0.0 && c.fract() == 0.0));
    }

    #[test]
    fn zero_snr_is_pure_background() {
        let fg = SeedTemplate { isotope: "fg".into(), shape: vec![1.0, 0.0] };
        let bg = SeedTemplate { isotope: "bg".into(), shape: vec![0.0, 1.0] };
        let mut rng = substream(7, "synth0", 0);
        let mut total_fg = 0.0;
        let mut total_bg = 0.0;
        for _ in 0..200 {
            let sp = synthesize(&fg, &bg, &grid2(), 0.0, 10.0, 5.0, &mut rng).unwrap();
            total_fg += sp.counts[0];
            total_bg += sp.counts[1];
        }
        assert_eq!(total_fg, 0.0);
        let mean_bg = total_bg / 200.0;
        assert!((mean_bg - 50.0).abs() < 5.0 * (50.0_f64 / 200.0).sqrt());
    }

    #[test]
    fn synthesis_is_deterministic_per_stream() {
        let fg = SeedTemplate { isotope: "fg".into(), shape: vec![0.5, 0.5] };
        let bg = SeedTemplate { isotope: "bg".into(), shape: vec![0.5, 0.5] };
        let a = synthesize(&fg, &bg, &grid2(), 5.0, 20.0, 3.0, &mut substream(9, "det", 4)).unwrap();
        let b = synthesize(&fg, &bg, &grid2(), 5.0, 20.0, 3.0, &mut substream(9, "det", 4)).unwrap();
        assert_eq!(a.counts, b.counts);
    }

    #[test]
    fn poisson_mean_property() {
        let fg = SeedTemplate { isotope: "fg".into(), shape: vec![0.7, 0.3] };
        let bg = SeedTemplate { isotope: "bg".into(), shape: vec![0.2, 0.8] };
        let mut rng = substream(8, "poisson-mean", 0);
        let n = 10_000;
        let mut total = 0.0;
        for _ in 0..n {
            let sp = synthesize(&fg, &bg, &grid2(), 4.0, 25.0, 2.0, &mut rng).unwrap();
            total += sp.counts.iter().sum::<f64>();
        }
        let b = 50.0_f64;
        let f = 4.0 * b.sqrt();
        let mean = total / n as f64;
        assert!((mean - (f + b)).abs() / (f + b) < 0.01, "mean {mean}");
    }

    #[test]
    fn zscore_matches_hand_values() {
        let z = zscore(&[1.0, 2.0, 3.0]);
        let s = (2.0_f64 / 3.0).sqrt();
        assert!((z[0] + 1.0 / s).abs() < 1e-9);
        assert!(z[1].abs() < 1e-12);
        assert!((z[2] - 1.0 / s).abs() < 1e-9);
        assert!((z[2] - 1.22474).abs() < 1e-5);
    }

    #[test]
    fn zscore_constant_input_maps_to_zeros() {
        assert_eq!(zscore(&[5.0, 5.0, 5.0, 5.0]), vec![0.0; 4]);
    }

    #[test]
    fn zscore_output_is_standardized() {
        let mut rng = substream(10, "zscore-prop", 0);
        for _ in 0..50 {
            let x: Vec<f64> = (0..97).map(|_| rng.random::<f64>() * 100.0).collect();
            let z = zscore(&x);
            let mean = z.iter().sum::<f64>() / z.len() as f64;
            let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / z.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }
}
