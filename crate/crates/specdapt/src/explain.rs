//! KernelSHAP attributions over contiguous channel groups.
//!
//! Coalitions mask absent groups with baseline bins, the model is
//! evaluated on the masked spectra, and the attributions come from a
//! Shapley-kernel-weighted least squares with the efficiency
//! constraint folded in, so base + sum(phi) always lands on the
//! explained output. Everything goes through the same per-spectrum
//! z-score the models were trained on.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::tensor::TensorF;
use crate::error::{Error, Result};
use crate::models::ModelBundle;
use crate::rng::substream;
use crate::spectra::scenario::{background_template, ScenarioConfig};
use crate::spectra::synth::{synthesize, zscore};
use crate::spectra::types::{DomainTag, EnergyGrid, Spectrum};

/// Exact coalition enumeration is used whenever 2^n_groups stays at or
/// below this; larger group counts fall back to sampled coalitions.
pub const EXACT_COALITION_LIMIT: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapExplanation {
    /// Half-open bin ranges, one per group, covering all bins.
    pub groups: Vec<(usize, usize)>,
    pub phi: Vec<f64>,
    /// Model output on the all-baseline coalition.
    pub base_value: f64,
    /// Model output on the explained spectrum itself.
    pub explained_value: f64,
    pub class_index: usize,
    /// |explained - base - sum(phi)|, reported rather than hidden.
    pub fidelity_residual: f64,
    pub exact: bool,
}

/// Attributions for the post-softmax probability of `class_index`.
pub fn kernel_shap(
    model: &ModelBundle,
    spectrum: &Spectrum,
    baseline: &Spectrum,
    n_groups: usize,
    n_coalitions: usize,
    rng: &mut ChaCha12Rng,
    class_index: usize,
) -> Result<ShapExplanation> {
    let n_bins = model.spec.n_bins();
    let m = model.spec.n_classes();
    if spectrum.counts.len() != n_bins {
        return Err(Error::validation(format!(
            "spectrum has {} bins, model expects {n_bins}",
            spectrum.counts.len()
        )));
    }
    if baseline.counts.len() != n_bins || baseline.grid != spectrum.grid {
        return Err(Error::validation("baseline grid differs from the spectrum grid"));
    }
    if class_index >= m {
        return Err(Error::validation(format!("class index {class_index} >= {m} classes")));
    }
    let mut f = |rows: &[Vec<f64>]| -> Result<Vec<f64>> {
        let mut values = Vec::with_capacity(rows.len() * n_bins);
        for row in rows {
            values.extend(zscore(row));
        }
        let x = TensorF::new(vec![rows.len(), n_bins], values)?;
        let probs = model.predict_proba(&x)?;
        Ok(probs.values().iter().skip(class_index).step_by(m).copied().collect())
    };
    let mut out =
        explain_fn(&mut f, &spectrum.counts, &baseline.counts, n_groups, n_coalitions, rng)?;
    out.class_index = class_index;
    Ok(out)
}

/// Generic core over any batched scalar-valued function of a counts row.
fn explain_fn(
    f: &mut dyn FnMut(&[Vec<f64>]) -> Result<Vec<f64>>,
    spectrum: &[f64],
    baseline: &[f64],
    n_groups: usize,
    n_coalitions: usize,
    rng: &mut ChaCha12Rng,
) -> Result<ShapExplanation> {
    let groups = group_bounds(spectrum.len(), n_groups)?;
    let g = n_groups;
    let exact = (1usize << g.min(63)) <= EXACT_COALITION_LIMIT;

    // interior coalitions as (bit mask, weight)
    let coalitions: Vec<(u64, f64)> = if exact {
        (1..(1u64 << g) - 1).map(|mask| (mask, kernel_weight(g, mask.count_ones() as usize))).collect()
    } else {
        sample_coalitions(g, n_coalitions, rng)
    };

    let mut rows = Vec::with_capacity(coalitions.len() + 2);
    rows.push(baseline.to_vec());
    rows.push(spectrum.to_vec());
    for &(mask, _) in &coalitions {
        rows.push(masked_row(spectrum, baseline, &groups, mask));
    }
    let values = f(&rows)?;
    if values.len() != rows.len() || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("model produced non-finite coalition values"));
    }
    let base_value = values[0];
    let explained_value = values[1];
    let delta = explained_value - base_value;

    let phi = if g == 1 {
        vec![delta]
    } else {
        solve_constrained_wls(g, &coalitions, &values[2..], base_value, delta)?
    };
    let fidelity_residual = (explained_value - base_value - phi.iter().sum::<f64>()).abs();
    Ok(ShapExplanation {
        groups,
        phi,
        base_value,
        explained_value,
        class_index: 0,
        fidelity_residual,
        exact,
    })
}

fn group_bounds(n_bins: usize, n_groups: usize) -> Result<Vec<(usize, usize)>> {
    if n_groups == 0 || n_bins % n_groups != 0 {
        return Err(Error::validation(format!(
            "n_groups {n_groups} must divide the {n_bins} bins"
        )));
    }
    let width = n_bins / n_groups;
    Ok((0..n_groups).map(|i| (i * width, (i + 1) * width)).collect())
}

fn masked_row(
    spectrum: &[f64],
    baseline: &[f64],
    groups: &[(usize, usize)],
    mask: u64,
) -> Vec<f64> {
    let mut row = baseline.to_vec();
    for (i, &(lo, hi)) in groups.iter().enumerate() {
        if mask >> i & 1 == 1 {
            row[lo..hi].copy_from_slice(&spectrum[lo..hi]);
        }
    }
    row
}

/// Shapley kernel weight for an interior coalition of size s.
fn kernel_weight(g: usize, s: usize) -> f64 {
    (g as f64 - 1.0) / (binomial(g, s) * (s * (g - s)) as f64)
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    let mut out = 1.0;
    for i in 0..k {
        out = out * (n - i) as f64 / (i + 1) as f64;
    }
    out
}

/// Draws interior coalitions with probability proportional to the
/// Shapley kernel (size s with mass 1/(s(g-s)), then a uniform subset
/// of that size), so each draw carries unit weight. Duplicates
/// accumulate.
fn sample_coalitions(g: usize, n_coalitions: usize, rng: &mut ChaCha12Rng) -> Vec<(u64, f64)> {
    let size_mass: Vec<f64> = (1..g).map(|s| 1.0 / (s * (g - s)) as f64).collect();
    let total: f64 = size_mass.iter().sum();
    let mut by_mask = std::collections::BTreeMap::new();
    for _ in 0..n_coalitions {
        let mut u = rng.random::<f64>() * total;
        let mut s = g - 1;
        for (i, &mass) in size_mass.iter().enumerate() {
            if u < mass {
                s = i + 1;
                break;
            }
            u -= mass;
        }
        let mut mask = 0u64;
        for bit in rand::seq::index::sample(rng, g, s) {
            mask |= 1 << bit;
        }
        *by_mask.entry(mask).or_insert(0.0) += 1.0;
    }
    by_mask.into_iter().collect()
}

/// Weighted least squares for phi with the efficiency constraint
/// sum(phi) = delta eliminated into the last coordinate.
fn solve_constrained_wls(
    g: usize,
    coalitions: &[(u64, f64)],
    values: &[f64],
    base_value: f64,
    delta: f64,
) -> Result<Vec<f64>> {
    let d = g - 1;
    let mut a = vec![0.0; d * d];
    let mut b = vec![0.0; d];
    let mut x_row = vec![0.0; d];
    for (&(mask, weight), &value) in coalitions.iter().zip(values) {
        let z_last = (mask >> (g - 1) & 1) as f64;
        for (i, x) in x_row.iter_mut().enumerate() {
            *x = (mask >> i & 1) as f64 - z_last;
        }
        let y = value - base_value - z_last * delta;
        for i in 0..d {
            if x_row[i] == 0.0 {
                continue;
            }
            b[i] += weight * x_row[i] * y;
            for j in 0..d {
                a[i * d + j] += weight * x_row[i] * x_row[j];
            }
        }
    }

    let scale = a.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let tol = scale * 1e-12;
    let mut phi = gaussian_solve(&mut a, &mut b, d, tol).ok_or_else(|| {
        Error::degenerate(format!(
            "singular coalition design for {g} groups; increase n_coalitions (got {} distinct)",
            coalitions.len()
        ))
    })?;
    let head_sum: f64 = phi.iter().sum();
    phi.push(delta - head_sum);
    Ok(phi)
}

/// In-place Gaussian elimination with partial pivoting; None when a
/// pivot falls below tol.
fn gaussian_solve(a: &mut [f64], b: &mut [f64], n: usize, tol: f64) -> Option<Vec<f64>> {
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().partial_cmp(&a[j * n + col].abs()).unwrap())?;
        if a[pivot_row * n + col].abs() <= tol {
            return None;
        }
        if pivot_row != col {
            for j in 0..n {
                a.swap(col * n + j, pivot_row * n + j);
            }
            b.swap(col, pivot_row);
        }
        let pivot = a[col * n + col];
        for row in col + 1..n {
            let factor = a[row * n + col] / pivot;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                a[row * n + j] -= factor * a[col * n + j];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for j in row + 1..n {
            acc -= a[row * n + j] * x[j];
        }
        x[row] = acc / a[row * n + row];
    }
    Some(x)
}

/// Mean of `n_draws` background-only spectra under the target-domain
/// detector; the masking baseline for explanations.
pub fn background_baseline(cfg: &ScenarioConfig, n_draws: usize) -> Result<Spectrum> {
    if n_draws == 0 {
        return Err(Error::validation("baseline needs at least one background draw"));
    }
    let bg = background_template(cfg, DomainTag::Target)?;
    let mut mean = vec![0.0; cfg.grid.n_bins];
    for i in 0..n_draws {
        let mut rng = substream(cfg.master_seed, "explain/baseline", i as u64);
        let sp = synthesize(&bg, &bg, &cfg.grid, 0.0, cfg.bg_cps, cfg.live_time, &mut rng)?;
        for (m, c) in mean.iter_mut().zip(&sp.counts) {
            *m += c;
        }
    }
    for m in &mut mean {
        *m /= n_draws as f64;
    }
    Ok(Spectrum { counts: mean, live_time: cfg.live_time, grid: cfg.grid })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainConfig {
    pub n_groups: usize,
    /// Only consulted when the group count forces sampled coalitions.
    pub n_coalitions: usize,
    pub class_index: usize,
    pub seed: u64,
    /// How many salient ranges to surface per model.
    pub top_k: usize,
    pub config_hash: String,
    pub master_seed: u64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            n_groups: 32,
            n_coalitions: 2048,
            class_index: 0,
            seed: 0,
            top_k: 5,
            config_hash: String::new(),
            master_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SalientRange {
    pub group: usize,
    pub lo_kev: f64,
    pub hi_kev: f64,
    pub phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelExplanation {
    pub label: String,
    pub shap: ShapExplanation,
    /// Groups ranked by descending attribution toward the class.
    pub top_ranges: Vec<SalientRange>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainReport {
    pub grid: EnergyGrid,
    pub counts: Vec<f64>,
    pub class_index: usize,
    pub class_name: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub a: ModelExplanation,
    pub b: Option<ModelExplanation>,
}

/// Side-by-side explanation of one spectrum under one or two models
/// (e.g. target-only against domain-adapted). Both models see the same
/// coalitions, drawn from the config seed.
pub fn explain_report(
    model_a: &ModelBundle,
    label_a: &str,
    model_b: Option<(&ModelBundle, &str)>,
    spectrum: &Spectrum,
    baseline: &Spectrum,
    classes: &[String],
    cfg: &ExplainConfig,
) -> Result<ExplainReport> {
    if let Some((mb, _)) = model_b {
        if mb.spec.n_bins() != model_a.spec.n_bins()
            || mb.spec.n_classes() != model_a.spec.n_classes()
        {
            return Err(Error::validation("models disagree on grid or class count"));
        }
    }
    if classes.len() != model_a.spec.n_classes() {
        return Err(Error::validation(format!(
            "{} class names for {} model outputs",
            classes.len(),
            model_a.spec.n_classes()
        )));
    }
    let explain_one = |model: &ModelBundle, label: &str| -> Result<ModelExplanation> {
        let mut rng = substream(cfg.seed, "explain/coalitions", 0);
        let shap = kernel_shap(
            model,
            spectrum,
            baseline,
            cfg.n_groups,
            cfg.n_coalitions,
            &mut rng,
            cfg.class_index,
        )?;
        let top_ranges = top_ranges(&shap, &spectrum.grid, cfg.top_k);
        Ok(ModelExplanation { label: label.to_string(), shap, top_ranges })
    };
    let a = explain_one(model_a, label_a)?;
    let b = match model_b {
        Some((mb, label)) => Some(explain_one(mb, label)?),
        None => None,
    };
    Ok(ExplainReport {
        grid: spectrum.grid,
        counts: spectrum.counts.clone(),
        class_index: cfg.class_index,
        class_name: classes[cfg.class_index].clone(),
        config_hash: cfg.config_hash.clone(),
        master_seed: cfg.master_seed,
        a,
        b,
    })
}

fn top_ranges(shap: &ShapExplanation, grid: &EnergyGrid, top_k: usize) -> Vec<SalientRange> {
    let mut order: Vec<usize> = (0..shap.phi.len()).collect();
    order.sort_by(|&i, &j| shap.phi[j].partial_cmp(&shap.phi[i]).expect("finite phi").then(i.cmp(&j)));
    order
        .into_iter()
        .take(top_k)
        .map(|i| {
            let (lo, hi) = shap.groups[i];
            SalientRange {
                group: i,
                lo_kev: grid.bin_lo(lo),
                hi_kev: grid.bin_lo(hi),
                phi: shap.phi[i],
            }
        })
        .collect()
}

pub fn report_json(report: &ExplainReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)?)
}

/// Counts trace with group bands colored by attribution sign and
/// scaled by magnitude; one panel per model.
pub fn report_svg(report: &ExplainReport) -> String {
    let panels: Vec<&ModelExplanation> =
        std::iter::once(&report.a).chain(report.b.iter()).collect();
    let (pw, ph, margin, header) = (430.0, 300.0, 40.0, 28.0);
    let width = pw * panels.len() as f64 + margin;
    let height = ph + header + margin;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         font-family=\"sans-serif\" font-size=\"11\">\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{:.0}\" y=\"16\" font-size=\"13\">class {} attributions</text>\n",
        margin, report.class_name
    ));
    let max_count = report.counts.iter().cloned().fold(1.0_f64, f64::max);
    for (p, me) in panels.iter().enumerate() {
        let x0 = margin + p as f64 * pw;
        let y0 = header;
        let plot_w = pw - 60.0;
        let plot_h = ph - 50.0;
        let max_phi =
            me.shap.phi.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
            x0,
            y0 - 6.0,
            me.label
        ));
        for (i, &(lo, hi)) in me.shap.groups.iter().enumerate() {
            let phi = me.shap.phi[i];
            let gx = x0 + lo as f64 / report.counts.len() as f64 * plot_w;
            let gw = (hi - lo) as f64 / report.counts.len() as f64 * plot_w;
            let color = if phi >= 0.0 { "#d62728" } else { "#1f77b4" };
            let opacity = 0.85 * phi.abs() / max_phi;
            svg.push_str(&format!(
                "<rect x=\"{gx:.1}\" y=\"{y0:.1}\" width=\"{gw:.1}\" height=\"{plot_h:.1}\" \
                 fill=\"{color}\" fill-opacity=\"{opacity:.3}\"/>\n"
            ));
        }
        let mut points = String::new();
        for (i, &c) in report.counts.iter().enumerate() {
            let px = x0 + (i as f64 + 0.5) / report.counts.len() as f64 * plot_w;
            // sqrt scale keeps low-count structure visible
            let py = y0 + plot_h * (1.0 - (c.max(0.0) / max_count).sqrt());
            points.push_str(&format!("{px:.1},{py:.1} "));
        }
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"#222\" stroke-width=\"1\"/>\n",
            points.trim_end()
        ));
        for frac in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let e = report.grid.e_min + frac * (report.grid.e_max - report.grid.e_min);
            let px = x0 + frac * plot_w;
            svg.push_str(&format!(
                "<text x=\"{px:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{e:.0}</text>\n",
                y0 + plot_h + 14.0
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">energy (keV)</text>\n",
            x0 + plot_w / 2.0,
            y0 + plot_h + 30.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
