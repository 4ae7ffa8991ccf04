//! Evaluation and diagnostic metrics over a set of model predictions.
//!
//! Everything here is a pure function of prediction matrices plus, for
//! the gradient and smoothness diagnostics, the model and raw spectra.

use serde::{Deserialize, Serialize};

use crate::autodiff::tensor::TensorF;
use crate::error::{Error, Result};
use crate::models::{labels_tensor, zscored_inputs, GraphOpts, ModelBundle};
use crate::spectra::types::LabeledDataset;

pub const PROB_FLOOR: f64 = 1e-12;
pub const DEFAULT_ECE_BINS: usize = 15;
pub const DEFAULT_KNN_K: usize = 10;

const SIMPLEX_TOL: f64 = 1e-6;

/// Predicted probabilities and logits next to the reference labels.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    pub probs: TensorF,
    pub logits: TensorF,
    pub labels: TensorF,
}

impl PredictionSet {
    pub fn new(probs: TensorF, logits: TensorF, labels: TensorF) -> Result<Self> {
        if probs.shape() != logits.shape() || probs.shape() != labels.shape() {
            return Err(Error::validation(format!(
                "prediction shapes disagree: probs {:?}, logits {:?}, labels {:?}",
                probs.shape(),
                logits.shape(),
                labels.shape()
            )));
        }
        if probs.rank() != 2 || probs.shape()[1] < 2 {
            return Err(Error::validation("predictions must be [n, classes] with >= 2 classes"));
        }
        check_simplex(&probs, "probs")?;
        check_simplex(&labels, "labels")?;
        Ok(PredictionSet { probs, logits, labels })
    }

    pub fn from_logits(logits: TensorF, labels: TensorF) -> Result<Self> {
        let probs = crate::models::logits_to_probs(&logits);
        PredictionSet::new(probs, logits, labels)
    }

    pub fn n(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn n_classes(&self) -> usize {
        self.probs.shape()[1]
    }

    /// True class indices, available only when every label row is one-hot.
    pub fn hard_true(&self) -> Result<Vec<usize>> {
        let m = self.n_classes();
        let mut out = Vec::with_capacity(self.n());
        for row in self.labels.values().chunks_exact(m) {
            let arg = argmax(row);
            let one_hot = row
                .iter()
                .enumerate()
                .all(|(j, v)| if j == arg { (v - 1.0).abs() < 1e-9 } else { v.abs() < 1e-9 });
            if !one_hot {
                return Err(Error::validation(
                    "metric requires one-hot labels, got soft label rows",
                ));
            }
            out.push(arg);
        }
        Ok(out)
    }
}

fn check_simplex(t: &TensorF, what: &str) -> Result<()> {
    let m = t.shape()[1];
    for (i, row) in t.values().chunks_exact(m).enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL || row.iter().any(|v| *v < -SIMPLEX_TOL) {
            return Err(Error::validation(format!(
                "{what} row {i} off the simplex (sum {sum})"
            )));
        }
    }
    Ok(())
}

/// Lowest index wins ties.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// Top-two values of a row: (max, second).
fn top_two(row: &[f64]) -> (f64, f64) {
    let arg = argmax(row);
    let mut second = f64::NEG_INFINITY;
    for (j, v) in row.iter().enumerate() {
        if j != arg && *v > second {
            second = *v;
        }
    }
    (row[arg], second)
}

/// Aggregate prediction error rescaled to [0, 1], 1 meaning exact
/// agreement of the two proportion matrices.
pub fn ape_score(y_pred: &TensorF, y_true: &TensorF) -> Result<f64> {
    if y_pred.shape() != y_true.shape() || y_pred.rank() != 2 {
        return Err(Error::validation(format!(
            "ape_score shapes disagree: {:?} vs {:?}",
            y_pred.shape(),
            y_true.shape()
        )));
    }
    check_simplex(y_pred, "y_pred")?;
    check_simplex(y_true, "y_true")?;
    let n = y_pred.shape()[0] as f64;
    let l1: f64 = y_pred
        .values()
        .iter()
        .zip(y_true.values())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(1.0 - l1 / (2.0 * n))
}

pub fn accuracy(preds: &PredictionSet) -> Result<f64> {
    let truth = preds.hard_true()?;
    let m = preds.n_classes();
    let correct = preds
        .probs
        .values()
        .chunks_exact(m)
        .zip(&truth)
        .filter(|(row, t)| argmax(row) == **t)
        .count();
    Ok(correct as f64 / preds.n() as f64)
}

/// Negative log likelihood, Brier score, and expected calibration error
/// over equal-width confidence bins.
pub fn calibration_suite(preds: &PredictionSet, n_ece_bins: usize) -> Result<(f64, f64, f64)> {
    if n_ece_bins == 0 {
        return Err(Error::validation("need at least one calibration bin"));
    }
    let truth = preds.hard_true()?;
    let m = preds.n_classes();
    let n = preds.n();
    let mut nll = 0.0;
    let mut brier = 0.0;
    let mut bin_count = vec![0usize; n_ece_bins];
    let mut bin_conf = vec![0.0; n_ece_bins];
    let mut bin_acc = vec![0.0; n_ece_bins];
    for (i, row) in preds.probs.values().chunks_exact(m).enumerate() {
        let t = truth[i];
        nll += -(row[t].max(PROB_FLOOR)).ln();
        brier += row
            .iter()
            .enumerate()
            .map(|(j, p)| {
                let y = if j == t { 1.0 } else { 0.0 };
                (p - y) * (p - y)
            })
            .sum::<f64>();
        let conf = row[argmax(row)];
        let b = ((conf * n_ece_bins as f64) as usize).min(n_ece_bins - 1);
        bin_count[b] += 1;
        bin_conf[b] += conf;
        bin_acc[b] += if argmax(row) == t { 1.0 } else { 0.0 };
    }
    let mut ece = 0.0;
    for b in 0..n_ece_bins {
        if bin_count[b] > 0 {
            let w = bin_count[b] as f64 / n as f64;
            let c = bin_count[b] as f64;
            ece += w * (bin_acc[b] / c - bin_conf[b] / c).abs();
        }
    }
    Ok((nll / n as f64, brier / n as f64, ece))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginSpace {
    Logit,
    Prob,
}

/// Mean and 10th percentile of the per-sample top-two margin, signed
/// negative when the prediction is wrong.
pub fn margins(preds: &PredictionSet, space: MarginSpace) -> Result<(f64, f64)> {
    let truth = preds.hard_true()?;
    let m = preds.n_classes();
    let source = match space {
        MarginSpace::Logit => &preds.logits,
        MarginSpace::Prob => &preds.probs,
    };
    let mut values = Vec::with_capacity(preds.n());
    for (i, row) in source.values().chunks_exact(m).enumerate() {
        let (top, second) = top_two(row);
        let correct = argmax(&preds.probs.values()[i * m..(i + 1) * m]) == truth[i];
        let margin = top - second;
        values.push(if correct { margin } else { -margin });
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok((mean, percentile(&mut values, 0.10)))
}

/// Percentile by linear interpolation between order statistics.
fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = values.len();
    if n == 1 {
        return values[0];
    }
    let h = q * (n - 1) as f64;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 < n {
        values[lo] + frac * (values[lo + 1] - values[lo])
    } else {
        values[n - 1]
    }
}

/// Mean Shannon entropy of the predicted distributions, in nats.
pub fn entropy_mean(preds: &PredictionSet) -> f64 {
    let m = preds.n_classes();
    let total: f64 = preds
        .probs
        .values()
        .chunks_exact(m)
        .map(|row| -row.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>())
        .sum();
    total / preds.n() as f64
}

/// Mean squared l2 norm of dLoss/dInput at the zscored inputs.
pub fn jacobian_norm_mean(model: &ModelBundle, ds: &LabeledDataset) -> Result<f64> {
    if ds.n() == 0 {
        return Err(Error::validation("empty dataset"));
    }
    let x = zscored_inputs(ds);
    let y = labels_tensor(ds);
    let bins = x.shape()[1];
    let m = ds.n_classes();
    let mut total = 0.0;
    let mut row = 0;
    while row < ds.n() {
        let take = (ds.n() - row).min(256);
        let xc = TensorF::new(
            vec![take, bins],
            x.values()[row * bins..(row + take) * bins].to_vec(),
        )?;
        let yc = TensorF::new(vec![take, m], y.values()[row * m..(row + take) * m].to_vec())?;
        let mut fwd =
            model.build_graph(&xc, GraphOpts { input_grad: true, ..Default::default() })?;
        let loss = fwd.graph.cross_entropy_mean(fwd.logits, &yc)?;
        let grads = fwd.graph.backward(loss)?;
        let gi = grads
            .wrt(fwd.input)
            .ok_or_else(|| Error::non_finite("input gradient was not recorded"))?;
        // the loss averages over the chunk, undo that factor per sample
        let scale = (take * take) as f64;
        for r in 0..take {
            total += scale
                * gi[r * bins..(r + 1) * bins].iter().map(|v| v * v).sum::<f64>();
        }
        row += take;
    }
    let mean = total / ds.n() as f64;
    if !mean.is_finite() {
        return Err(Error::non_finite("jacobian norm mean"));
    }
    Ok(mean)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnnReport {
    pub tv_hard: f64,
    pub prob_l2: f64,
    pub conf_absdiff: f64,
    pub margin_absdiff: f64,
}

/// Local smoothness of the predictions over the k-nearest-neighbor
/// graph of the l1-normalized spectra (euclidean distance, undirected
/// deduplicated edges).
pub fn knn_smoothness(preds: &PredictionSet, spectra: &TensorF, k: usize) -> Result<KnnReport> {
    let n = preds.n();
    if spectra.rank() != 2 || spectra.shape()[0] != n {
        return Err(Error::validation(format!(
            "spectra shape {:?} does not match {n} predictions",
            spectra.shape()
        )));
    }
    if k == 0 || n <= k {
        return Err(Error::validation(format!("need more than k = {k} samples, got {n}")));
    }
    let d = spectra.shape()[1];
    let mut x = spectra.values().to_vec();
    for row in x.chunks_exact_mut(d) {
        let norm: f64 = row.iter().map(|v| v.abs()).sum();
        if norm > 0.0 {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }

    // squared distances via the gram matrix
    let mut gram = vec![0.0; n * n];
    unsafe {
        matrixmultiply::dgemm(
            n,
            d,
            n,
            1.0,
            x.as_ptr(),
            d as isize,
            1,
            x.as_ptr(),
            1,
            d as isize,
            0.0,
            gram.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    let mut edges: Vec<(usize, usize)> = Vec::new();
    let mut order: Vec<usize> = Vec::with_capacity(n - 1);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|j| *j != i));
        let dist2 = |j: usize| (gram[i * n + i] + gram[j * n + j] - 2.0 * gram[i * n + j]).max(0.0);
        order.sort_by(|a, b| {
            dist2(*a).partial_cmp(&dist2(*b)).expect("finite distance").then(a.cmp(b))
        });
        for &j in order.iter().take(k) {
            edges.push((i.min(j), i.max(j)));
        }
    }
    edges.sort_unstable();
    edges.dedup();

    let m = preds.n_classes();
    let probs = preds.probs.values();
    let hard: Vec<usize> = probs.chunks_exact(m).map(argmax).collect();
    let conf: Vec<f64> = hard.iter().enumerate().map(|(i, h)| probs[i * m + h]).collect();
    let truth = preds.hard_true()?;
    let margin: Vec<f64> = (0..n)
        .map(|i| {
            let y = truth[i];
            let py = probs[i * m + y].max(PROB_FLOOR).ln();
            let other = (0..m)
                .filter(|c| *c != y)
                .map(|c| probs[i * m + c].max(PROB_FLOOR))
                .fold(f64::NEG_INFINITY, f64::max)
                .ln();
            py - other
        })
        .collect();

    let e = edges.len() as f64;
    let mut report = KnnReport { tv_hard: 0.0, prob_l2: 0.0, conf_absdiff: 0.0, margin_absdiff: 0.0 };
    for (u, v) in edges {
        if hard[u] != hard[v] {
            report.tv_hard += 1.0;
        }
        report.prob_l2 += (0..m)
            .map(|c| {
                let dp = probs[u * m + c] - probs[v * m + c];
                dp * dp
            })
            .sum::<f64>();
        report.conf_absdiff += (conf[u] - conf[v]).abs();
        report.margin_absdiff += (margin[u] - margin[v]).abs();
    }
    report.tv_hard /= e;
    report.prob_l2 /= e;
    report.conf_absdiff /= e;
    report.margin_absdiff /= e;
    Ok(report)
}

/// The twelve diagnostic quantities reported for every evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub acc: f64,
    pub nll: f64,
    pub brier: f64,
    pub ece: f64,
    pub margin_mean: f64,
    pub margin_p10: f64,
    pub entropy_mean: f64,
    pub jacobian_norm_mean: f64,
    pub knn_tv_hard: f64,
    pub knn_prob_l2: f64,
    pub knn_conf_absdiff: f64,
    pub knn_margin_absdiff: f64,
}

/// Runs the full diagnostic suite of a model over a labeled dataset.
pub fn diagnostics(model: &ModelBundle, ds: &LabeledDataset, knn_k: usize) -> Result<DiagnosticsReport> {
    ds.validate()?;
    let x = zscored_inputs(ds);
    let logits = model.predict_logits(&x)?;
    let preds = PredictionSet::from_logits(logits, labels_tensor(ds))?;
    let (nll, brier, ece) = calibration_suite(&preds, DEFAULT_ECE_BINS)?;
    let (margin_mean, margin_p10) = margins(&preds, MarginSpace::Logit)?;
    let bins = ds.spectra.first().map(|s| s.counts.len()).unwrap_or(0);
    let mut raw = Vec::with_capacity(ds.n() * bins);
    for sp in &ds.spectra {
        raw.extend_from_slice(&sp.counts);
    }
    let raw = TensorF::new(vec![ds.n(), bins], raw)?;
    let knn = knn_smoothness(&preds, &raw, knn_k)?;
    Ok(DiagnosticsReport {
        acc: accuracy(&preds)?,
        nll,
        brier,
        ece,
        margin_mean,
        margin_p10,
        entropy_mean: entropy_mean(&preds),
        jacobian_norm_mean: jacobian_norm_mean(model, ds)?,
        knn_tv_hard: knn.tv_hard,
        knn_prob_l2: knn.prob_l2,
        knn_conf_absdiff: knn.conf_absdiff,
        knn_margin_absdiff: knn.margin_absdiff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build, ArchSpec};
    use crate::rng::substream;
    use crate::spectra::types::{DomainTag, EnergyGrid, Spectrum, SplitTag};
    use rand::Rng;

    fn t2(rows: &[&[f64]]) -> TensorF {
        let cols = rows[0].len();
        TensorF::new(vec![rows.len(), cols], rows.concat()).unwrap()
    }

    fn preds(probs: &[&[f64]], labels: &[&[f64]]) -> PredictionSet {
        let p = t2(probs);
        let logits = TensorF::new(
            p.shape().to_vec(),
            p.values().iter().map(|v| v.max(PROB_FLOOR).ln()).collect(),
        )
        .unwrap();
        PredictionSet::new(p, logits, t2(labels)).unwrap()
    }

    #[test]
    fn ape_matches_hand_values() {
        let same = t2(&[&[0.2, 0.8], &[1.0, 0.0]]);
        assert_eq!(ape_score(&same, &same).unwrap(), 1.0);
        let a = t2(&[&[1.0, 0.0]]);
        let b = t2(&[&[0.0, 1.0]]);
        assert_eq!(ape_score(&a, &b).unwrap(), 0.0);
        let p = t2(&[&[0.7, 0.3]]);
        let t = t2(&[&[1.0, 0.0]]);
        assert!((ape_score(&p, &t).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn ape_is_symmetric_and_bounded() {
        let mut rng = substream(90, "metrics-test", 0);
        for _ in 0..50 {
            let mut rows = Vec::new();
            for _ in 0..4 {
                let raw: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
                let s: f64 = raw.iter().sum();
                rows.push(raw.iter().map(|v| v / s).collect::<Vec<_>>());
            }
            let a = TensorF::new(vec![2, 5], rows[..2].concat()).unwrap();
            let b = TensorF::new(vec![2, 5], rows[2..].concat()).unwrap();
            let ab = ape_score(&a, &b).unwrap();
            let ba = ape_score(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn ape_rejects_off_simplex_rows() {
        let good = t2(&[&[0.5, 0.5]]);
        let bad = t2(&[&[0.6, 0.6]]);
        assert!(ape_score(&bad, &good).is_err());
    }

    #[test]
    fn accuracy_counts_and_breaks_ties_low() {
        let p = preds(
            &[&[0.9, 0.1], &[0.2, 0.8], &[0.8, 0.2], &[0.3, 0.7]],
            &[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]],
        );
        assert_eq!(accuracy(&p).unwrap(), 0.5);
        let tie = preds(&[&[0.5, 0.5]], &[&[1.0, 0.0]]);
        assert_eq!(accuracy(&tie).unwrap(), 1.0);
        let tie_wrong = preds(&[&[0.5, 0.5]], &[&[0.0, 1.0]]);
        assert_eq!(accuracy(&tie_wrong).unwrap(), 0.0);
    }

    #[test]
    fn accuracy_rejects_soft_labels() {
        let p = preds(&[&[0.9, 0.1]], &[&[0.7, 0.3]]);
        assert!(accuracy(&p).is_err());
    }

    #[test]
    fn calibration_uniform_two_class() {
        let p = preds(&[&[0.5, 0.5]], &[&[1.0, 0.0]]);
        let (nll, brier, _) = calibration_suite(&p, 15).unwrap();
        assert!((nll - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((brier - 0.5).abs() < 1e-12);
    }

    #[test]
    fn calibration_perfect_predictions() {
        let p = preds(&[&[1.0, 0.0], &[0.0, 1.0]], &[&[1.0, 0.0], &[0.0, 1.0]]);
        let (nll, brier, ece) = calibration_suite(&p, 15).unwrap();
        // nll hits the probability floor exactly
        assert!(nll.abs() < 1e-9);
        assert_eq!(brier, 0.0);
        assert_eq!(ece, 0.0);
    }

    #[test]
    fn calibration_confident_and_wrong_maximizes_ece() {
        let p = preds(&[&[1.0, 0.0], &[1.0, 0.0]], &[&[0.0, 1.0], &[0.0, 1.0]]);
        let (nll, _, ece) = calibration_suite(&p, 15).unwrap();
        assert!((ece - 1.0).abs() < 1e-12);
        assert!((nll - (-PROB_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn ece_matches_hand_binning() {
        // confidences 0.7 (bin 10, correct) and 0.8 (bin 12, wrong)
        let p = preds(
            &[&[0.7, 0.3], &[0.8, 0.2]],
            &[&[1.0, 0.0], &[0.0, 1.0]],
        );
        let (_, _, ece) = calibration_suite(&p, 15).unwrap();
        assert!((ece - (0.5 * 0.3 + 0.5 * 0.8)).abs() < 1e-12);
    }

    #[test]
    fn margin_sign_follows_correctness() {
        let logits = t2(&[&[3.0, 1.0], &[3.0, 1.0]]);
        let labels = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let probs = crate::models::logits_to_probs(&logits);
        let p = PredictionSet::new(probs, logits, labels).unwrap();
        let (mean, p10) = margins(&p, MarginSpace::Logit).unwrap();
        // +2 and -2 cancel in the mean
        assert!(mean.abs() < 1e-12);
        assert!((p10 - (-2.0 + 0.1 * 4.0)).abs() < 1e-12);
    }

    #[test]
    fn prob_margins_stay_bounded() {
        let logits = t2(&[&[30.0, -30.0], &[0.2, 0.1]]);
        let labels = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let probs = crate::models::logits_to_probs(&logits);
        let p = PredictionSet::new(probs, logits, labels).unwrap();
        let (mean, p10) = margins(&p, MarginSpace::Prob).unwrap();
        assert!(mean.abs() <= 1.0 && p10.abs() <= 1.0);
    }

    #[test]
    fn percentile_interpolates_linearly() {
        let mut v = vec![5.0, 1.0, 4.0, 2.0, 3.0];
        assert!((percentile(&mut v, 0.10) - 1.4).abs() < 1e-12);
        assert_eq!(percentile(&mut v, 0.0), 1.0);
        assert_eq!(percentile(&mut v, 1.0), 5.0);
    }

    #[test]
    fn entropy_handles_zeros_and_uniform() {
        let one_hot = preds(&[&[1.0, 0.0, 0.0, 0.0]], &[&[1.0, 0.0, 0.0, 0.0]]);
        assert_eq!(entropy_mean(&one_hot), 0.0);
        let uniform = preds(&[&[0.25; 4]], &[&[1.0, 0.0, 0.0, 0.0]]);
        assert!((entropy_mean(&uniform) - 4.0_f64.ln()).abs() < 1e-12);
        let half = preds(&[&[0.5, 0.5, 0.0, 0.0]], &[&[1.0, 0.0, 0.0, 0.0]]);
        assert!((entropy_mean(&half) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    fn toy_dataset(counts: Vec<Vec<f64>>, labels: Vec<f64>, m: usize) -> LabeledDataset {
        let grid = EnergyGrid { n_bins: counts[0].len(), e_min: 0.0, e_max: 100.0 };
        LabeledDataset {
            spectra: counts
                .into_iter()
                .map(|c| Spectrum { counts: c, live_time: 1.0, grid: grid.clone() })
                .collect(),
            labels,
            classes: (0..m).map(|i| format!("c{i}")).collect(),
            domain_tag: DomainTag::Source,
            split_tag: SplitTag::Test,
        }
    }

    #[test]
    fn jacobian_norm_zero_for_input_blind_model() {
        let spec = ArchSpec::Mlp { n_bins: 4, n_classes: 2, hidden: vec![3], dropout: 0.0 };
        let mut rng = substream(91, "metrics-test", 0);
        let mut model = build(&spec, &mut rng).unwrap();
        for i in 0..model.params.len() {
            model.params.at_mut(i).1.values_mut().fill(0.0);
        }
        let ds = toy_dataset(
            vec![vec![1.0, 2.0, 3.0, 4.0], vec![4.0, 3.0, 2.0, 1.0]],
            vec![1.0, 0.0, 0.0, 1.0],
            2,
        );
        assert_eq!(jacobian_norm_mean(&model, &ds).unwrap(), 0.0);
    }

    #[test]
    fn jacobian_norm_matches_logistic_closed_form() {
        // relu passes (1, -1) zscored input through an identity first
        // layer; logits (a, -a) with a = 0.5 give the logistic gradient
        // (1 - sigma(1))^2 on the first coordinate.
        let spec = ArchSpec::Mlp { n_bins: 2, n_classes: 2, hidden: vec![2], dropout: 0.0 };
        let mut rng = substream(92, "metrics-test", 0);
        let mut model = build(&spec, &mut rng).unwrap();
        model
            .params
            .get_mut("dense1.w")
            .unwrap()
            .values_mut()
            .copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        model.params.get_mut("dense1.b").unwrap().values_mut().fill(0.0);
        model
            .params
            .get_mut("out.w")
            .unwrap()
            .values_mut()
            .copy_from_slice(&[0.5, -0.5, 0.0, 0.0]);
        model.params.get_mut("out.b").unwrap().values_mut().fill(0.0);
        let ds = toy_dataset(vec![vec![10.0, 0.0]], vec![1.0, 0.0], 2);
        let sigma = 1.0 / (1.0 + (-1.0_f64).exp());
        let expected = (1.0 - sigma) * (1.0 - sigma);
        let got = jacobian_norm_mean(&model, &ds).unwrap();
        assert!((got - expected).abs() < 1e-8, "{got} vs {expected}");
    }

    #[test]
    fn jacobian_norm_matches_finite_differences() {
        let spec = ArchSpec::Mlp { n_bins: 6, n_classes: 3, hidden: vec![5], dropout: 0.0 };
        let mut rng = substream(93, "metrics-test", 0);
        let model = build(&spec, &mut rng).unwrap();
        let ds = toy_dataset(
            vec![vec![3.0, 1.0, 4.0, 1.0, 5.0, 9.0], vec![2.0, 7.0, 1.0, 8.0, 2.0, 8.0]],
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0],
            3,
        );
        let got = jacobian_norm_mean(&model, &ds).unwrap();

        // same quantity by central differences on the per-sample loss
        let x = zscored_inputs(&ds);
        let y = labels_tensor(&ds);
        let eps = 1e-5;
        let mut total = 0.0;
        for i in 0..2 {
            let xi = x.values()[i * 6..(i + 1) * 6].to_vec();
            let yi = TensorF::new(vec![1, 3], y.values()[i * 3..(i + 1) * 3].to_vec()).unwrap();
            let loss_at = |v: &[f64]| {
                let xt = TensorF::new(vec![1, 6], v.to_vec()).unwrap();
                let mut fwd = model.build_graph(&xt, GraphOpts::default()).unwrap();
                let l = fwd.graph.cross_entropy_mean(fwd.logits, &yi).unwrap();
                fwd.graph.value(l).item()
            };
            for j in 0..6 {
                let mut up = xi.clone();
                let mut dn = xi.clone();
                up[j] += eps;
                dn[j] -= eps;
                let g = (loss_at(&up) - loss_at(&dn)) / (2.0 * eps);
                total += g * g;
            }
        }
        let fd = total / 2.0;
        assert!((got - fd).abs() / fd.max(1e-12) < 1e-4, "{got} vs {fd}");
    }

    #[test]
    fn knn_hand_oracle_three_points() {
        // nearest graph: 0 -> 1, 1 -> 0, 2 -> 1, deduped {01, 12}
        let spectra = t2(&[&[1.0, 0.0], &[0.9, 0.1], &[0.0, 1.0]]);
        let p = preds(
            &[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0]],
            &[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0]],
        );
        let r = knn_smoothness(&p, &spectra, 1).unwrap();
        assert_eq!(r.tv_hard, 1.0);
        assert!((r.prob_l2 - 2.0).abs() < 1e-12);
        assert_eq!(r.conf_absdiff, 0.0);
        assert!(r.margin_absdiff.abs() < 1e-9);
    }

    #[test]
    fn knn_identical_predictions_are_flat() {
        let spectra = t2(&[&[1.0, 0.0], &[0.8, 0.2], &[0.5, 0.5], &[0.0, 1.0]]);
        let p = preds(
            &[&[0.7, 0.3], &[0.7, 0.3], &[0.7, 0.3], &[0.7, 0.3]],
            &[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]],
        );
        let r = knn_smoothness(&p, &spectra, 2).unwrap();
        assert_eq!(r.tv_hard, 0.0);
        assert_eq!(r.prob_l2, 0.0);
        assert_eq!(r.conf_absdiff, 0.0);
        assert_eq!(r.margin_absdiff, 0.0);
    }

    #[test]
    fn knn_two_separated_clusters_have_no_cross_edges() {
        let spectra = t2(&[
            &[1.0, 0.0, 0.0, 0.0],
            &[0.99, 0.01, 0.0, 0.0],
            &[0.98, 0.02, 0.0, 0.0],
            &[0.0, 0.0, 1.0, 0.0],
            &[0.0, 0.0, 0.99, 0.01],
            &[0.0, 0.0, 0.98, 0.02],
        ]);
        let p = preds(
            &[
                &[1.0, 0.0],
                &[1.0, 0.0],
                &[1.0, 0.0],
                &[0.0, 1.0],
                &[0.0, 1.0],
                &[0.0, 1.0],
            ],
            &[
                &[1.0, 0.0],
                &[1.0, 0.0],
                &[1.0, 0.0],
                &[0.0, 1.0],
                &[0.0, 1.0],
                &[0.0, 1.0],
            ],
        );
        let r = knn_smoothness(&p, &spectra, 2).unwrap();
        assert_eq!(r.tv_hard, 0.0);
    }

    #[test]
    fn knn_is_invariant_to_sample_order() {
        let mut rng = substream(94, "metrics-test", 0);
        let n = 12;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..5).map(|_| rng.random::<f64>() + 0.01).collect())
            .collect();
        let probs: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let a = 0.2 + 0.6 * rng.random::<f64>();
                vec![a, 1.0 - a]
            })
            .collect();
        let labels: Vec<Vec<f64>> = (0..n)
            .map(|i| if i % 2 == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] })
            .collect();
        let build_set = |order: &[usize]| {
            let s = TensorF::new(
                vec![n, 5],
                order.iter().flat_map(|i| rows[*i].clone()).collect(),
            )
            .unwrap();
            let p = TensorF::new(
                vec![n, 2],
                order.iter().flat_map(|i| probs[*i].clone()).collect(),
            )
            .unwrap();
            let logits = TensorF::new(
                vec![n, 2],
                p.values().iter().map(|v| v.ln()).collect(),
            )
            .unwrap();
            let l = TensorF::new(
                vec![n, 2],
                order.iter().flat_map(|i| labels[*i].clone()).collect(),
            )
            .unwrap();
            knn_smoothness(&PredictionSet::new(p, logits, l).unwrap(), &s, 3).unwrap()
        };
        let direct: Vec<usize> = (0..n).collect();
        let mut shuffled = direct.clone();
        shuffled.reverse();
        shuffled.swap(1, 7);
        let a = build_set(&direct);
        let b = build_set(&shuffled);
        assert!((a.tv_hard - b.tv_hard).abs() < 1e-12);
        assert!((a.prob_l2 - b.prob_l2).abs() < 1e-12);
        assert!((a.conf_absdiff - b.conf_absdiff).abs() < 1e-12);
        assert!((a.margin_absdiff - b.margin_absdiff).abs() < 1e-12);
    }

    #[test]
    fn knn_rejects_small_samples() {
        let spectra = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let p = preds(&[&[1.0, 0.0], &[0.0, 1.0]], &[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(knn_smoothness(&p, &spectra, 2).is_err());
    }

    #[test]
    fn report_serializes_with_exact_keys() {
        let r = DiagnosticsReport {
            acc: 0.5,
            nll: 1.0,
            brier: 0.2,
            ece: 0.1,
            margin_mean: 2.0,
            margin_p10: -1.0,
            entropy_mean: 0.3,
            jacobian_norm_mean: 0.4,
            knn_tv_hard: 0.05,
            knn_prob_l2: 0.06,
            knn_conf_absdiff: 0.07,
            knn_margin_absdiff: 0.08,
        };
        let json = serde_json::to_value(&r).unwrap();
        let obj = json.as_object().unwrap();
        let expected = [
            "acc",
            "nll",
            "brier",
            "ece",
            "margin_mean",
            "margin_p10",
            "entropy_mean",
            "jacobian_norm_mean",
            "knn_tv_hard",
            "knn_prob_l2",
            "knn_conf_absdiff",
            "knn_margin_absdiff",
        ];
        assert_eq!(obj.len(), expected.len());
        for key in expected {
            assert!(obj.contains_key(key), "missing {key}");
        }
        let back: DiagnosticsReport = serde_json::from_value(json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn full_diagnostics_run_on_a_small_model() {
        let spec = ArchSpec::Mlp { n_bins: 8, n_classes: 2, hidden: vec![4], dropout: 0.0 };
        let mut rng = substream(95, "metrics-test", 0);
        let model = build(&spec, &mut rng).unwrap();
        let mut counts = Vec::new();
        let mut labels = Vec::new();
        let mut crng = substream(95, "metrics-test-data", 0);
        for i in 0..6 {
            counts.push((0..8).map(|_| (crng.random::<f64>() * 50.0).round()).collect());
            labels.extend(if i % 2 == 0 { [1.0, 0.0] } else { [0.0, 1.0] });
        }
        let ds = toy_dataset(counts, labels, 2);
        let r = diagnostics(&model, &ds, 2).unwrap();
        assert!((0.0..=1.0).contains(&r.acc));
        assert!((0.0..=1.0).contains(&r.ece));
        assert!((0.0..=1.0).contains(&r.knn_tv_hard));
        assert!(r.entropy_mean >= 0.0 && r.entropy_mean <= 2.0_f64.ln() + 1e-12);
        assert!(r.nll > 0.0 && r.brier >= 0.0 && r.jacobian_norm_mean >= 0.0);
    }
}
