//! Exact Wilcoxon signed-rank testing, paired-trial aggregation, and
//! compact-letter architecture ranking.
//!
//! The exact null distribution is enumerated over the realized rank
//! multiset (tie-aware) via a subset-sum count, so ranks of the form
//! k/2 from average-rank tie handling stay exact. Above 25 effective
//! pairs a normal approximation with continuity and tie corrections
//! takes over.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

pub const EXACT_LIMIT: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sidedness {
    OneSidedGreater,
    TwoSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n_effective: usize,
    pub sidedness: Sidedness,
    pub exact: bool,
    /// Set when every difference was zero; the test carries no signal.
    pub degenerate: bool,
}

/// One-sided tests H1: a > b. Differences a - b are taken pairwise,
/// zeros are dropped, |d| is ranked with average ranks on ties, and W
/// is the sum of the ranks of the positive differences.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64], sidedness: Sidedness) -> Result<TestResult> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::validation(format!(
            "paired samples need equal nonzero lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::non_finite("non-finite difference in paired sample"));
    }
    if diffs.is_empty() {
        return Ok(TestResult {
            statistic: 0.0,
            p_value: 1.0,
            n_effective: 0,
            sidedness,
            exact: true,
            degenerate: true,
        });
    }
    let n = diffs.len();

    // average ranks, kept exact by doubling
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|i, j| diffs[*i].abs().partial_cmp(&diffs[*j].abs()).expect("finite"));
    let mut doubled_rank = vec![0u64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        // ranks i+1 ..= j+1 average to (i + j + 2) / 2
        let dr = (i + j + 2) as u64;
        for &idx in &order[i..=j] {
            doubled_rank[idx] = dr;
        }
        i = j + 1;
    }
    let w_doubled: u64 = (0..n).filter(|i| diffs[*i] > 0.0).map(|i| doubled_rank[i]).sum();
    let statistic = w_doubled as f64 / 2.0;

    let (p_value, exact) = if n <= EXACT_LIMIT {
        (exact_p(&doubled_rank, w_doubled, sidedness), true)
    } else {
        (approx_p(&doubled_rank, statistic, sidedness), false)
    };
    Ok(TestResult { statistic, p_value, n_effective: n, sidedness, exact, degenerate: false })
}

/// Counts sign assignments by subset-sum over the doubled ranks. With
/// n <= 25 the counts stay below 2^25 and are exact in f64.
fn exact_p(doubled_rank: &[u64], w_doubled: u64, sidedness: Sidedness) -> f64 {
    let total: u64 = doubled_rank.iter().sum();
    let mut ways = vec![0.0_f64; total as usize + 1];
    ways[0] = 1.0;
    let mut reach = 0usize;
    for &r in doubled_rank {
        let r = r as usize;
        reach += r;
        for s in (r..=reach).rev() {
            ways[s] += ways[s - r];
        }
    }
    let denom = (doubled_rank.len() as f64).exp2();
    let upper: f64 = ways[w_doubled as usize..].iter().sum::<f64>() / denom;
    match sidedness {
        Sidedness::OneSidedGreater => upper,
        Sidedness::TwoSided => {
            let lower: f64 = ways[..=w_doubled as usize].iter().sum::<f64>() / denom;
            (2.0 * upper.min(lower)).min(1.0)
        }
    }
}

fn approx_p(doubled_rank: &[u64], w: f64, sidedness: Sidedness) -> f64 {
    let n = doubled_rank.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    // tie correction over groups of equal doubled rank
    let mut sorted = doubled_rank.to_vec();
    sorted.sort_unstable();
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    let sd = var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    match sidedness {
        Sidedness::OneSidedGreater => 1.0 - normal.cdf((w - 0.5 - mean) / sd),
        Sidedness::TwoSided => {
            let z = ((w - mean).abs() - 0.5).max(0.0) / sd;
            (2.0 * (1.0 - normal.cdf(z))).min(1.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub mean: f64,
    pub sample_std: f64,
    /// sqrt(s^2 + test-set variance); equals the sample std for
    /// metrics without a finite-test-set term.
    pub uncertainty: f64,
    pub n: usize,
}

/// Mean and uncertainty across paired trials. For accuracy-type
/// metrics pass the test-set size so the binomial sampling term
/// p(1-p)/n_test is added to the trial variance.
pub fn aggregate_trials(values: &[f64], n_test: Option<usize>) -> Result<TrialSummary> {
    if values.len() < 2 {
        return Err(Error::degenerate(format!(
            "need at least 2 trial values to aggregate, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    let sample_std = (ss / (n - 1.0)).sqrt();
    let test_var = match n_test {
        Some(nt) if nt > 0 => {
            let p = mean.clamp(0.0, 1.0);
            p * (1.0 - p) / nt as f64
        }
        _ => 0.0,
    };
    Ok(TrialSummary {
        mean,
        sample_std,
        uncertainty: (sample_std * sample_std + test_var).sqrt(),
        n: values.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchRank {
    pub name: String,
    pub mean: f64,
    /// Compact letter display: ranks sharing a letter are statistically
    /// indistinguishable at the chosen level.
    pub letters: String,
}

/// Greedy clique cover over the indistinguishability graph from
/// pairwise two-sided tests, walking architectures best-first.
pub fn rank_architectures(lists: &[(String, Vec<f64>)], alpha: f64) -> Result<Vec<ArchRank>> {
    if lists.is_empty() {
        return Err(Error::validation("no architectures to rank"));
    }
    let len = lists[0].1.len();
    if len == 0 || lists.iter().any(|(_, v)| v.len() != len) {
        return Err(Error::validation("paired metric lists must share a nonzero length"));
    }
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::validation(format!("alpha {alpha} outside (0,1)")));
    }
    let k = lists.len();
    let means: Vec<f64> = lists.iter().map(|(_, v)| v.iter().sum::<f64>() / len as f64).collect();
    let mut same = vec![vec![true; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let t = wilcoxon_signed_rank(&lists[i].1, &lists[j].1, Sidedness::TwoSided)?;
            let indistinct = t.degenerate || t.p_value > alpha;
            same[i][j] = indistinct;
            same[j][i] = indistinct;
        }
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|a, b| means[*b].partial_cmp(&means[*a]).expect("finite mean").then(a.cmp(b)));

    let mut cliques: Vec<Vec<usize>> = Vec::new();
    let mut covered = vec![false; k];
    for (pos, &i) in order.iter().enumerate() {
        if covered[i] {
            continue;
        }
        let mut clique = vec![i];
        for &j in &order[pos + 1..] {
            if clique.iter().all(|&c| same[c][j]) {
                clique.push(j);
            }
        }
        for &c in &clique {
            covered[c] = true;
        }
        cliques.push(clique);
    }

    let mut letters = vec![String::new(); k];
    for (c, clique) in cliques.iter().enumerate() {
        let letter = char::from(b'A' + c as u8);
        for &i in clique {
            letters[i].push(letter);
        }
    }
    Ok(order
        .into_iter()
        .map(|i| ArchRank { name: lists[i].0.clone(), mean: means[i], letters: letters[i].clone() })
        .collect())
}
