//! Report emission: accuracy summaries, paired p-value tables,
//! compact-letter rankings, and score-vs-size curves from a trial
//! records file. Tables print to stdout with p-values rounded to three
//! decimals; the CSVs keep full precision.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::stats::{aggregate_trials, rank_architectures, wilcoxon_signed_rank, Sidedness, TrialSummary};
use crate::training::{read_records, Protocol, TrialRecord};

const RANKING_ALPHA: f64 = 0.01;
const PROTOCOL_ORDER: [Protocol; 3] =
    [Protocol::SourceOnly, Protocol::TargetOnly, Protocol::DomainAdapted];

/// Trial-ordered metric values for one (arch, protocol, size) cell.
#[derive(Debug, Clone)]
struct Cell {
    acc: Vec<f64>,
    nll: Vec<f64>,
    ece: Vec<f64>,
    brier: Vec<f64>,
}

struct Tables {
    archs: Vec<String>,
    sizes: Vec<usize>,
    protocols: Vec<Protocol>,
    cells: BTreeMap<(String, Protocol, usize), Cell>,
    n_test: usize,
    config_hash: String,
    master_seed: u64,
}

fn collect(records: &[TrialRecord]) -> Result<Tables> {
    if records.is_empty() {
        return Err(Error::validation("results file holds no records"));
    }
    let hashes: std::collections::BTreeSet<&str> =
        records.iter().map(|r| r.config_hash.as_str()).collect();
    if hashes.len() > 1 {
        return Err(Error::validation(format!(
            "refusing to mix records from {} different config hashes: {}",
            hashes.len(),
            hashes.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    let mut archs: Vec<String> = records.iter().map(|r| r.arch.clone()).collect();
    archs.sort();
    archs.dedup();
    let mut sizes: Vec<usize> = records.iter().map(|r| r.size).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let protocols: Vec<Protocol> = PROTOCOL_ORDER
        .into_iter()
        .filter(|p| records.iter().any(|r| r.protocol == *p))
        .collect();

    let mut grouped: BTreeMap<(String, Protocol, usize), Vec<&TrialRecord>> = BTreeMap::new();
    for r in records {
        grouped.entry((r.arch.clone(), r.protocol, r.size)).or_default().push(r);
    }
    let mut cells = BTreeMap::new();
    for (key, mut rs) in grouped {
        rs.sort_by_key(|r| r.trial);
        for pair in rs.windows(2) {
            if pair[0].trial == pair[1].trial {
                return Err(Error::validation(format!(
                    "duplicate trial {} for {} {} at size {}",
                    pair[0].trial, key.0, key.1, key.2
                )));
            }
        }
        let cell = Cell {
            acc: rs.iter().map(|r| r.metrics.acc).collect(),
            nll: rs.iter().map(|r| r.metrics.nll).collect(),
            ece: rs.iter().map(|r| r.metrics.ece).collect(),
            brier: rs.iter().map(|r| r.metrics.brier).collect(),
        };
        cells.insert(key, cell);
    }
    Ok(Tables {
        archs,
        sizes,
        protocols,
        cells,
        n_test: records[0].n_test,
        config_hash: records[0].config_hash.clone(),
        master_seed: records[0].master_seed,
    })
}

fn provenance(t: &Tables) -> String {
    format!("# config_hash {}\n# master_seed {}\n", t.config_hash, t.master_seed)
}

fn summary_csv(t: &Tables) -> Result<String> {
    let mut out = provenance(t);
    out.push_str(
        "arch,protocol,size,n_trials,n_test,acc_mean,acc_uncertainty,acc_std,\
         nll_mean,nll_std,ece_mean,ece_std,brier_mean,brier_std\n",
    );
    for ((arch, protocol, size), cell) in &t.cells {
        let acc = aggregate_trials(&cell.acc, Some(t.n_test))?;
        let nll = aggregate_trials(&cell.nll, None)?;
        let ece = aggregate_trials(&cell.ece, None)?;
        let brier = aggregate_trials(&cell.brier, None)?;
        writeln!(
            out,
            "{arch},{protocol},{size},{},{},{},{},{},{},{},{},{},{},{}",
            cell.acc.len(),
            t.n_test,
            acc.mean,
            acc.uncertainty,
            acc.sample_std,
            nll.mean,
            nll.sample_std,
            ece.mean,
            ece.sample_std,
            brier.mean,
            brier.sample_std
        )
        .expect("string write");
    }
    Ok(out)
}

fn summary_txt(t: &Tables) -> Result<String> {
    let mut out = provenance(t);
    for &protocol in &t.protocols {
        writeln!(out, "\ntest accuracy (mean \u{b1} uncertainty), protocol {protocol}")
            .expect("string write");
        write!(out, "{:>8}", "size").expect("string write");
        for arch in &t.archs {
            write!(out, "{arch:>18}").expect("string write");
        }
        out.push('\n');
        for &size in &t.sizes {
            write!(out, "{size:>8}").expect("string write");
            for arch in &t.archs {
                let cell = match t.cells.get(&(arch.clone(), protocol, size)) {
                    Some(c) => {
                        let s: TrialSummary = aggregate_trials(&c.acc, Some(t.n_test))?;
                        format!("{:.3} \u{b1} {:.3}", s.mean, s.uncertainty)
                    }
                    None => "-".to_string(),
                };
                write!(out, "{cell:>18}").expect("string write");
            }
            out.push('\n');
        }
    }
    Ok(out)
}

struct PTable {
    baseline: Protocol,
    /// (arch, size) -> exact one-sided p for domain_adapted > baseline.
    p: BTreeMap<(String, usize), f64>,
}

fn p_tables(t: &Tables) -> Result<Vec<PTable>> {
    let mut out = Vec::new();
    for baseline in [Protocol::TargetOnly, Protocol::SourceOnly] {
        if !t.protocols.contains(&baseline) || !t.protocols.contains(&Protocol::DomainAdapted) {
            continue;
        }
        let mut cells: Vec<(String, usize)> = Vec::new();
        for arch in &t.archs {
            for &size in &t.sizes {
                cells.push((arch.clone(), size));
            }
        }
        let entries: Vec<((String, usize), Option<Result<f64>>)> = cells
            .into_par_iter()
            .map(|key| {
                let da = t.cells.get(&(key.0.clone(), Protocol::DomainAdapted, key.1));
                let base = t.cells.get(&(key.0.clone(), baseline, key.1));
                let p = match (da, base) {
                    (Some(da), Some(base)) if da.acc.len() == base.acc.len() => {
                        Some(
                            wilcoxon_signed_rank(&da.acc, &base.acc, Sidedness::OneSidedGreater)
                                .map(|r| r.p_value),
                        )
                    }
                    _ => None,
                };
                (key, p)
            })
            .collect();
        let mut p = BTreeMap::new();
        for (key, value) in entries {
            if let Some(value) = value {
                p.insert(key, value?);
            }
        }
        out.push(PTable { baseline, p });
    }
    Ok(out)
}

fn p_csv(t: &Tables, table: &PTable) -> String {
    let mut out = provenance(t);
    out.push_str("arch,size,p_one_sided\n");
    for ((arch, size), p) in &table.p {
        writeln!(out, "{arch},{size},{p}").expect("string write");
    }
    out
}

fn p_txt(t: &Tables, table: &PTable) -> String {
    let mut out = provenance(t);
    writeln!(out, "\none-sided p, domain_adapted > {}", table.baseline).expect("string write");
    write!(out, "{:>8}", "size").expect("string write");
    for arch in &t.archs {
        write!(out, "{arch:>12}").expect("string write");
    }
    out.push('\n');
    for &size in &t.sizes {
        write!(out, "{size:>8}").expect("string write");
        for arch in &t.archs {
            let cell = match table.p.get(&(arch.clone(), size)) {
                Some(p) => format!("{p:.3}"),
                None => "-".to_string(),
            };
            write!(out, "{cell:>12}").expect("string write");
        }
        out.push('\n');
    }
    out
}

fn ranking_txt(t: &Tables) -> Result<String> {
    let mut out = provenance(t);
    for &protocol in &t.protocols {
        for &size in &t.sizes {
            let lists: Vec<(String, Vec<f64>)> = t
                .archs
                .iter()
                .filter_map(|arch| {
                    t.cells
                        .get(&(arch.clone(), protocol, size))
                        .map(|c| (arch.clone(), c.acc.clone()))
                })
                .collect();
            if lists.is_empty() {
                continue;
            }
            let len = lists[0].1.len();
            if lists.iter().any(|(_, v)| v.len() != len) {
                continue;
            }
            writeln!(out, "\nranking by accuracy, protocol {protocol}, size {size}")
                .expect("string write");
            for rank in rank_architectures(&lists, RANKING_ALPHA)? {
                writeln!(out, "{:<4} {:<12} {:.3}", rank.letters, rank.name, rank.mean)
                    .expect("string write");
            }
        }
    }
    Ok(out)
}

const PROTOCOL_COLORS: [(Protocol, &str); 3] = [
    (Protocol::SourceOnly, "#7f7f7f"),
    (Protocol::TargetOnly, "#1f77b4"),
    (Protocol::DomainAdapted, "#d62728"),
];

/// One panel per architecture: accuracy against target subset size,
/// one line per protocol, whiskers at mean plus/minus uncertainty.
fn curves_svg(t: &Tables) -> Result<String> {
    let (pw, ph, margin, header) = (300.0, 260.0, 46.0, 40.0);
    let width = margin + pw * t.archs.len() as f64 + 20.0;
    let height = header + ph + 50.0;
    let mut svg = String::new();
    writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         font-family=\"sans-serif\" font-size=\"11\">"
    )
    .expect("string write");
    writeln!(svg, "<desc>config_hash {} master_seed {}</desc>", t.config_hash, t.master_seed)
        .expect("string write");
    writeln!(svg, "<text x=\"{margin:.0}\" y=\"16\" font-size=\"13\">test accuracy vs target subset size</text>")
        .expect("string write");
    for (i, (protocol, color)) in PROTOCOL_COLORS.iter().enumerate() {
        if !t.protocols.contains(protocol) {
            continue;
        }
        let x = margin + 190.0 * i as f64 + 160.0;
        writeln!(svg, "<rect x=\"{x:.0}\" y=\"8\" width=\"12\" height=\"12\" fill=\"{color}\"/>")
            .expect("string write");
        writeln!(svg, "<text x=\"{:.0}\" y=\"18\">{protocol}</text>", x + 16.0).expect("string write");
    }
    let xpos = |panel: usize, idx: usize| {
        margin
            + panel as f64 * pw
            + 30.0
            + if t.sizes.len() > 1 {
                idx as f64 / (t.sizes.len() - 1) as f64 * (pw - 70.0)
            } else {
                (pw - 70.0) / 2.0
            }
    };
    let ypos = |acc: f64| header + (1.0 - acc.clamp(0.0, 1.0)) * ph;
    for (panel, arch) in t.archs.iter().enumerate() {
        let x0 = margin + panel as f64 * pw + 30.0;
        writeln!(svg, "<text x=\"{x0:.1}\" y=\"{:.1}\">{arch}</text>", header - 6.0)
            .expect("string write");
        for frac in [0.0_f64, 0.5, 1.0] {
            let y = ypos(frac);
            writeln!(
                svg,
                "<line x1=\"{x0:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>",
                x0 + pw - 70.0
            )
            .expect("string write");
            writeln!(svg, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{frac:.1}</text>", x0 - 4.0, y + 4.0)
                .expect("string write");
        }
        for (idx, &size) in t.sizes.iter().enumerate() {
            writeln!(
                svg,
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{size}</text>",
                xpos(panel, idx),
                header + ph + 16.0
            )
            .expect("string write");
        }
        for (protocol, color) in PROTOCOL_COLORS {
            if !t.protocols.contains(&protocol) {
                continue;
            }
            let mut points = String::new();
            for (idx, &size) in t.sizes.iter().enumerate() {
                let Some(cell) = t.cells.get(&(arch.clone(), protocol, size)) else { continue };
                let s = aggregate_trials(&cell.acc, Some(t.n_test))?;
                let (x, y) = (xpos(panel, idx), ypos(s.mean));
                write!(points, "{x:.1},{y:.1} ").expect("string write");
                writeln!(
                    svg,
                    "<line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"{color}\"/>",
                    ypos(s.mean + s.uncertainty),
                    ypos(s.mean - s.uncertainty)
                )
                .expect("string write");
                writeln!(svg, "<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"2.5\" fill=\"{color}\"/>")
                    .expect("string write");
            }
            if !points.is_empty() {
                writeln!(
                    svg,
                    "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
                    points.trim_end()
                )
                .expect("string write");
            }
        }
        writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">target spectra</text>",
            x0 + (pw - 70.0) / 2.0,
            header + ph + 34.0
        )
        .expect("string write");
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub(super) fn cmd_report(results: &Path, out: Option<PathBuf>) -> Result<()> {
    let records = read_records(results)?;
    let tables = collect(&records)?;
    let dir = out
        .or_else(|| results.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;

    let summary_text = summary_txt(&tables)?;
    print!("{summary_text}");
    std::fs::write(dir.join("summary.txt"), &summary_text)?;
    std::fs::write(dir.join("summary.csv"), summary_csv(&tables)?)?;

    for table in p_tables(&tables)? {
        let text = p_txt(&tables, &table);
        print!("{text}");
        let stem = format!("p_domain_adapted_vs_{}", table.baseline);
        std::fs::write(dir.join(format!("{stem}.txt")), &text)?;
        std::fs::write(dir.join(format!("{stem}.csv")), p_csv(&tables, &table))?;
    }

    let ranking_text = ranking_txt(&tables)?;
    print!("{ranking_text}");
    std::fs::write(dir.join("ranking.txt"), &ranking_text)?;

    std::fs::write(dir.join("curves_acc.svg"), curves_svg(&tables)?)?;
    println!("\nwrote report files to {}", dir.display());
    Ok(())
}
