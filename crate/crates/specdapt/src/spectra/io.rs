//! SPDA1 dataset container: little-endian binary bulk arrays plus a JSON
//! sidecar (`<file>.json`) carrying class names and provenance.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectra::types::{DomainTag, EnergyGrid, LabeledDataset, Spectrum, SplitTag};

const MAGIC: &[u8; 5] = b"SPDA1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub classes: Vec<String>,
    pub domain_tag: DomainTag,
    pub split_tag: SplitTag,
    pub master_seed: u64,
    pub scenario_hash: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".json");
    path.with_file_name(name)
}

pub fn save_dataset(
    ds: &LabeledDataset,
    path: &Path,
    master_seed: u64,
    scenario_hash: &str,
) -> Result<()> {
    ds.validate()?;
    let grid = ds
        .spectra
        .first()
        .map(|s| s.grid)
        .ok_or_else(|| Error::validation("refusing to save an empty dataset"))?;
    let (n, n_bins, m) = (ds.n(), grid.n_bins, ds.n_classes());

    let mut buf: Vec<u8> =
        Vec::with_capacity(5 + 4 * 4 + 16 + 4 * (n * n_bins + n * m + n));
    buf.extend_from_slice(MAGIC);
    for v in [VERSION, n as u32, n_bins as u32, m as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&grid.e_min.to_le_bytes());
    buf.extend_from_slice(&grid.e_max.to_le_bytes());
    for sp in &ds.spectra {
        for &c in &sp.counts {
            buf.extend_from_slice(&(c as f32).to_le_bytes());
        }
    }
    for &l in &ds.labels {
        buf.extend_from_slice(&(l as f32).to_le_bytes());
    }
    for sp in &ds.spectra {
        buf.extend_from_slice(&(sp.live_time as f32).to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)?;

    let sidecar = DatasetSidecar {
        classes: ds.classes.clone(),
        domain_tag: ds.domain_tag,
        split_tag: ds.split_tag,
        master_seed,
        scenario_hash: scenario_hash.to_string(),
    };
    let json = serde_json::to_string_pretty(&sidecar)?;
    std::fs::write(sidecar_path(path), json)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<(LabeledDataset, DatasetSidecar)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let fail = |msg: &str| Error::corrupt(format!("{}: {msg}", path.display()));
    if bytes.len() < 5 + 16 + 16 || &bytes[..5] != MAGIC {
        return Err(fail("bad magic, not an SPDA1 dataset"));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(5);
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let n = u32_at(9) as usize;
    let n_bins = u32_at(13) as usize;
    let m = u32_at(17) as usize;
    let e_min = f64::from_le_bytes(bytes[21..29].try_into().unwrap());
    let e_max = f64::from_le_bytes(bytes[29..37].try_into().unwrap());
    let expected = 37 + 4 * (n * n_bins + n * m + n);
    if bytes.len() != expected {
        return Err(fail(&format!("size {} != expected {expected}", bytes.len())));
    }
    let grid = EnergyGrid { n_bins, e_min, e_max };
    grid.validate()?;

    let f32_at =
        |off: usize| f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64;
    let counts_base = 37;
    let labels_base = counts_base + 4 * n * n_bins;
    let lt_base = labels_base + 4 * n * m;

    let sidecar: DatasetSidecar =
        serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    if sidecar.classes.len() != m {
        return Err(fail(&format!(
            "sidecar lists {} classes, header says {m}",
            sidecar.classes.len()
        )));
    }

    let mut spectra = Vec::with_capacity(n);
    for i in 0..n {
        let counts: Vec<f64> =
            (0..n_bins).map(|j| f32_at(counts_base + 4 * (i * n_bins + j))).collect();
        let live_time = f32_at(lt_base + 4 * i);
        spectra.push(Spectrum { counts, live_time, grid });
    }
    // labels were rounded to f32; renormalize each row back onto the simplex
    let mut labels = Vec::with_capacity(n * m);
    for i in 0..n {
        let row: Vec<f64> = (0..m).map(|j| f32_at(labels_base + 4 * (i * m + j))).collect();
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-4 || row.iter().any(|&v| v < 0.0) {
            return Err(fail(&format!("label row {i} far off the simplex (sum {sum})")));
        }
        labels.extend(row.into_iter().map(|v| v / sum));
    }

    let ds = LabeledDataset {
        spectra,
        labels,
        classes: sidecar.classes.clone(),
        domain_tag: sidecar.domain_tag,
        split_tag: sidecar.split_tag,
    };
    ds.validate()?;
    Ok((ds, sidecar))
}
