//! Text exports: embedding dumps, a tidy plot table collected from run
//! directories, and a standalone distribution report for a dump file.

use std::path::Path;

use serde::Serialize;

use crate::diagnostics::{hypercube_occupancy, knn_entropy, ks_per_dimension};
use crate::error::{Result, UniregError};
use crate::harness::manifest::load_manifest;
use crate::harness::metrics::MetricsTable;
use crate::tensor::Tensor;

pub const EMBEDDING_DUMP_VERSION: u32 = 1;

/// Write a `[n, d]` embedding batch as plain text: a `n d version` header
/// line, then one whitespace-separated row per line.
pub fn write_embedding_dump(path: &Path, z: &Tensor) -> Result<()> {
    let shape = z.shape();
    if shape.len() != 2 {
        return Err(UniregError::Contract(format!(
            "embedding dump needs a [n, d] tensor, got shape {shape:?}"
        )));
    }
    let (n, d) = (shape[0], shape[1]);
    let mut text = format!("{n} {d} {EMBEDDING_DUMP_VERSION}\n");
    z.with_values(|values| {
        for row in values.chunks(d) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            text.push_str(&cells.join(" "));
            text.push('\n');
        }
    });
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_embedding_dump(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| UniregError::Format("embedding dump is empty".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 3 {
        return Err(UniregError::Format(format!(
            "embedding dump header must be `n d version`, got {header:?}"
        )));
    }
    let parse_dim = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| UniregError::Format(format!("bad dump header field {s:?}")))
    };
    let (n, d) = (parse_dim(fields[0])?, parse_dim(fields[1])?);
    let version = parse_dim(fields[2])?;
    if version != EMBEDDING_DUMP_VERSION as usize {
        return Err(UniregError::Format(format!(
            "unsupported embedding dump version {version}"
        )));
    }
    let mut values = Vec::with_capacity(n * d);
    for line in lines {
        for field in line.split_whitespace() {
            let v: f64 = field
                .parse()
                .map_err(|_| UniregError::Format(format!("bad dump value {field:?}")))?;
            values.push(v);
        }
    }
    if values.len() != n * d {
        return Err(UniregError::Format(format!(
            "embedding dump promised {n}x{d} values, found {}",
            values.len()
        )));
    }
    Tensor::new(vec![n, d], values)
}

/// Run directories under `root`: the root itself when it holds a
/// manifest, otherwise its immediate subdirectories that do (a sweep
/// output), sorted by name.
pub fn collect_run_dirs(root: &Path) -> Result<Vec<std::path::PathBuf>> {
    if root.join("manifest.json").is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<std::path::PathBuf> = std::fs::read_dir(root)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(UniregError::Format(format!(
            "no run directories (with manifest.json) under {}",
            root.display()
        )));
    }
    Ok(dirs)
}

/// Collect the metric histories of several run directories into one tidy
/// tab-separated table (`step  metric  value  run_id`), ready for plotting.
pub fn export_plot_data(run_dirs: &[&Path], out_path: &Path) -> Result<()> {
    let mut rows: Vec<(String, usize, &'static str, f64)> = Vec::new();
    for dir in run_dirs {
        let manifest = load_manifest(&dir.join("manifest.json"))?;
        let table =
            MetricsTable::parse_csv(&std::fs::read_to_string(dir.join("metrics.csv"))?)?;
        for row in table.rows() {
            for (metric, value) in row.filled() {
                rows.push((manifest.run_id.clone(), row.step, metric, value));
            }
        }
    }
    rows.sort_by(|a, b| (&a.0, a.1, a.2).cmp(&(&b.0, b.1, b.2)));
    let mut text = String::from("step\tmetric\tvalue\trun_id\n");
    for (run_id, step, metric, value) in rows {
        text.push_str(&format!("{step}\t{metric}\t{value}\t{run_id}\n"));
    }
    std::fs::write(out_path, text)?;
    Ok(())
}

/// Distribution report for an embedding dump, measured against the unit
/// cube `[-1, 1]^d` with 4 bins per axis and 1-NN entropy.
#[derive(Debug, Clone, Serialize)]
pub struct DiagnoseReport {
    pub n: usize,
    pub d: usize,
    pub max_ks: f64,
    pub ks_per_dimension: Vec<f64>,
    pub occupancy: f64,
    pub occupancy_joint: bool,
    pub out_of_cube: f64,
    pub entropy: f64,
}

pub fn diagnose_dump(path: &Path) -> Result<DiagnoseReport> {
    let z = read_embedding_dump(path)?;
    let shape = z.shape();
    let ks = ks_per_dimension(&z, -1.0, 1.0)?;
    let max_ks = ks.iter().cloned().fold(0.0f64, f64::max);
    let occupancy = hypercube_occupancy(&z, -1.0, 1.0, 4)?;
    let entropy = knn_entropy(&z, 1)?;
    Ok(DiagnoseReport {
        n: shape[0],
        d: shape[1],
        max_ks,
        ks_per_dimension: ks,
        occupancy: occupancy.fraction,
        occupancy_joint: occupancy.joint,
        out_of_cube: occupancy.out_of_cube,
        entropy,
    })
}
