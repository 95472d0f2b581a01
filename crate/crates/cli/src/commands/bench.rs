//! `benchmark`: every method on every test dataset, with repeated timing.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use flowtie::container::load_dataset;
use flowtie::microscope::FourDDataset;
use flowtie::nn::{load_model, FlowModel};
use flowtie::recon::Method;

use super::reconstruct::{run_method, MethodParams};
use crate::corpus::Corpus;
use crate::error::{CliError, Result};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct BenchOptions {
    /// Corpus whose test datasets are benchmarked.
    pub corpus: Option<PathBuf>,
    /// Extra datasets, labelled by directory name.
    pub datasets: Vec<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
    pub repeats: usize,
    pub methods: Vec<Method>,
    pub params: MethodParams,
}

impl BenchOptions {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        BenchOptions {
            corpus: None,
            datasets: Vec::new(),
            checkpoint: None,
            out: out.into(),
            repeats: 3,
            methods: Method::ALL.to_vec(),
            params: MethodParams::default(),
        }
    }
}

/// One (dataset, method) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub label: String,
    pub material: String,
    pub cells: usize,
    pub thickness: f64,
    pub method: Method,
    pub present: bool,
    pub mse: Option<f64>,
    pub time_mean: Option<f64>,
    pub time_std: Option<f64>,
    pub repeats: usize,
    /// Why the cell is absent.
    pub absent_reason: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub os: String,
    pub arch: String,
    pub cpus: usize,
    pub version: String,
    pub optimized: bool,
}

impl Environment {
    pub fn current() -> Self {
        Environment {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            version: env!("CARGO_PKG_VERSION").into(),
            optimized: !cfg!(debug_assertions),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub environment: Environment,
    pub repeats: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, label: &str, method: Method) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.label == label && r.method == method)
    }
}

/// Sample mean and standard deviation (`n - 1` denominator, 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

struct Target {
    label: String,
    material: String,
    cells: usize,
    path: PathBuf,
}

fn targets(opts: &BenchOptions) -> Result<Vec<Target>> {
    let mut out = Vec::new();
    if let Some(root) = &opts.corpus {
        let corpus = Corpus::load(root)?;
        for t in &corpus.tests {
            out.push(Target {
                label: t.label.clone(),
                material: t.material.clone(),
                cells: t.cells,
                path: corpus.test_path(root, t),
            });
        }
    }
    for path in &opts.datasets {
        let label = path
            .file_name()
            .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        out.push(Target {
            label,
            material: String::new(),
            cells: 0,
            path: path.clone(),
        });
    }
    if out.is_empty() {
        return Err(CliError::Usage("nothing to benchmark: pass --corpus or --dataset".into()));
    }
    Ok(out)
}

fn bench_cell(
    target: &Target,
    ds: &FourDDataset,
    method: Method,
    model: std::result::Result<&FlowModel, &str>,
    opts: &BenchOptions,
) -> BenchRow {
    let mut row = BenchRow {
        label: target.label.clone(),
        material: if target.material.is_empty() { ds.structure.clone() } else { target.material.clone() },
        cells: target.cells,
        thickness: ds.thickness,
        method,
        present: false,
        mse: None,
        time_mean: None,
        time_std: None,
        repeats: 0,
        absent_reason: None,
    };
    let model = match (method, model) {
        (Method::FlowTie, Err(reason)) => {
            row.absent_reason = Some(reason.to_string());
            return row;
        }
        (_, m) => m.ok(),
    };
    let mut times = Vec::with_capacity(opts.repeats);
    let mut mse = f64::NAN;
    for _ in 0..opts.repeats {
        match run_method(ds, method, model, &opts.params) {
            Ok(r) => {
                times.push(r.wall_time);
                mse = r.mse;
            }
            Err(e) => {
                row.absent_reason = Some(format!("{}: {e}", e.code()));
                return row;
            }
        }
    }
    let (mean, std) = mean_std(&times);
    row.present = true;
    row.mse = Some(mse);
    row.time_mean = Some(mean);
    row.time_std = Some(std);
    row.repeats = times.len();
    row
}

/// Runs the benchmark; unavailable cells are reported absent rather than
/// aborting the run.
pub fn benchmark(opts: &BenchOptions) -> Result<BenchReport> {
    if opts.repeats < 3 {
        return Err(CliError::Usage(format!("timing needs at least 3 repeats, got {}", opts.repeats)));
    }
    let targets = targets(opts)?;
    let model = match &opts.checkpoint {
        None => Err("no checkpoint given".to_string()),
        Some(dir) => load_model(dir).map_err(|e| format!("checkpoint {}: {e}", dir.display())),
    };
    let mut rows = Vec::new();
    for target in &targets {
        let ds = load_dataset(&target.path)?;
        for &method in &opts.methods {
            let m = model.as_ref().map_err(String::as_str);
            rows.push(bench_cell(target, &ds, method, m, opts));
        }
    }
    let report = BenchReport {
        environment: Environment::current(),
        repeats: opts.repeats,
        rows,
    };
    write_report(&report, &opts.out)?;
    Ok(report)
}

pub fn write_report(report: &BenchReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    let path = dir.join(REPORT_JSON);
    fs::write(&path, json).map_err(|e| CliError::io(&path, e))?;
    let path = dir.join(REPORT_TEXT);
    fs::write(&path, render_table(report)).map_err(|e| CliError::io(&path, e))
}

const COLUMNS: [&str; 10] = [
    "label", "material", "cells", "thickness", "method", "present", "mse", "time_mean", "time_std", "repeats",
];

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| v.to_string())
}

/// Column-aligned text table; floats use the shortest representation that
/// parses back to the same value.
pub fn render_table(report: &BenchReport) -> String {
    let cells: Vec<[String; 10]> = report
        .rows
        .iter()
        .map(|r| {
            [
                r.label.clone(),
                r.material.clone(),
                r.cells.to_string(),
                r.thickness.to_string(),
                r.method.to_string(),
                r.present.to_string(),
                opt(r.mse),
                opt(r.time_mean),
                opt(r.time_std),
                r.repeats.to_string(),
            ]
        })
        .collect();
    let mut widths = COLUMNS.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let e = &report.environment;
    let mut out = format!(
        "# os={} arch={} cpus={} version={} optimized={} repeats={}\n",
        e.os, e.arch, e.cpus, e.version, e.optimized, report.repeats
    );
    let line = |fields: Vec<&str>| {
        let padded: Vec<String> = fields.iter().zip(&widths).map(|(f, w)| format!("{f:<w$}")).collect();
        padded.join("  ").trim_end().to_string() + "\n"
    };
    out += &line(COLUMNS.to_vec());
    for row in &cells {
        out += &line(row.iter().map(String::as_str).collect());
    }
    for r in report.rows.iter().filter(|r| !r.present) {
        let _ = writeln!(
            out,
            "# absent {} {}: {}",
            r.label,
            r.method,
            r.absent_reason.as_deref().unwrap_or("unavailable")
        );
    }
    out
}

fn parse_field<T: std::str::FromStr>(s: &str, col: &str, line: usize) -> Result<T> {
    s.parse().map_err(|_| CliError::Usage(format!("report line {line}: bad {col} {s:?}")))
}

fn parse_opt(s: &str, col: &str, line: usize) -> Result<Option<f64>> {
    if s == "-" {
        Ok(None)
    } else {
        parse_field(s, col, line).map(Some)
    }
}

/// Reads the rows back from [`render_table`] output (absence reasons are
/// comments and come back as `None`).
pub fn parse_table(text: &str) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    let mut header_seen = false;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.starts_with('#') || raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split("  ").map(str::trim).filter(|f| !f.is_empty()).collect();
        if !header_seen {
            if fields != COLUMNS {
                return Err(CliError::Usage(format!("report line {line}: unexpected header")));
            }
            header_seen = true;
            continue;
        }
        if fields.len() != COLUMNS.len() {
            return Err(CliError::Usage(format!(
                "report line {line}: expected {} fields, found {}",
                COLUMNS.len(),
                fields.len()
            )));
        }
        let method: Method = fields[4].parse()?;
        rows.push(BenchRow {
            label: fields[0].to_string(),
            material: fields[1].to_string(),
            cells: parse_field(fields[2], "cells", line)?,
            thickness: parse_field(fields[3], "thickness", line)?,
            method,
            present: parse_field(fields[5], "present", line)?,
            mse: parse_opt(fields[6], "mse", line)?,
            time_mean: parse_opt(fields[7], "time_mean", line)?,
            time_std: parse_opt(fields[8], "time_std", line)?,
            repeats: parse_field(fields[9], "repeats", line)?,
            absent_reason: None,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_oracle() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
    }
}
