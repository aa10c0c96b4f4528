//! Consolidates the evaluation rows of every run under a directory into one
//! table keyed by (source mode, transfer mode).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use crate::artifacts::{MetricsRecord, Phase, SpectralRecord, METRICS_FILE, METRICS_HEADER, SPECTRAL_FILE};
use crate::errors::DataError;

/// One cell group of the consolidated table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    /// Short setting label such as `AT+FDM+NEFT`.
    pub setting: String,
    pub source_mode: String,
    pub transfer_mode: String,
    pub runs: usize,
    pub clean_acc: f64,
    pub clean_sd: f64,
    pub robust_acc: f64,
    pub robust_sd: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    /// Baked spectral norms by run directory (relative to the report root).
    pub spectral: Vec<(String, SpectralRecord)>,
}

fn files_named(dir: &Path, name: &str, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if e.file_type()?.is_dir() {
            files_named(&path, name, out)?;
        } else if e.file_name() == name {
            out.push(path);
        }
    }
    Ok(())
}

fn source_label(mode: &str) -> String {
    match mode {
        "standard" => "ST".into(),
        "at" => "AT".into(),
        "at_fdm" => "AT+FDM".into(),
        other => other.to_uppercase(),
    }
}

fn transfer_label(mode: &str) -> String {
    match mode {
        "vanilla" => "TL".into(),
        "neft" => "NEFT".into(),
        "lwf" => "LwF".into(),
        "" => "source".into(),
        other => other.to_uppercase(),
    }
}

fn rank(mode: &str) -> usize {
    ["standard", "at", "at_fdm", "", "vanilla", "lwf", "neft"]
        .iter()
        .position(|m| *m == mode)
        .unwrap_or(usize::MAX)
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

fn read_checked(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = r.headers().with_context(|| format!("reading the header of {}", path.display()))?.clone();
    let missing: Vec<&str> = METRICS_HEADER.iter().copied().filter(|h| !headers.iter().any(|c| c == *h)).collect();
    if !missing.is_empty() {
        return Err(DataError(format!("{} lacks column(s) {}", path.display(), missing.join(", "))).into());
    }
    r.deserialize()
        .collect::<std::result::Result<Vec<MetricsRecord>, _>>()
        .map_err(|e| DataError(format!("{}: {e}", path.display())).into())
}

/// Reads every `metrics.csv` under `dir` and groups its evaluation rows.
pub fn build(dir: &Path) -> Result<Report> {
    let mut metrics = Vec::new();
    files_named(dir, METRICS_FILE, &mut metrics).map_err(|e| DataError(format!("cannot scan {}: {e}", dir.display())))?;
    if metrics.is_empty() {
        return Err(DataError(format!("no {METRICS_FILE} under {}", dir.display())).into());
    }
    let mut groups: BTreeMap<(usize, usize, String, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for path in &metrics {
        for r in read_checked(path)?.into_iter().filter(|r| r.phase == Phase::Eval) {
            let (Some(c), Some(a)) = (r.clean_acc, r.robust_acc) else {
                return Err(DataError(format!("{}: eval row without accuracies", path.display())).into());
            };
            let g = groups
                .entry((rank(&r.source_mode), rank(&r.transfer_mode), r.source_mode, r.transfer_mode))
                .or_default();
            g.0.push(c);
            g.1.push(a);
        }
    }
    if groups.is_empty() {
        return Err(DataError(format!("no evaluation rows in the metrics files under {}", dir.display())).into());
    }
    let rows = groups
        .into_iter()
        .map(|((_, _, s, t), (clean, robust))| {
            let (clean_acc, clean_sd) = mean_sd(&clean);
            let (robust_acc, robust_sd) = mean_sd(&robust);
            ReportRow {
                setting: if t.is_empty() {
                    source_label(&s)
                } else {
                    format!("{}+{}", source_label(&s), transfer_label(&t))
                },
                source_mode: s,
                transfer_mode: t,
                runs: clean.len(),
                clean_acc,
                clean_sd,
                robust_acc,
                robust_sd,
            }
        })
        .collect();

    let mut spectral_files = Vec::new();
    files_named(dir, SPECTRAL_FILE, &mut spectral_files).map_err(|e| DataError(e.to_string()))?;
    let mut spectral = Vec::new();
    for path in spectral_files {
        let run = path
            .parent()
            .and_then(|p| p.strip_prefix(dir).ok())
            .map(|p| p.display().to_string())
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| ".".into());
        let mut r = csv::Reader::from_path(&path)?;
        for rec in r.deserialize::<SpectralRecord>() {
            let rec = rec.map_err(|e| DataError(format!("{}: {e}", path.display())))?;
            spectral.push((run.clone(), rec));
        }
    }
    Ok(Report { rows, spectral })
}

impl Report {
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        writeln!(s, "| setting | runs | clean acc (%) | robust acc (%) |").unwrap();
        writeln!(s, "|---|---:|---:|---:|").unwrap();
        for r in &self.rows {
            writeln!(
                s,
                "| {} | {} | {:.2} ± {:.2} | {:.2} ± {:.2} |",
                r.setting,
                r.runs,
                100.0 * r.clean_acc,
                100.0 * r.clean_sd,
                100.0 * r.robust_acc,
                100.0 * r.robust_sd
            )
            .unwrap();
        }
        if !self.spectral.is_empty() {
            writeln!(s, "\n| run | layer | β | estimate before baking | baked norm | SVD norm |").unwrap();
            writeln!(s, "|---|---|---:|---:|---:|---:|").unwrap();
            for (run, r) in &self.spectral {
                writeln!(
                    s,
                    "| {run} | {} | {} | {:.6} | {:.6} | {:.6} |",
                    r.layer, r.beta, r.sigma_estimate, r.baked_norm, r.svd_norm
                )
                .unwrap();
            }
        }
        s
    }

    /// Writes `report.csv` and `report.md` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(dir.join("report.csv"))?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        std::fs::write(dir.join("report.md"), self.to_markdown())?;
        Ok(())
    }
}
