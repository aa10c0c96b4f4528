//! Files written into a run directory: metrics and evaluation CSVs, the
//! resolved config and the seed manifest.

use std::fs::{self, OpenOptions};
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";
pub const SPECTRAL_FILE: &str = "spectral.csv";

/// Column order of `metrics.csv`.
pub const METRICS_HEADER: [&str; 14] = [
    "run_id",
    "phase",
    "source_mode",
    "transfer_mode",
    "k",
    "epoch",
    "lr",
    "clean_acc",
    "robust_acc",
    "loss",
    "adv_loss",
    "fdm_penalty",
    "lwf_penalty",
    "wall_ms",
];

/// One row of `metrics.csv`.
///
/// Training phases report accuracies on the training batches they saw
/// (`robust_acc` on the attacked batches); the `eval` phase reports test
/// accuracy, clean and under the configured PGD attack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub phase: Phase,
    pub source_mode: String,
    pub transfer_mode: String,
    pub k: Option<usize>,
    pub epoch: usize,
    pub lr: Option<f64>,
    pub clean_acc: Option<f64>,
    pub robust_acc: Option<f64>,
    pub loss: Option<f64>,
    pub adv_loss: Option<f64>,
    pub fdm_penalty: Option<f64>,
    pub lwf_penalty: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Source,
    Transfer,
    Eval,
}

/// Appends `rows` to `dir/metrics.csv`.
///
/// Rows stay ordered by `(phase, epoch)`; a batch that would sort before the
/// last stored row belongs to a new run and replaces the file.
pub fn append_metrics(dir: &Path, rows: &[MetricsRecord]) -> Result<()> {
    let Some(first) = rows.first() else {
        return Ok(());
    };
    let path = dir.join(METRICS_FILE);
    let last = read_metrics(&path).ok().and_then(|r| r.last().map(|l| (l.phase, l.epoch)));
    let fresh = last.map_or(true, |l| (first.phase, first.epoch) < l);
    let file = if fresh {
        fs::File::create(&path)
    } else {
        OpenOptions::new().append(true).open(&path)
    }
    .with_context(|| format!("opening {}", path.display()))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh {
        w.write_record(METRICS_HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<MetricsRecord>, _>>()
        .with_context(|| format!("malformed metrics file {}", path.display()))
}

/// One row of `eval.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub checkpoint: String,
    pub source_mode: String,
    pub transfer_mode: String,
    pub k: Option<usize>,
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub seed: u64,
    pub n: usize,
    pub clean_acc: f64,
    pub robust_acc: f64,
}

pub fn append_eval(dir: &Path, row: &EvalRecord) -> Result<()> {
    let path = dir.join(EVAL_FILE);
    let exists = path.exists();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut w = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
    w.serialize(row)?;
    w.flush()?;
    Ok(())
}

/// Per-layer result of baking one normalized weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralRecord {
    pub layer: String,
    pub beta: f64,
    /// Estimate the stored weight was divided by.
    pub sigma_estimate: f64,
    /// Norm after baking as computed by the baking step.
    pub baked_norm: f64,
    /// Norm after baking from an SVD of the saved weight.
    pub svd_norm: f64,
}

pub fn write_spectral(dir: &Path, rows: &[SpectralRecord]) -> Result<()> {
    let path = dir.join(SPECTRAL_FILE);
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// One invocation recorded in `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub command: String,
    pub seed: u64,
    pub data_seed: u64,
    /// Seed each stream of this command was derived from, by role.
    pub streams: std::collections::BTreeMap<String, u64>,
    pub outputs: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config: String,
    pub runs: Vec<ManifestEntry>,
}

/// Echoes the resolved config and records `entry` in the manifest.
pub fn record_run(dir: &Path, cfg: &ExperimentConfig, entry: ManifestEntry) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(RESOLVED_CONFIG_FILE), cfg.to_toml())?;
    let path = dir.join(MANIFEST_FILE);
    let mut manifest = fs::read(&path)
        .ok()
        .and_then(|b| serde_json::from_slice::<Manifest>(&b).ok())
        .unwrap_or_default();
    manifest.tool = env!("CARGO_PKG_NAME").into();
    manifest.version = env!("CARGO_PKG_VERSION").into();
    manifest.config = RESOLVED_CONFIG_FILE.into();
    manifest.runs.retain(|r| r.command != entry.command);
    manifest.runs.push(entry);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(phase: Phase, epoch: usize) -> MetricsRecord {
        MetricsRecord {
            run_id: "r".into(),
            phase,
            source_mode: "at".into(),
            transfer_mode: String::new(),
            k: None,
            epoch,
            lr: Some(0.1),
            clean_acc: Some(0.5),
            robust_acc: None,
            loss: Some(1.0),
            adv_loss: None,
            fdm_penalty: None,
            lwf_penalty: None,
            wall_ms: 3,
        }
    }

    #[test]
    fn metrics_stay_ordered_by_phase_and_epoch() {
        let dir = tempfile::tempdir().unwrap();
        append_metrics(dir.path(), &[row(Phase::Source, 0), row(Phase::Source, 1)]).unwrap();
        append_metrics(dir.path(), &[row(Phase::Transfer, 0)]).unwrap();
        append_metrics(dir.path(), &[row(Phase::Eval, 0)]).unwrap();
        let text = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert!(text.starts_with(&METRICS_HEADER.join(",")));
        let back = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(back.len(), 4);
        assert_eq!(back[0], row(Phase::Source, 0));

        // a new source run replaces the file
        append_metrics(dir.path(), &[row(Phase::Source, 0)]).unwrap();
        assert_eq!(read_metrics(&dir.path().join(METRICS_FILE)).unwrap().len(), 1);
    }
}
