//! The five subcommands: source training, transfer, evaluation, sweeps and reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use rtransfer_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use rtransfer_core::data::stratified_subset;
use rtransfer_core::layers::MatrixView;
use rtransfer_core::spectral::spectral_norm_exact;
use rtransfer_core::train::{train_adversarial, train_source_fdm, train_standard};
use rtransfer_core::transfer::transfer;
use rtransfer_core::{
    robust_accuracy, ArchSpec, Dataset, EpochMetrics, FdmConfig, Network, Split, TrainConfig, TransferConfig,
    TransferMode,
};

use crate::artifacts::{
    append_eval, append_metrics, record_run, write_spectral, EvalRecord, ManifestEntry, MetricsRecord, Phase,
    SpectralRecord,
};
use crate::config::{ConfigError, ExperimentConfig, SourceMode, SweepAxis};
use crate::data::{load_task, Task};
use crate::errors::{DataError, NumericalError};
use crate::plot::{render_svg, write_sweep_csv, SweepRecord};

pub const SOURCE_CKPT: &str = "source.ckpt";
pub const TARGET_CKPT: &str = "target.ckpt";

fn train_config(epochs: usize, batch: usize, lr: f64, seed: u64) -> TrainConfig {
    let mut t = TrainConfig::new(epochs, seed);
    t.batch_size = batch;
    t.schedule.base_lr = lr;
    t
}

fn arch_for(cfg: &ExperimentConfig, data: &Dataset) -> ArchSpec {
    ArchSpec {
        family: cfg.arch.family,
        depth: cfg.arch.depth,
        width: cfg.arch.width,
        classes: data.classes,
        input: data.sample_shape(),
    }
}

fn run_id(source_mode: &str, transfer_mode: &str, k: Option<usize>, seed: u64) -> String {
    let mut id = source_mode.to_string();
    if !transfer_mode.is_empty() {
        id.push('+');
        id.push_str(transfer_mode);
    }
    if let Some(k) = k {
        id.push_str(&format!("-k{k}"));
    }
    format!("{id}-seed{seed}")
}

fn finite(what: &str, v: Option<f64>) -> Result<()> {
    match v {
        Some(x) if !x.is_finite() => Err(NumericalError(format!("{what} is {x}")).into()),
        _ => Ok(()),
    }
}

fn epoch_rows(id: &str, phase: Phase, source_mode: &str, transfer_mode: &str, k: Option<usize>, metrics: &[EpochMetrics]) -> Result<Vec<MetricsRecord>> {
    metrics
        .iter()
        .map(|m| {
            for (what, v) in [("clean loss", m.clean_loss), ("adversarial loss", m.adv_loss), ("penalty", m.fdm_penalty.or(m.lwf_penalty))] {
                finite(&format!("{what} at epoch {}", m.epoch), v)?;
            }
            Ok(MetricsRecord {
                run_id: id.to_string(),
                phase,
                source_mode: source_mode.to_string(),
                transfer_mode: transfer_mode.to_string(),
                k,
                epoch: m.epoch,
                lr: Some(m.lr),
                clean_acc: m.clean_acc,
                robust_acc: m.adv_acc,
                loss: m.clean_loss,
                adv_loss: m.adv_loss,
                fdm_penalty: m.fdm_penalty,
                lwf_penalty: m.lwf_penalty,
                wall_ms: m.wall_ms,
            })
        })
        .collect()
}

fn streams(seed: u64, roles: &[&str]) -> BTreeMap<String, u64> {
    roles.iter().map(|r| (r.to_string(), seed)).collect()
}

fn source_mode_of(meta: &CheckpointMeta) -> String {
    meta.extra
        .get("source_mode")
        .cloned()
        .unwrap_or_else(|| meta.training_mode.clone())
}

/// Trains the source model and writes `source.ckpt` plus per-epoch metrics.
pub fn train_source(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let data = load_task(&cfg.data, Task::Source, Split::Train).context("loading source training data")?;
    let arch = arch_for(cfg, &data);
    let mut net = Network::<f32>::build(&arch, cfg.seed)?;
    let s = &cfg.source;
    let tc = train_config(s.epochs, s.batch_size, s.lr, cfg.seed);
    let attack = s.attack.attack();
    eprintln!("train-source: {} on {} examples, {} epochs", s.mode.as_str(), data.len(), s.epochs);
    let metrics = match s.mode {
        SourceMode::Standard => train_standard(&mut net, &data, &tc)?,
        SourceMode::At => train_adversarial(&mut net, &data, &attack, &tc)?,
        SourceMode::AtFdm => {
            let fdm = FdmConfig::new(s.lambda.expect("validated"), s.k.expect("validated"));
            train_source_fdm(&mut net, &data, &attack, &fdm, &tc)?
        }
    };
    let mode = s.mode.as_str();
    let rows = epoch_rows(&run_id(mode, "", None, cfg.seed), Phase::Source, mode, "", None, &metrics)?;

    let training_mode = match s.mode {
        SourceMode::Standard => "standard",
        SourceMode::At => "adversarial",
        SourceMode::AtFdm => "fdm",
    };
    let mut meta = CheckpointMeta::describe(&net, training_mode, cfg.seed);
    if s.mode != SourceMode::Standard {
        meta.attack = Some(attack);
    }
    meta.lambda = s.lambda.filter(|_| s.mode == SourceMode::AtFdm);
    meta.extra.insert("source_mode".into(), mode.into());
    meta.extra.insert("data_seed".into(), cfg.data.seed.to_string());
    let path = out.join(SOURCE_CKPT);
    save_checkpoint(&net, &meta, &path)?;
    append_metrics(out, &rows)?;
    record_run(
        out,
        cfg,
        ManifestEntry {
            command: "train-source".into(),
            seed: cfg.seed,
            data_seed: cfg.data.seed,
            streams: streams(cfg.seed, &["init", "shuffle", "attack"]),
            outputs: vec![SOURCE_CKPT.into(), crate::artifacts::METRICS_FILE.into()],
        },
    )?;
    if let Some(last) = metrics.last() {
        eprintln!(
            "train-source: final training accuracy {:.3}{}",
            last.clean_acc.unwrap_or(f64::NAN),
            last.adv_acc.map(|a| format!(", adversarial {a:.3}")).unwrap_or_default()
        );
    }
    Ok(path)
}

fn check_compatible(cfg: &ExperimentConfig, meta: &CheckpointMeta, target: &Dataset) -> Result<()> {
    let a = &meta.arch;
    if a.family != cfg.arch.family || a.depth != cfg.arch.depth || a.width != cfg.arch.width {
        return Err(ConfigError(format!(
            "checkpoint architecture {:?} depth {} width {} does not match the config's {:?} depth {} width {}",
            a.family, a.depth, a.width, cfg.arch.family, cfg.arch.depth, cfg.arch.width
        ))
        .into());
    }
    if a.input != target.sample_shape() {
        return Err(ConfigError(format!(
            "checkpoint expects inputs {:?}, target data has {:?}",
            a.input,
            target.sample_shape()
        ))
        .into());
    }
    Ok(())
}

/// Extractor parameters whose bits differ from the source.
fn moved_extractor_params(source: &Network<f32>, target: &Network<f32>) -> Vec<String> {
    let mut moved = Vec::new();
    for block in &target.blocks()[target.extractor_range()] {
        for layer in block.layers() {
            for p in layer.params() {
                match source.param(&p.name) {
                    Some(s) if s.value.bits_eq(&p.value) => {}
                    _ => moved.push(p.name.clone()),
                }
            }
        }
    }
    moved
}

/// Fine-tunes `source` on the target task and writes the checkpoint, metrics
/// and (for NEFT) the per-layer baked spectral norms into `dir`.
fn run_transfer(cfg: &ExperimentConfig, source: &Network<f32>, source_meta: &CheckpointMeta, dir: &Path) -> Result<(Network<f32>, CheckpointMeta)> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let data = load_task(&cfg.data, Task::Target, Split::Train).context("loading target training data")?;
    check_compatible(cfg, source_meta, &data)?;
    let t = &cfg.transfer;
    let k = cfg.transfer_k();
    if t.mode == TransferMode::Neft {
        if let Some(fk) = source_meta.fdm_k.filter(|&fk| fk != k) {
            eprintln!("warning: neft fine-tunes k = {k} blocks but the source was trained with its feature penalty at k = {fk}");
        }
    }
    let mut tcfg = TransferConfig::new(t.mode, k, train_config(t.epochs, t.batch_size, t.lr, cfg.seed));
    tcfg.beta = t.beta;
    tcfg.lambda_d = t.lambda_d;
    tcfg.bn_policy = cfg.bn_policy();
    tcfg.power_iters = t.power_iters;
    tcfg.validate()?;
    eprintln!(
        "transfer: {} k={} on {} examples, {} epochs",
        t.mode.as_str(),
        k,
        data.len(),
        t.epochs
    );
    let outcome = transfer(source, &data, &tcfg)?;
    let moved = moved_extractor_params(source, &outcome.net);
    if !moved.is_empty() {
        bail!("frozen extractor parameters changed during fine-tuning: {}", moved.join(", "));
    }

    let source_mode = source_mode_of(source_meta);
    let mode = t.mode.as_str();
    let rows = epoch_rows(
        &run_id(&source_mode, mode, Some(outcome.k), cfg.seed),
        Phase::Transfer,
        &source_mode,
        mode,
        Some(outcome.k),
        &outcome.metrics,
    )?;

    let mut meta = CheckpointMeta::describe(&outcome.net, "transfer", cfg.seed);
    meta.bn_policy = Some(outcome.bn_policy);
    meta.transfer_mode = Some(t.mode);
    meta.attack = source_meta.attack;
    meta.lambda = source_meta.lambda;
    match t.mode {
        TransferMode::Neft => {
            meta.beta = Some(t.beta);
            meta.baked = true;
        }
        TransferMode::Lwf => meta.lambda_d = Some(t.lambda_d),
        TransferMode::Vanilla => {}
    }
    meta.extra = source_meta.extra.clone();
    meta.extra.insert("source_mode".into(), source_mode.clone());
    meta.extra.insert("bn_frozen".into(), outcome.bn_policy.frozen_label());
    save_checkpoint(&outcome.net, &meta, &dir.join(TARGET_CKPT))?;
    append_metrics(dir, &rows)?;

    let mut outputs = vec![TARGET_CKPT.to_string(), crate::artifacts::METRICS_FILE.into()];
    if !outcome.baked.is_empty() {
        let spectral: Vec<SpectralRecord> = outcome
            .baked
            .iter()
            .map(|b| {
                let w = &outcome.net.param(&b.name).expect("baked weight exists").value;
                SpectralRecord {
                    layer: b.name.clone(),
                    beta: t.beta,
                    sigma_estimate: b.sigma_estimate,
                    baked_norm: b.baked_norm,
                    svd_norm: spectral_norm_exact(MatrixView::of(w)),
                }
            })
            .collect();
        for s in &spectral {
            finite(&format!("spectral norm of {}", s.layer), Some(s.svd_norm))?;
        }
        write_spectral(dir, &spectral)?;
        outputs.push(crate::artifacts::SPECTRAL_FILE.into());
    }
    record_run(
        dir,
        cfg,
        ManifestEntry {
            command: "transfer".into(),
            seed: cfg.seed,
            data_seed: cfg.data.seed,
            streams: streams(cfg.seed, &["head", "shuffle", "spectral"]),
            outputs,
        },
    )?;
    eprintln!("transfer: BN policy applied, frozen = {}", outcome.bn_policy.frozen_label());
    Ok((outcome.net, meta))
}

pub fn load_source(path: &Path) -> Result<(Network<f32>, CheckpointMeta)> {
    let (net, meta) = load_checkpoint(path).with_context(|| format!("loading source checkpoint {}", path.display()))?;
    if meta.training_mode == "transfer" {
        return Err(DataError(format!("{} is a transferred model, not a source checkpoint", path.display())).into());
    }
    Ok((net, meta))
}

/// Fine-tunes the checkpoint at `source_path` and writes `target.ckpt` into `out`.
pub fn cmd_transfer(cfg: &ExperimentConfig, source_path: &Path, out: &Path) -> Result<PathBuf> {
    let (source, meta) = load_source(source_path)?;
    run_transfer(cfg, &source, &meta, out)?;
    Ok(out.join(TARGET_CKPT))
}

/// Clean and PGD accuracy on the test split of the checkpoint's task.
fn run_eval(cfg: &ExperimentConfig, net: &Network<f32>, meta: &CheckpointMeta, label: &str, dir: &Path) -> Result<EvalRecord> {
    let task = if meta.training_mode == "transfer" { Task::Target } else { Task::Source };
    let mut test = load_task(&cfg.data, task, Split::Test).with_context(|| format!("loading {} test data", task.as_str()))?;
    if cfg.eval.fraction < 1.0 {
        test = stratified_subset(&test, cfg.eval.fraction, cfg.data.seed)?;
    }
    if test.classes != net.classes() || test.sample_shape() != meta.arch.input {
        return Err(ConfigError(format!(
            "{label} classifies {} classes of {:?}, the {} test split has {} of {:?}",
            net.classes(),
            meta.arch.input,
            task.as_str(),
            test.classes,
            test.sample_shape()
        ))
        .into());
    }
    let attack = cfg.eval.attack.attack();
    let started = Instant::now();
    let r = robust_accuracy(net, &test.images, &test.labels, &attack, cfg.seed)?;
    finite("clean accuracy", Some(r.clean_acc))?;
    finite("robust accuracy", Some(r.robust_acc))?;
    let source_mode = source_mode_of(meta);
    let transfer_mode = meta.transfer_mode.map(|m| m.as_str()).unwrap_or("").to_string();
    let row = EvalRecord {
        checkpoint: label.to_string(),
        source_mode: source_mode.clone(),
        transfer_mode: transfer_mode.clone(),
        k: meta.split_k,
        epsilon: attack.epsilon,
        alpha: attack.alpha,
        steps: attack.steps,
        seed: cfg.seed,
        n: r.n,
        clean_acc: r.clean_acc,
        robust_acc: r.robust_acc,
    };
    append_eval(dir, &row)?;
    append_metrics(
        dir,
        &[MetricsRecord {
            run_id: run_id(&source_mode, &transfer_mode, meta.split_k, cfg.seed),
            phase: Phase::Eval,
            source_mode,
            transfer_mode,
            k: meta.split_k,
            epoch: 0,
            lr: None,
            clean_acc: Some(r.clean_acc),
            robust_acc: Some(r.robust_acc),
            loss: None,
            adv_loss: None,
            fdm_penalty: None,
            lwf_penalty: None,
            wall_ms: started.elapsed().as_millis() as u64,
        }],
    )?;
    record_run(
        dir,
        cfg,
        ManifestEntry {
            command: "eval".into(),
            seed: cfg.seed,
            data_seed: cfg.data.seed,
            streams: streams(cfg.seed, &["eval"]),
            outputs: vec![crate::artifacts::EVAL_FILE.into(), crate::artifacts::METRICS_FILE.into()],
        },
    )?;
    Ok(row)
}

/// Evaluates a checkpoint and appends the result to `eval.csv` and `metrics.csv` in `out`.
pub fn cmd_eval(cfg: &ExperimentConfig, ckpt: &Path, out: &Path) -> Result<EvalRecord> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let (net, meta) = load_checkpoint(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let label = ckpt.file_name().map_or_else(|| ckpt.display().to_string(), |n| n.to_string_lossy().into_owned());
    run_eval(cfg, &net, &meta, &label, out)
}

fn sweep_value_label(axis: SweepAxis, v: f64) -> String {
    match axis {
        SweepAxis::K => format!("{}", v as usize),
        _ => format!("{v}"),
    }
}

/// The config of one sweep point.
pub fn sweep_point(cfg: &ExperimentConfig, axis: SweepAxis, mode: TransferMode, value: f64) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.sweep = None;
    c.transfer.mode = mode;
    if mode == TransferMode::Lwf {
        c.transfer.k = Some(c.arch.depth);
    }
    match axis {
        SweepAxis::K => c.transfer.k = Some(value as usize),
        SweepAxis::LambdaD => c.transfer.lambda_d = value,
        SweepAxis::Beta => c.transfer.beta = value,
        SweepAxis::Fraction => c.data.fraction = value,
    }
    c
}

/// Runs transfer plus evaluation for every (mode, value) pair from one shared
/// source checkpoint, on up to `workers` threads, then writes
/// `sweep-<axis>.csv` and `sweep-<axis>.svg`.
///
/// Completed points are written even when another point fails.
pub fn cmd_sweep(cfg: &ExperimentConfig, axis: SweepAxis, source_path: &Path, out: &Path, workers: usize) -> Result<PathBuf> {
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| ConfigError("sweep needs a [sweep] section listing the values".into()))?;
    let (source, source_meta) = load_source(source_path)?;
    let mut points = Vec::new();
    for mode in cfg.modes() {
        for &v in &sweep.values {
            let point = sweep_point(cfg, axis, mode, v);
            point
                .validate()
                .map_err(|e| ConfigError(format!("sweep point {} = {v} ({}): {}", axis.as_str(), mode.as_str(), e.0)))?;
            points.push((mode, v, point));
        }
    }
    let sweep_dir = out.join(format!("sweep-{}", axis.as_str()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .context("starting the worker pool")?;
    let results: Vec<Result<SweepRecord>> = pool.install(|| {
        points
            .par_iter()
            .map(|(mode, v, point)| {
                let dir = sweep_dir.join(format!("{}-{}", mode.as_str(), sweep_value_label(axis, *v)));
                let (net, meta) = run_transfer(point, &source, &source_meta, &dir)?;
                let e = run_eval(point, &net, &meta, TARGET_CKPT, &dir)?;
                eprintln!(
                    "sweep: {} {}={} clean {:.3} robust {:.3}",
                    mode.as_str(),
                    axis.as_str(),
                    sweep_value_label(axis, *v),
                    e.clean_acc,
                    e.robust_acc
                );
                Ok(SweepRecord {
                    axis: axis.as_str().into(),
                    value: *v,
                    mode: mode.as_str().into(),
                    k: point.transfer_k(),
                    beta: point.transfer.beta,
                    lambda_d: point.transfer.lambda_d,
                    fraction: point.data.fraction,
                    clean_acc: e.clean_acc,
                    robust_acc: e.robust_acc,
                })
            })
            .collect()
    });
    let mut rows = Vec::new();
    let mut first_err = None;
    for ((mode, v, _), r) in points.iter().zip(results) {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => {
                let e = e.context(format!("sweep point {} {}={v}", mode.as_str(), axis.as_str()));
                first_err.get_or_insert(e);
            }
        }
    }
    let csv_path = out.join(format!("sweep-{}.csv", axis.as_str()));
    write_sweep_csv(&csv_path, &rows)?;
    if !rows.is_empty() {
        let svg = render_svg(&crate::plot::read_sweep_csv(&csv_path)?)?;
        std::fs::write(csv_path.with_extension("svg"), svg)?;
    }
    record_run(
        out,
        cfg,
        ManifestEntry {
            command: format!("sweep-{}", axis.as_str()),
            seed: cfg.seed,
            data_seed: cfg.data.seed,
            streams: streams(cfg.seed, &["head", "shuffle", "spectral", "eval"]),
            outputs: vec![
                csv_path.file_name().unwrap().to_string_lossy().into_owned(),
                format!("sweep-{}.svg", axis.as_str()),
            ],
        },
    )?;
    match first_err {
        Some(e) => Err(e),
        None => Ok(csv_path),
    }
}
