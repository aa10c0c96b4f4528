//! Experiment harness: command-line parsing and the subcommands behind the
//! `rtransfer` binary.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod data;
pub mod errors;
pub mod plot;
pub mod report;

use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rtransfer_core::transfer::{AffinePolicy, StatsPolicy};
use rtransfer_core::TransferMode;

use crate::config::{ConfigError, ExperimentConfig, SweepAxis};

#[derive(Debug, Parser)]
#[command(name = "rtransfer", version, about = "Robust transfer learning experiments")]
pub struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config's top-level seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `output.dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Parallel sweep points.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the source model.
    TrainSource,
    /// Fine-tune a source checkpoint on the target task.
    Transfer {
        /// Source checkpoint (default `<out>/source.ckpt`).
        #[arg(long)]
        source: Option<PathBuf>,
        #[command(flatten)]
        overrides: TransferArgs,
    },
    /// Clean and PGD accuracy of a checkpoint on its task's test split.
    Eval {
        /// Checkpoint (default `<out>/target.ckpt`, else `<out>/source.ckpt`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        attack: AttackArgs,
    },
    /// One transfer and evaluation per listed value of an axis.
    Sweep {
        /// Axis (default `sweep.axis`).
        #[arg(long, value_enum)]
        axis: Option<AxisArg>,
        /// Source checkpoint (default `<out>/source.ckpt`, trained if absent).
        #[arg(long)]
        source: Option<PathBuf>,
        /// Only regenerate the SVG from an existing sweep CSV.
        #[arg(long)]
        replot: bool,
        #[command(flatten)]
        attack: AttackArgs,
    },
    /// Merge the evaluation rows of every run under a directory.
    Report {
        /// Run directory (default `--out`).
        dir: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Vanilla,
    Neft,
    Lwf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StatsArg {
    Frozen,
    Updating,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AffineArg {
    Frozen,
    Trainable,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AxisArg {
    K,
    LambdaD,
    Beta,
    Fraction,
}

#[derive(Debug, Default, Args)]
pub struct TransferArgs {
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lambda_d: Option<f64>,
    /// Extractor batch-norm running statistics.
    #[arg(long, value_enum)]
    pub bn_stats: Option<StatsArg>,
    /// Sub-model batch-norm affine parameters.
    #[arg(long, value_enum)]
    pub bn_affine: Option<AffineArg>,
}

#[derive(Debug, Default, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
}

impl TransferArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        let t = &mut cfg.transfer;
        if let Some(m) = self.mode {
            t.mode = match m {
                ModeArg::Vanilla => TransferMode::Vanilla,
                ModeArg::Neft => TransferMode::Neft,
                ModeArg::Lwf => TransferMode::Lwf,
            };
            if t.mode == TransferMode::Lwf && self.k.is_none() {
                t.k = None;
            }
        }
        if self.k.is_some() {
            t.k = self.k;
        }
        if let Some(b) = self.beta {
            t.beta = b;
        }
        if let Some(l) = self.lambda_d {
            t.lambda_d = l;
        }
        if let Some(s) = self.bn_stats {
            t.bn_stats = match s {
                StatsArg::Frozen => StatsPolicy::Frozen,
                StatsArg::Updating => StatsPolicy::Updating,
            };
        }
        if let Some(a) = self.bn_affine {
            t.bn_affine = match a {
                AffineArg::Frozen => AffinePolicy::Frozen,
                AffineArg::Trainable => AffinePolicy::Trainable,
            };
        }
    }
}

impl AttackArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        let a = &mut cfg.eval.attack;
        if self.eps.is_some() {
            a.epsilon = self.eps;
        }
        if self.alpha.is_some() {
            a.alpha = self.alpha;
        }
        if self.steps.is_some() {
            a.steps = self.steps;
        }
    }
}

impl AxisArg {
    fn axis(self) -> SweepAxis {
        match self {
            AxisArg::K => SweepAxis::K,
            AxisArg::LambdaD => SweepAxis::LambdaD,
            AxisArg::Beta => SweepAxis::Beta,
            AxisArg::Fraction => SweepAxis::Fraction,
        }
    }
}

/// Loads the config, applies global and command overrides, and validates
/// the result before any work starts.
fn resolve(cli: &Cli, edit: impl FnOnce(&mut ExperimentConfig)) -> Result<(ExperimentConfig, PathBuf)> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| ConfigError("--config is required for this command".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output.dir = o.clone();
    }
    edit(&mut cfg);
    cfg.resolve_defaults();
    cfg.validate()?;
    for w in cfg.warnings() {
        eprintln!("warning: {w}");
    }
    let out = cfg.output.dir.clone();
    Ok((cfg, out))
}

fn existing(path: &Path) -> Option<PathBuf> {
    path.exists().then(|| path.to_path_buf())
}

/// Executes one parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::TrainSource => {
            let (cfg, out) = resolve(cli, |_| {})?;
            let path = commands::train_source(&cfg, &out)?;
            println!("{}", path.display());
        }
        Command::Transfer { source, overrides } => {
            let (cfg, out) = resolve(cli, |c| overrides.apply(c))?;
            let source = source.clone().unwrap_or_else(|| out.join(commands::SOURCE_CKPT));
            let path = commands::cmd_transfer(&cfg, &source, &out)?;
            println!("{}", path.display());
        }
        Command::Eval { checkpoint, attack } => {
            let (cfg, out) = resolve(cli, |c| attack.apply(c))?;
            let ckpt = checkpoint
                .clone()
                .or_else(|| existing(&out.join(commands::TARGET_CKPT)))
                .unwrap_or_else(|| out.join(commands::SOURCE_CKPT));
            let r = commands::cmd_eval(&cfg, &ckpt, &out)?;
            println!(
                "{}: clean {:.4} robust {:.4} (PGD-{} ε={} α={}, n={})",
                r.checkpoint, r.clean_acc, r.robust_acc, r.steps, r.epsilon, r.alpha, r.n
            );
        }
        Command::Sweep {
            axis,
            source,
            replot,
            attack,
        } => {
            let (cfg, out) = resolve(cli, |c| attack.apply(c))?;
            let axis = match (axis, &cfg.sweep) {
                (Some(a), _) => a.axis(),
                (None, Some(s)) => s.axis,
                (None, None) => return Err(ConfigError("sweep needs --axis or a [sweep] section".into()).into()),
            };
            if *replot {
                let svg = plot::replot(&out.join(format!("sweep-{}.csv", axis.as_str())))?;
                println!("{}", svg.display());
                return Ok(());
            }
            let source = match source {
                Some(s) => s.clone(),
                None => match existing(&out.join(commands::SOURCE_CKPT)) {
                    Some(p) => p,
                    None => commands::train_source(&cfg, &out)?,
                },
            };
            let csv = commands::cmd_sweep(&cfg, axis, &source, &out, cli.workers)?;
            println!("{}", csv.display());
        }
        Command::Report { dir } => {
            let dir = dir
                .clone()
                .or_else(|| cli.out.clone())
                .ok_or_else(|| ConfigError("report needs a directory or --out".into()))?;
            let r = report::build(&dir)?;
            r.write(&dir)?;
            print!("{}", r.to_markdown());
        }
    }
    Ok(())
}
