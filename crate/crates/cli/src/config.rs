//! Experiment configuration: a TOML document with `data`, `arch`, `source`,
//! `transfer`, `eval`, `sweep` and `output` sections.

use std::fmt;
use std::path::{Path, PathBuf};

use rtransfer_core::transfer::{AffinePolicy, StatsPolicy};
use rtransfer_core::{AttackConfig, BnPolicy, Family, TransferMode};
use serde::{Deserialize, Serialize};

/// Schema violation detected before any work starts.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid config: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Glyphs,
    Blobs,
    Idx,
    Cifar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub format: DataFormat,
    /// Seed of the synthetic generators and of subset sampling.
    #[serde(default)]
    pub seed: u64,
    /// Share of the target training split used for fine-tuning.
    #[serde(default = "one")]
    pub fraction: f64,
    #[serde(default = "first_half")]
    pub source_classes: Vec<usize>,
    #[serde(default = "second_half")]
    pub target_classes: Vec<usize>,
    /// Training examples per class (synthetic formats).
    #[serde(default = "default_per_class")]
    pub per_class: usize,
    /// Test examples per class (synthetic formats).
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    /// Pixel noise (glyphs) or cluster spread (blobs).
    #[serde(default)]
    pub noise: Option<f64>,
    /// Input dimension (blobs).
    #[serde(default)]
    pub dims: Option<usize>,
    /// Distance between cluster centres (blobs).
    #[serde(default)]
    pub separation: Option<f64>,
    /// `[images, labels]` IDX files of the training split.
    #[serde(default)]
    pub train_idx: Option<[PathBuf; 2]>,
    #[serde(default)]
    pub test_idx: Option<[PathBuf; 2]>,
    /// CIFAR binary batch files of the training split.
    #[serde(default)]
    pub train_files: Vec<PathBuf>,
    #[serde(default)]
    pub test_files: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSection {
    pub family: Family,
    pub depth: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceMode {
    Standard,
    At,
    AtFdm,
}

impl SourceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceMode::Standard => "standard",
            SourceMode::At => "at",
            SourceMode::AtFdm => "at_fdm",
        }
    }
}

/// `ε`, `α`, `N` of an ℓ∞ PGD attack; omitted fields take the section default.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub epsilon: Option<f64>,
    pub alpha: Option<f64>,
    pub steps: Option<usize>,
}

impl AttackSection {
    fn resolve(&mut self, steps: usize) {
        self.epsilon.get_or_insert(8.0 / 255.0);
        self.alpha.get_or_insert(2.0 / 255.0);
        self.steps.get_or_insert(steps);
    }

    pub fn attack(&self) -> AttackConfig {
        AttackConfig::pgd(
            self.epsilon.unwrap_or(8.0 / 255.0),
            self.alpha.unwrap_or(2.0 / 255.0),
            self.steps.unwrap_or(7),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSection {
    pub mode: SourceMode,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Feature-distance strength (`at_fdm`).
    pub lambda: Option<f64>,
    /// Block count the feature-distance split is pinned to (`at_fdm`).
    pub k: Option<usize>,
    #[serde(default)]
    pub attack: AttackSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSection {
    pub mode: TransferMode,
    /// Fine-tuned block count; `lwf` always uses every block.
    pub k: Option<usize>,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default)]
    pub lambda_d: f64,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Extractor running statistics.
    #[serde(default = "frozen_stats")]
    pub bn_stats: StatsPolicy,
    /// Sub-model batch-norm affine parameters.
    #[serde(default = "frozen_affine")]
    pub bn_affine: AffinePolicy,
    #[serde(default = "one_usize")]
    pub power_iters: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default)]
    pub attack: AttackSection,
    /// Stratified share of the test split that is evaluated.
    #[serde(default = "one")]
    pub fraction: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            attack: AttackSection::default(),
            fraction: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    K,
    LambdaD,
    Beta,
    Fraction,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::K => "k",
            SweepAxis::LambdaD => "lambda_d",
            SweepAxis::Beta => "beta",
            SweepAxis::Fraction => "fraction",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    /// Transfer strategies run at every value (the `transfer` mode by default).
    #[serde(default)]
    pub modes: Vec<TransferMode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("runs/default") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed of initialization, shuffling, attacks and evaluation.
    #[serde(default)]
    pub seed: u64,
    pub data: DataSection,
    pub arch: ArchSection,
    pub source: SourceSection,
    pub transfer: TransferSection,
    #[serde(default)]
    pub eval: EvalSection,
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub output: OutputSection,
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

fn first_half() -> Vec<usize> {
    vec![0, 1, 2, 3, 4]
}

fn second_half() -> Vec<usize> {
    vec![5, 6, 7, 8, 9]
}

fn default_per_class() -> usize {
    500
}

fn default_test_per_class() -> usize {
    100
}

fn default_batch() -> usize {
    128
}

fn default_lr() -> f64 {
    0.1
}

fn frozen_stats() -> StatsPolicy {
    StatsPolicy::Frozen
}

fn frozen_affine() -> AffinePolicy {
    AffinePolicy::Frozen
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        cfg.resolve_defaults();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| ConfigError(format!("{}: {}", path.display(), e.0)))
    }

    /// Fills every implicit default so the echoed document is fully explicit.
    pub fn resolve_defaults(&mut self) {
        self.source.attack.resolve(7);
        self.eval.attack.resolve(100);
        if self.transfer.mode == TransferMode::Lwf {
            self.transfer.k.get_or_insert(self.arch.depth);
        }
    }

    /// Fine-tuned block count after mode-specific defaults.
    pub fn transfer_k(&self) -> usize {
        self.transfer.k.unwrap_or(self.arch.depth)
    }

    pub fn bn_policy(&self) -> BnPolicy {
        BnPolicy {
            extractor_stats: self.transfer.bn_stats,
            submodel_affine: self.transfer.bn_affine,
            ..BnPolicy::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.data;
        if !(d.fraction > 0.0 && d.fraction <= 1.0) {
            return invalid(format!("data.fraction must lie in (0, 1], got {}", d.fraction));
        }
        if !(self.eval.fraction > 0.0 && self.eval.fraction <= 1.0) {
            return invalid(format!("eval.fraction must lie in (0, 1], got {}", self.eval.fraction));
        }
        for (name, classes) in [("source_classes", &d.source_classes), ("target_classes", &d.target_classes)] {
            if classes.len() < 2 {
                return invalid(format!("data.{name} needs at least two classes"));
            }
            let mut sorted = classes.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != classes.len() {
                return invalid(format!("data.{name} lists a class twice"));
            }
        }
        match d.format {
            DataFormat::Idx if d.train_idx.is_none() || d.test_idx.is_none() => {
                return invalid("format idx requires data.train_idx and data.test_idx");
            }
            DataFormat::Cifar if d.train_files.is_empty() || d.test_files.is_empty() => {
                return invalid("format cifar requires data.train_files and data.test_files");
            }
            DataFormat::Glyphs | DataFormat::Blobs if d.per_class == 0 || d.test_per_class == 0 => {
                return invalid("data.per_class and data.test_per_class must be positive");
            }
            _ => {}
        }

        let depth = self.arch.depth;
        if depth < 2 || self.arch.width == 0 {
            return invalid("arch.depth must be at least 2 and arch.width positive");
        }

        let s = &self.source;
        if s.mode == SourceMode::AtFdm {
            match (s.lambda, s.k) {
                (None, _) => return invalid("source.mode = \"at_fdm\" requires source.lambda"),
                (_, None) => return invalid("source.mode = \"at_fdm\" requires source.k"),
                (Some(l), Some(k)) => {
                    if !(l >= 0.0) {
                        return invalid(format!("source.lambda must be non-negative, got {l}"));
                    }
                    if k == 0 || k >= depth {
                        return invalid(format!("source.k = {k} must lie in 1..{depth}"));
                    }
                }
            }
        }
        for (name, a) in [("source.attack", &s.attack), ("eval.attack", &self.eval.attack)] {
            a.attack().validate().map_err(|e| ConfigError(format!("{name}: {e}")))?;
        }

        let t = &self.transfer;
        match (t.mode, t.k) {
            (TransferMode::Lwf, Some(k)) if k != depth => {
                return invalid(format!("lwf fine-tunes every block: transfer.k must be {depth} or omitted, got {k}"));
            }
            (TransferMode::Vanilla | TransferMode::Neft, None) => {
                return invalid(format!("transfer.mode = \"{}\" requires transfer.k", t.mode.as_str()));
            }
            (_, Some(k)) if k == 0 || k > depth => {
                return invalid(format!("transfer.k = {k} must lie in 1..={depth}"));
            }
            _ => {}
        }
        if t.mode == TransferMode::Neft && !(t.beta > 0.0 && t.beta <= 1.0) {
            return invalid(format!("transfer.beta must lie in (0, 1], got {}", t.beta));
        }
        if !(t.lambda_d >= 0.0) {
            return invalid(format!("transfer.lambda_d must be non-negative, got {}", t.lambda_d));
        }
        if t.power_iters == 0 {
            return invalid("transfer.power_iters must be at least 1");
        }
        for (name, batch, lr) in [("source", s.batch_size, s.lr), ("transfer", t.batch_size, t.lr)] {
            if batch < 2 {
                return invalid(format!("{name}.batch_size must be at least 2"));
            }
            if !(lr > 0.0 && lr.is_finite()) {
                return invalid(format!("{name}.lr must be positive"));
            }
        }

        if let Some(sw) = &self.sweep {
            if sw.values.is_empty() {
                return invalid("sweep.values is empty");
            }
            for &v in &sw.values {
                let ok = match sw.axis {
                    SweepAxis::K => v.fract() == 0.0 && v >= 1.0 && v <= depth as f64,
                    SweepAxis::LambdaD => v >= 0.0,
                    SweepAxis::Beta | SweepAxis::Fraction => v > 0.0 && v <= 1.0,
                };
                if !ok {
                    return invalid(format!("sweep value {v} is out of range for axis {}", sw.axis.as_str()));
                }
            }
            if sw.axis == SweepAxis::K && self.modes().contains(&TransferMode::Lwf) {
                return invalid("a k sweep cannot include lwf, which always fine-tunes every block");
            }
        }
        Ok(())
    }

    /// Strategies a sweep runs at every value.
    pub fn modes(&self) -> Vec<TransferMode> {
        match &self.sweep {
            Some(sw) if !sw.modes.is_empty() => sw.modes.clone(),
            _ => vec![self.transfer.mode],
        }
    }

    /// Advisory messages that do not block the run.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.transfer.mode == TransferMode::Neft && self.source.mode == SourceMode::AtFdm {
            if let Some(fk) = self.source.k {
                if fk != self.transfer_k() {
                    out.push(format!(
                        "neft fine-tunes k = {} blocks but the source penalty was pinned at k = {fk}",
                        self.transfer_k()
                    ));
                }
            }
        }
        out
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
