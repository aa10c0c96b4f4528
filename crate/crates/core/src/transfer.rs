//! Fine-tuning a pre-trained source on a target task: plain last-k
//! fine-tuning, spectrally normalized fine-tuning and the feature-anchored
//! full fine-tuning baseline, plus batch-norm freeze policies and Lipschitz
//! measurements.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::{ForwardCtx, Layer, MatrixView};
use crate::network::{Aggregation, Block, Network};
use crate::rng::{stream, RngState};
use crate::spectral::{spectral_norm_exact, BakedWeight, SpectralNormalizer};
use crate::tensor::{Real, Tensor};
use crate::train::{run_loop, EpochMetrics, Plan, StepHook, Teacher, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferMode {
    Vanilla,
    Neft,
    Lwf,
}

impl TransferMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TransferMode::Vanilla => "vanilla",
            TransferMode::Neft => "neft",
            TransferMode::Lwf => "lwf",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatsPolicy {
    Frozen,
    Updating,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AffinePolicy {
    Frozen,
    Trainable,
}

/// Which batch-norm tensors stay fixed during fine-tuning.
///
/// Extractor affine parameters are always frozen with the rest of the
/// extractor; sub-model running statistics always update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BnPolicy {
    pub extractor_stats: StatsPolicy,
    pub submodel_affine: AffinePolicy,
    #[serde(default = "updating")]
    pub submodel_stats: StatsPolicy,
}

fn updating() -> StatsPolicy {
    StatsPolicy::Updating
}

impl Default for BnPolicy {
    fn default() -> Self {
        BnPolicy {
            extractor_stats: StatsPolicy::Frozen,
            submodel_affine: AffinePolicy::Frozen,
            submodel_stats: StatsPolicy::Updating,
        }
    }
}

impl BnPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.submodel_stats == StatsPolicy::Frozen {
            return Err(Error::BnPolicy(
                "running statistics of fine-tunable layers cannot be frozen: \
                 with fixed statistics the target model is hard to converge"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Frozen batch-norm tensors in `μ, σ, W, b` notation (`none` if nothing is frozen).
    pub fn frozen_label(&self) -> String {
        let mut parts = Vec::new();
        if self.extractor_stats == StatsPolicy::Frozen {
            parts.extend(["μ", "σ"]);
        }
        if self.submodel_affine == AffinePolicy::Frozen {
            parts.extend(["W", "b"]);
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join(", ")
        }
    }
}

/// Sets batch-norm freeze flags according to `policy` for the current split.
pub fn apply_bn_policy<T: Real>(net: &mut Network<T>, policy: &BnPolicy) -> Result<()> {
    policy.validate()?;
    let split = net.split_index();
    for (block, bn) in net.batch_norms_mut() {
        if block < split {
            bn.stats_frozen = policy.extractor_stats == StatsPolicy::Frozen;
            bn.set_affine_trainable(false);
        } else {
            bn.stats_frozen = false;
            bn.set_affine_trainable(policy.submodel_affine == AffinePolicy::Trainable);
        }
    }
    Ok(())
}

fn default_true() -> bool {
    true
}

fn default_beta() -> f64 {
    1.0
}

fn default_iters() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    pub mode: TransferMode,
    /// Number of fine-tuned blocks (forced to `L` for `lwf`).
    pub k: usize,
    /// Lipschitz scale of each normalized layer (`neft` only).
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Feature-anchor strength (`lwf` only).
    #[serde(default)]
    pub lambda_d: f64,
    #[serde(default)]
    pub bn_policy: BnPolicy,
    pub train: TrainConfig,
    /// Replace the classifier with a fresh one sized for the target classes.
    #[serde(default = "default_true")]
    pub reinit_head: bool,
    /// Power-iteration rounds per training step (`neft` only).
    #[serde(default = "default_iters")]
    pub power_iters: usize,
}

impl TransferConfig {
    pub fn new(mode: TransferMode, k: usize, train: TrainConfig) -> Self {
        TransferConfig {
            mode,
            k,
            beta: 1.0,
            lambda_d: 0.0,
            bn_policy: BnPolicy::default(),
            train,
            reinit_head: true,
            power_iters: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bn_policy.validate()?;
        self.train.validate()?;
        if self.mode == TransferMode::Neft && !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config(format!("beta must lie in (0, 1], got {}", self.beta)));
        }
        if self.mode == TransferMode::Lwf && !(self.lambda_d >= 0.0) {
            return Err(Error::Config(format!("lambda_d must be non-negative, got {}", self.lambda_d)));
        }
        if self.power_iters == 0 {
            return Err(Error::Config("power_iters must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TransferOutcome {
    pub net: Network<f32>,
    pub metrics: Vec<EpochMetrics>,
    /// Per-weight baking report (`neft` only).
    pub baked: Vec<BakedWeight>,
    /// Fine-tuned block count actually used.
    pub k: usize,
    /// Effective batch-norm policy.
    pub bn_policy: BnPolicy,
}

/// Clone of `source` with the head sized for `classes`, split at `L − k`
/// and batch-norm flags set.
fn prepare(source: &Network<f32>, classes: usize, k: usize, policy: &BnPolicy, cfg: &TransferConfig) -> Result<Network<f32>> {
    let mut net = source.clone();
    net.fdm_k = source.fdm_k;
    if cfg.reinit_head {
        net.reinit_head(classes, cfg.train.seed)?;
    } else if classes != source.classes() {
        return Err(Error::Config(format!(
            "target has {classes} classes, source head {}; enable head re-initialization",
            source.classes()
        )));
    }
    net.split(k)?;
    apply_bn_policy(&mut net, policy)?;
    Ok(net)
}

fn finetune(
    source: &Network<f32>,
    data: &Dataset,
    cfg: &TransferConfig,
    hook: Option<StepHook<'_>>,
) -> Result<TransferOutcome> {
    cfg.validate()?;
    let l = source.num_blocks();
    match cfg.mode {
        TransferMode::Vanilla => {
            let mut net = prepare(source, data.classes, cfg.k, &cfg.bn_policy, cfg)?;
            let metrics = run_loop(
                &mut net,
                data,
                &cfg.train,
                Plan::Finetune {
                    spectral: None,
                    teacher: None,
                },
                hook,
            )?;
            Ok(TransferOutcome {
                net,
                metrics,
                baked: Vec::new(),
                k: cfg.k,
                bn_policy: cfg.bn_policy,
            })
        }
        TransferMode::Neft => {
            let policy = BnPolicy {
                submodel_affine: AffinePolicy::Frozen,
                ..cfg.bn_policy
            };
            let mut net = prepare(source, data.classes, cfg.k, &policy, cfg)?;
            let sub = net.submodel_range();
            net.set_aggregation(sub, Aggregation::Convex);
            let mut normalizer = SpectralNormalizer::for_submodel(&net, cfg.beta, cfg.power_iters, cfg.train.seed)?;
            let metrics = run_loop(
                &mut net,
                data,
                &cfg.train,
                Plan::Finetune {
                    spectral: Some(&mut normalizer),
                    teacher: None,
                },
                hook,
            )?;
            let baked = normalizer.bake(&mut net)?;
            Ok(TransferOutcome {
                net,
                metrics,
                baked,
                k: cfg.k,
                bn_policy: policy,
            })
        }
        TransferMode::Lwf => {
            let teacher_net = source.clone();
            let mut net = prepare(source, data.classes, l, &cfg.bn_policy, cfg)?;
            let metrics = run_loop(
                &mut net,
                data,
                &cfg.train,
                Plan::Finetune {
                    spectral: None,
                    teacher: Some(Teacher {
                        net: &teacher_net,
                        lambda_d: cfg.lambda_d,
                    }),
                },
                hook,
            )?;
            Ok(TransferOutcome {
                net,
                metrics,
                baked: Vec::new(),
                k: l,
                bn_policy: cfg.bn_policy,
            })
        }
    }
}

/// Fine-tunes the last `k` blocks on the target data.
pub fn vanilla_finetune(source: &Network<f32>, data: &Dataset, cfg: &TransferConfig) -> Result<TransferOutcome> {
    finetune(source, data, &TransferConfig { mode: TransferMode::Vanilla, ..cfg.clone() }, None)
}

/// Fine-tunes with every sub-model weight used as `β·W/σ̂(W)`, then bakes.
pub fn neft_finetune(source: &Network<f32>, data: &Dataset, cfg: &TransferConfig) -> Result<TransferOutcome> {
    finetune(source, data, &TransferConfig { mode: TransferMode::Neft, ..cfg.clone() }, None)
}

/// Fine-tunes all blocks with a penalty tying penultimate features to the source.
pub fn lwf_finetune(source: &Network<f32>, data: &Dataset, cfg: &TransferConfig) -> Result<TransferOutcome> {
    finetune(source, data, &TransferConfig { mode: TransferMode::Lwf, ..cfg.clone() }, None)
}

/// Dispatches on `cfg.mode`.
pub fn transfer(source: &Network<f32>, data: &Dataset, cfg: &TransferConfig) -> Result<TransferOutcome> {
    finetune(source, data, cfg, None)
}

/// As [`transfer`], calling `hook` after every optimization step.
pub fn transfer_observed(
    source: &Network<f32>,
    data: &Dataset,
    cfg: &TransferConfig,
    hook: StepHook<'_>,
) -> Result<TransferOutcome> {
    finetune(source, data, cfg, Some(hook))
}

/// Per-layer Lipschitz bounds of an inference-mode block range and their product.
#[derive(Clone, Debug, PartialEq)]
pub struct LipschitzBound {
    /// `(layer description, bound)` in forward order; residual blocks appear as one entry.
    pub per_layer: Vec<(String, f64)>,
    pub product: f64,
}

fn layer_bound<T: Real>(layer: &Layer<T>, in_shape: &[usize]) -> (String, f64) {
    match layer {
        Layer::Dense(d) => (d.weight.name.clone(), spectral_norm_exact(MatrixView::of(&d.weight.value))),
        Layer::Conv(c) => {
            // each input pixel enters at most ⌈K/s⌉² patches
            let overlap = c.kernel().div_ceil(c.stride) as f64;
            (c.weight.name.clone(), overlap * spectral_norm_exact(c.weight_matrix()))
        }
        Layer::BatchNorm(bn) => (bn.name.clone(), bn.eval_lipschitz()),
        Layer::Relu => ("relu".into(), 1.0),
        Layer::Flatten => ("flatten".into(), 1.0),
        Layer::AvgPool(k) => ("avg_pool".into(), 1.0 / *k as f64),
        Layer::GlobalAvgPool => {
            let hw = (in_shape[2] * in_shape[3]) as f64;
            ("global_avg_pool".into(), 1.0 / hw.sqrt())
        }
    }
}

fn chain_bound<T: Real>(
    layers: &[Layer<T>],
    tape: &mut Tape<T>,
    mut x: crate::autograd::Var,
    out: &mut Vec<(String, f64)>,
) -> Result<(f64, crate::autograd::Var)> {
    let mut prod = 1.0;
    for layer in layers {
        let (name, b) = layer_bound(layer, tape.value(x).shape());
        out.push((name, b));
        prod *= b;
        x = layer.forward(tape, x, &mut ForwardCtx::eval())?;
    }
    Ok((prod, x))
}

/// Product of per-layer Lipschitz bounds over blocks `range` in inference mode.
///
/// Dense layers contribute `σ(W)`, convolutions `⌈K/stride⌉·σ(W_mat)`, batch
/// norm `max|γ|/√(σ²+ε)`, average pooling `1/k`, global pooling `1/√(HW)`.
/// A residual block contributes `Λ_main + Λ_short` (sum) or their mean (convex).
pub fn lipschitz_upper_bound<T: Real>(net: &Network<T>, range: Range<usize>) -> Result<LipschitzBound> {
    let shape = net.feature_shape(range.start)?;
    let mut full = vec![1];
    full.extend(&shape);
    let mut tape = Tape::<T>::no_grad();
    let mut x = tape.leaf(Tensor::zeros(&full), false)?;
    let mut per_layer = Vec::new();
    let mut product = 1.0;
    for block in &net.blocks()[range] {
        match block {
            Block::Plain(layers) => {
                let (b, y) = chain_bound(layers, &mut tape, x, &mut per_layer)?;
                product *= b;
                x = y;
            }
            Block::Residual(r) => {
                let mut scratch = Vec::new();
                let (bm, y) = chain_bound(&r.main, &mut tape, x, &mut scratch)?;
                let (bs, _) = chain_bound(&r.shortcut, &mut tape, x, &mut scratch)?;
                let b = match r.aggregation {
                    Aggregation::Sum => bm + bs,
                    Aggregation::Convex => 0.5 * (bm + bs),
                };
                per_layer.push(("residual".into(), b));
                product *= b;
                x = y;
            }
        }
    }
    Ok(LipschitzBound { per_layer, product })
}

/// Largest observed `‖f(x) − f(x′)‖₂ / ‖x − x′‖₂` over random pairs, where `f`
/// is blocks `range` in inference mode evaluated in 64-bit precision.
///
/// `x` has standard-normal entries and `x′ = x + r·u` for a random unit
/// direction `u` and `r` uniform in `(0, radius]`. This certifies a lower
/// bound on the Lipschitz constant, never an upper one.
pub fn empirical_lipschitz_probe<T: Real>(
    net: &Network<T>,
    range: Range<usize>,
    n_pairs: usize,
    radius: f64,
    seed: u64,
) -> Result<f64> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!("probe radius must be positive, got {radius}")));
    }
    let net64: Network<f64> = net.cast();
    let shape = net64.feature_shape(range.start)?;
    let dim: usize = shape.iter().product();
    let mut rng = RngState::derive(seed, &[stream::PROBE]);
    const CHUNK: usize = 256;
    let mut best = 0.0f64;
    let mut done = 0;
    while done < n_pairs {
        let m = CHUNK.min(n_pairs - done);
        let mut a = Vec::with_capacity(m * dim);
        let mut b = Vec::with_capacity(m * dim);
        let mut dists = Vec::with_capacity(m);
        for _ in 0..m {
            let x: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let (u, r) = loop {
                let r = radius * (1.0 - rng.uniform(0.0, 1.0));
                if r > 0.0 {
                    break (rng.unit_vector(dim), r);
                }
            };
            let xp: Vec<f64> = x.iter().zip(&u).map(|(xi, ui)| xi + r * ui).collect();
            let d = x.iter().zip(&xp).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
            a.extend(x);
            b.extend(xp);
            dists.push(d);
        }
        let mut full = vec![m];
        full.extend(&shape);
        let fa = eval_range(&net64, Tensor::new(full.clone(), a)?, range.clone())?;
        let fb = eval_range(&net64, Tensor::new(full, b)?, range.clone())?;
        let row = fa.row_len();
        for (i, d) in dists.iter().enumerate() {
            let num = fa.data()[i * row..(i + 1) * row]
                .iter()
                .zip(&fb.data()[i * row..(i + 1) * row])
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
            best = best.max(num / d);
        }
        done += m;
    }
    Ok(best)
}

fn eval_range(net: &Network<f64>, x: Tensor<f64>, range: Range<usize>) -> Result<Tensor<f64>> {
    let mut tape = Tape::no_grad();
    let xv = tape.leaf(x, false)?;
    let out = net.forward_range(&mut tape, xv, range, &mut ForwardCtx::eval())?.output;
    Ok(tape.value(out).clone())
}
