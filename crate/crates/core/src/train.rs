//! Mini-batch training loops: standard, adversarial and adversarial with a
//! feature-distance penalty. Fine-tuning reuses the same loop.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attack::{pgd, AttackConfig};
use crate::autograd::{Tape, Var};
use crate::data::{augment, Dataset};
use crate::error::{Error, Result};
use crate::layers::{BnMode, ForwardCtx};
use crate::network::Network;
use crate::optim::{named_gradients, sgd_step, OptimState, Schedule};
use crate::rng::{stream, RngState};
use crate::spectral::SpectralNormalizer;
use crate::tensor::{argmax_rows, Tensor};

fn default_batch() -> usize {
    128
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub schedule: Schedule,
    pub seed: u64,
    /// Random horizontal flips.
    #[serde(default)]
    pub flip: bool,
    /// Zero padding for random crops (0 disables).
    #[serde(default)]
    pub crop_pad: usize,
}

impl TrainConfig {
    /// `epochs` epochs on the default schedule rescaled to that length.
    pub fn new(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size: default_batch(),
            schedule: Schedule::scaled(epochs.max(1)),
            seed,
            flip: false,
            crop_pad: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if self.epochs > self.schedule.total_epochs {
            return Err(Error::Config(format!(
                "{} epochs exceed the schedule's {}",
                self.epochs, self.schedule.total_epochs
            )));
        }
        Ok(())
    }
}

/// Feature-distance penalty at a pinned split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FdmConfig {
    /// Penalty strength λ.
    pub lambda: f64,
    /// Fine-tuned block count the split is pinned to (features taken after block `L − k − 1`).
    pub k: usize,
    /// Average the per-example distances instead of summing them.
    #[serde(default)]
    pub mean: bool,
}

impl FdmConfig {
    pub fn new(lambda: f64, k: usize) -> Self {
        FdmConfig { lambda, k, mean: false }
    }

    /// Extractor length `L − k`.
    pub fn split_for<T: crate::tensor::Real>(&self, net: &Network<T>) -> Result<usize> {
        let l = net.num_blocks();
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.k == 0 || self.k >= l {
            return Err(Error::Config(format!(
                "feature split k={} must leave a non-empty extractor (1..{l})",
                self.k
            )));
        }
        Ok(l - self.k)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub clean_loss: Option<f64>,
    pub adv_loss: Option<f64>,
    pub fdm_penalty: Option<f64>,
    /// Mean per-example ‖f(x) − f(x̃)‖₂ at the split.
    pub feature_distance: Option<f64>,
    pub lwf_penalty: Option<f64>,
    pub clean_acc: Option<f64>,
    pub adv_acc: Option<f64>,
    /// Steps where some σ̂ was degenerate and normalization was skipped.
    pub degenerate_steps: usize,
    pub wall_ms: u64,
}

/// Frozen copy of the source network whose penultimate features anchor fine-tuning.
pub struct Teacher<'a> {
    pub net: &'a Network<f32>,
    pub lambda_d: f64,
}

/// What one optimization step minimizes.
pub(crate) enum Plan<'a> {
    Standard,
    Adversarial(AttackConfig),
    Fdm(AttackConfig, FdmConfig),
    Finetune {
        spectral: Option<&'a mut SpectralNormalizer>,
        teacher: Option<Teacher<'a>>,
    },
}

/// Snapshot handed to step observers.
pub struct StepEvent<'a> {
    pub epoch: usize,
    /// Global step index starting at 0.
    pub step: usize,
    pub loss: f64,
    pub net: &'a Network<f32>,
    pub spectral: Option<&'a SpectralNormalizer>,
}

pub type StepHook<'h> = &'h mut dyn FnMut(StepEvent<'_>);

/// Terms of the feature-distance objective recorded on a tape.
pub struct FdmTerms {
    pub logits: Var,
    /// Cross-entropy on adversarial inputs.
    pub adv_ce: Var,
    /// `(λ/√d)·Σ‖f(x) − f(x̃)‖₂` (or the mean variant).
    pub penalty: Var,
    /// Unscaled `Σ‖f(x) − f(x̃)‖₂`.
    pub distance_sum: Var,
}

/// Records both branches: the full network on `x_adv` and the extractor on `x`.
///
/// Batch statistics observed on the clean branch are dropped from `ctx`, so
/// only the adversarial pass feeds running statistics.
pub fn record_fdm_terms(
    tape: &mut Tape<f32>,
    ctx: &mut ForwardCtx<'_>,
    net: &Network<f32>,
    x: Var,
    x_adv: Var,
    labels: &[usize],
    fdm: &FdmConfig,
) -> Result<FdmTerms> {
    let split = fdm.split_for(net)?;
    let trace = net.forward(tape, x_adv, ctx)?;
    let adv_ce = tape.softmax_cross_entropy(trace.output, labels)?;
    let f_adv = trace.block_outputs[split - 1];
    let kept = ctx.bn_updates.len();
    let f_clean = net.forward_range(tape, x, 0..split, ctx)?.output;
    ctx.bn_updates.truncate(kept);
    let a = tape.flatten(f_clean)?;
    let b = tape.flatten(f_adv)?;
    let d = tape.value(a).row_len();
    let n = tape.value(a).batch();
    let diff = tape.sub(a, b)?;
    let distance_sum = tape.row_norm_sum(diff)?;
    let mut scale = fdm.lambda / (d as f64).sqrt();
    if fdm.mean {
        scale /= n as f64;
    }
    let penalty = tape.scale(distance_sum, scale)?;
    Ok(FdmTerms {
        logits: trace.output,
        adv_ce,
        penalty,
        distance_sum,
    })
}

/// Value of the feature-distance objective and its parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdmLoss {
    pub total: f64,
    pub adv_ce: f64,
    pub penalty: f64,
    pub distance_sum: f64,
}

/// Evaluates `L_CE(x̃, y) + (λ/√d)·Σ‖f(x) − f(x̃)‖₂` without touching the network.
pub fn fdm_loss(
    net: &Network<f32>,
    x: &Tensor<f32>,
    x_adv: &Tensor<f32>,
    labels: &[usize],
    fdm: &FdmConfig,
    mode: BnMode,
) -> Result<FdmLoss> {
    if x.shape() != x_adv.shape() {
        return Err(Error::shape("fdm_loss", format!("{:?} vs {:?}", x.shape(), x_adv.shape())));
    }
    let mut tape = Tape::no_grad();
    let xv = tape.leaf(x.clone(), false)?;
    let av = tape.leaf(x_adv.clone(), false)?;
    let mut ctx = ForwardCtx::new(mode, false);
    let t = record_fdm_terms(&mut tape, &mut ctx, net, xv, av, labels, fdm)?;
    let adv_ce = tape.value(t.adv_ce).item() as f64;
    let penalty = tape.value(t.penalty).item() as f64;
    Ok(FdmLoss {
        total: adv_ce + penalty,
        adv_ce,
        penalty,
        distance_sum: tape.value(t.distance_sum).item() as f64,
    })
}

fn correct(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    argmax_rows(logits).iter().zip(labels).filter(|(p, t)| p == t).count()
}

#[derive(Default)]
struct Acc {
    n: usize,
    clean_loss: f64,
    adv_loss: f64,
    penalty: f64,
    distance: f64,
    lwf: f64,
    clean_ok: usize,
    adv_ok: usize,
    degenerate: usize,
}

/// Mini-batch order for one epoch; a trailing batch of one example is dropped
/// because training-mode batch norm cannot normalize it.
fn batches(n: usize, size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = RngState::derive(seed, &[stream::SHUFFLE, epoch as u64]);
    let order = rng.permutation(n);
    order
        .chunks(size)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

pub(crate) fn run_loop(
    net: &mut Network<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    mut plan: Plan<'_>,
    mut hook: Option<StepHook<'_>>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if data.classes > net.classes() {
        return Err(Error::Data(format!(
            "dataset has {} classes, network outputs {}",
            data.classes,
            net.classes()
        )));
    }
    if data.sample_shape() != net.arch().input {
        return Err(Error::Data(format!(
            "dataset samples {:?} do not match network input {:?}",
            data.sample_shape(),
            net.arch().input
        )));
    }
    match &plan {
        Plan::Adversarial(a) => a.validate()?,
        Plan::Fdm(a, f) => {
            a.validate()?;
            f.split_for(net)?;
        }
        _ => {}
    }
    let mut opt = OptimState::default();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.schedule.lr_at(epoch)?;
        let mut acc = Acc::default();
        for (b, idx) in batches(data.len(), cfg.batch_size, cfg.seed, epoch).iter().enumerate() {
            let (mut x, y) = data.gather(idx)?;
            if cfg.flip || cfg.crop_pad > 0 {
                let mut rng = RngState::derive(cfg.seed, &[stream::DATA, epoch as u64, b as u64]);
                augment(&mut x, cfg.flip, cfg.crop_pad, &mut rng);
            }
            let n = y.len();
            acc.n += n;

            let x_adv = match &plan {
                Plan::Adversarial(a) | Plan::Fdm(a, _) => {
                    let mut rng = RngState::derive(cfg.seed, &[stream::ATTACK, epoch as u64, b as u64]);
                    let clean_logits = net.logits(&x)?;
                    acc.clean_ok += correct(&clean_logits, &y);
                    acc.clean_loss += crate::attack::loss_at(net, &x, &y)? * n as f64;
                    Some(pgd(net, &x, &y, a, &mut rng)?)
                }
                _ => None,
            };

            let spectral_map = match &mut plan {
                Plan::Finetune {
                    spectral: Some(s), ..
                } => Some(s.step(net)?),
                _ => None,
            };
            let mut tape = Tape::new();
            let mut ctx = ForwardCtx::new(BnMode::Train, true);
            if let Some(m) = &spectral_map {
                ctx = ctx.with_spectral(m);
            }
            let xv = tape.leaf(x.clone(), false)?;
            let loss = match &plan {
                Plan::Standard => {
                    let out = net.forward(&mut tape, xv, &mut ctx)?.output;
                    let ce = tape.softmax_cross_entropy(out, &y)?;
                    acc.clean_loss += tape.value(ce).item() as f64 * n as f64;
                    acc.clean_ok += correct(tape.value(out), &y);
                    ce
                }
                Plan::Adversarial(_) => {
                    let av = tape.leaf(x_adv.expect("adversarial batch"), false)?;
                    let out = net.forward(&mut tape, av, &mut ctx)?.output;
                    let ce = tape.softmax_cross_entropy(out, &y)?;
                    acc.adv_loss += tape.value(ce).item() as f64 * n as f64;
                    acc.adv_ok += correct(tape.value(out), &y);
                    ce
                }
                Plan::Fdm(_, fdm) => {
                    let av = tape.leaf(x_adv.expect("adversarial batch"), false)?;
                    let t = record_fdm_terms(&mut tape, &mut ctx, net, xv, av, &y, fdm)?;
                    acc.adv_loss += tape.value(t.adv_ce).item() as f64 * n as f64;
                    acc.adv_ok += correct(tape.value(t.logits), &y);
                    acc.penalty += tape.value(t.penalty).item() as f64;
                    acc.distance += tape.value(t.distance_sum).item() as f64;
                    if fdm.lambda > 0.0 {
                        tape.add(t.adv_ce, t.penalty)?
                    } else {
                        t.adv_ce
                    }
                }
                Plan::Finetune { teacher, .. } => {
                    let trace = net.forward(&mut tape, xv, &mut ctx)?;
                    let ce = tape.softmax_cross_entropy(trace.output, &y)?;
                    acc.clean_loss += tape.value(ce).item() as f64 * n as f64;
                    acc.clean_ok += correct(tape.value(trace.output), &y);
                    match teacher {
                        Some(t) => {
                            let l = net.num_blocks();
                            let target = penultimate(t.net, &x)?;
                            let tv = tape.constant(target)?;
                            let student = tape.flatten(trace.block_outputs[l - 2])?;
                            let diff = tape.sub(student, tv)?;
                            let dist = tape.row_norm_sum(diff)?;
                            let pen = tape.scale(dist, t.lambda_d)?;
                            acc.lwf += tape.value(pen).item() as f64;
                            if t.lambda_d > 0.0 {
                                tape.add(ce, pen)?
                            } else {
                                ce
                            }
                        }
                        None => ce,
                    }
                }
            };
            acc.degenerate += usize::from(!ctx.degenerate.is_empty());
            let loss_value = tape.value(loss).item() as f64;
            let mut grads = tape.backward(loss)?;
            let named = named_gradients(&ctx.bindings, &mut grads);
            sgd_step(net.params_mut(), &named, &mut opt, lr)?;
            net.apply_bn_updates(&ctx.bn_updates);
            if let Some(h) = hook.as_mut() {
                let spectral = match &plan {
                    Plan::Finetune { spectral: Some(s), .. } => Some(&**s),
                    _ => None,
                };
                h(StepEvent {
                    epoch,
                    step,
                    loss: loss_value,
                    net,
                    spectral,
                });
            }
            step += 1;
        }
        metrics.push(epoch_metrics(&plan, epoch, lr, &acc, started));
    }
    Ok(metrics)
}

/// Flattened output of the first `L − 1` blocks, inference mode.
fn penultimate(net: &Network<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut tape = Tape::no_grad();
    let xv = tape.leaf(x.clone(), false)?;
    let l = net.num_blocks();
    let out = net.forward_range(&mut tape, xv, 0..l - 1, &mut ForwardCtx::eval())?.output;
    let v = tape.value(out);
    let rows = v.batch();
    let cols = v.row_len();
    v.clone().reshape(&[rows, cols])
}

fn epoch_metrics(plan: &Plan<'_>, epoch: usize, lr: f64, a: &Acc, started: Instant) -> EpochMetrics {
    let n = a.n.max(1) as f64;
    let mut m = EpochMetrics {
        epoch,
        lr,
        clean_loss: Some(a.clean_loss / n),
        clean_acc: Some(a.clean_ok as f64 / n),
        degenerate_steps: a.degenerate,
        wall_ms: started.elapsed().as_millis() as u64,
        ..Default::default()
    };
    match plan {
        Plan::Standard => {}
        Plan::Adversarial(_) => {
            m.adv_loss = Some(a.adv_loss / n);
            m.adv_acc = Some(a.adv_ok as f64 / n);
        }
        Plan::Fdm(..) => {
            m.adv_loss = Some(a.adv_loss / n);
            m.adv_acc = Some(a.adv_ok as f64 / n);
            m.fdm_penalty = Some(a.penalty / n);
            m.feature_distance = Some(a.distance / n);
        }
        Plan::Finetune { teacher, .. } => {
            if teacher.is_some() {
                m.lwf_penalty = Some(a.lwf / n);
            }
        }
    }
    m
}

/// Minimizes clean cross-entropy.
pub fn train_standard(net: &mut Network<f32>, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochMetrics>> {
    run_loop(net, data, cfg, Plan::Standard, None)
}

/// Replaces every batch by its PGD counterpart before the gradient step.
pub fn train_adversarial(
    net: &mut Network<f32>,
    data: &Dataset,
    attack: &AttackConfig,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    run_loop(net, data, cfg, Plan::Adversarial(*attack), None)
}

/// Adversarial training plus the feature-distance penalty; pins `net.fdm_k`.
pub fn train_source_fdm(
    net: &mut Network<f32>,
    data: &Dataset,
    attack: &AttackConfig,
    fdm: &FdmConfig,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    let m = run_loop(net, data, cfg, Plan::Fdm(*attack, *fdm), None)?;
    net.fdm_k = Some(fdm.k);
    Ok(m)
}

/// Any of the source regimes with a per-step observer.
pub fn train_observed(
    net: &mut Network<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    regime: SourceRegime,
    hook: StepHook<'_>,
) -> Result<Vec<EpochMetrics>> {
    let plan = match regime {
        SourceRegime::Standard => Plan::Standard,
        SourceRegime::Adversarial(a) => Plan::Adversarial(a),
        SourceRegime::Fdm(a, f) => Plan::Fdm(a, f),
    };
    run_loop(net, data, cfg, plan, Some(hook))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SourceRegime {
    Standard,
    Adversarial(AttackConfig),
    Fdm(AttackConfig, FdmConfig),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_blobs, BlobSpec, Split};
    use crate::network::ArchSpec;

    fn blobs() -> Dataset {
        synth_blobs(
            &BlobSpec {
                classes: 2,
                per_class: 64,
                dims: 4,
                separation: 0.6,
                noise: 0.05,
                seed: 1,
            },
            Split::Train,
        )
        .unwrap()
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let data = blobs();
        let mut net = Network::<f32>::build(&ArchSpec::mlp(3, 8, 2, 4), 0).unwrap();
        let before = net.clone();
        let m = train_standard(&mut net, &data, &TrainConfig::new(0, 0)).unwrap();
        assert!(m.is_empty());
        assert!(net.state_bits_eq(&before));
    }

    #[test]
    fn fdm_penalty_arithmetic() {
        // one dense block mapping R^4 -> R^4 as identity, then a head
        let mut net = Network::<f32>::build(&ArchSpec::mlp(2, 4, 2, 4), 0).unwrap();
        for p in net.params_mut() {
            if p.name == "b0.l1.weight" {
                let mut eye = vec![0.0f32; 16];
                (0..4).for_each(|i| eye[i * 5] = 1.0);
                p.value = Tensor::new(vec![4, 4], eye).unwrap();
            }
            if p.name == "b0.l1.bias" {
                p.value = Tensor::zeros(&[4]);
            }
        }
        let x = Tensor::new(vec![1, 1, 1, 4], vec![1.0f32; 4]).unwrap();
        let xa = Tensor::new(vec![1, 1, 1, 4], vec![0.0f32; 4]).unwrap();
        let l = fdm_loss(&net, &x, &xa, &[0], &FdmConfig::new(0.01, 1), BnMode::Eval).unwrap();
        assert!((l.penalty - 0.01).abs() < 1e-7, "{l:?}");
        let same = fdm_loss(&net, &x, &x, &[0], &FdmConfig::new(0.01, 1), BnMode::Eval).unwrap();
        assert_eq!(same.penalty, 0.0);
        assert_eq!(same.total, same.adv_ce);
    }

    #[test]
    fn fdm_split_must_leave_extractor() {
        let net = Network::<f32>::build(&ArchSpec::mlp(3, 4, 2, 4), 0).unwrap();
        assert!(FdmConfig::new(0.1, 3).split_for(&net).is_err());
        assert!(FdmConfig::new(-0.1, 1).split_for(&net).is_err());
        assert_eq!(FdmConfig::new(0.1, 1).split_for(&net).unwrap(), 2);
    }

    #[test]
    fn separable_blobs_are_learned() {
        let data = blobs();
        let mut net = Network::<f32>::build(&ArchSpec::mlp(2, 16, 2, 4), 3).unwrap();
        let mut cfg = TrainConfig::new(20, 3);
        cfg.batch_size = 32;
        let m = train_standard(&mut net, &data, &cfg).unwrap();
        let acc = correct(&net.logits(&data.images).unwrap(), &data.labels) as f64 / data.len() as f64;
        assert!(acc >= 0.99, "accuracy {acc}, last epoch {:?}", m.last());
    }
}
