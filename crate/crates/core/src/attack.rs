//! ℓ∞ white-box attacks (FGSM, PGD) and robust-accuracy evaluation.

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::layers::{BnMode, ForwardCtx};
use crate::network::Network;
use crate::rng::{stream, RngState};
use crate::tensor::{argmax_rows, Real, Tensor};

fn default_true() -> bool {
    true
}

fn default_eval() -> BnMode {
    BnMode::Eval
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// ℓ∞ radius in input units.
    pub epsilon: f64,
    /// Step size.
    pub alpha: f64,
    pub steps: usize,
    #[serde(default = "default_true")]
    pub random_start: bool,
    /// Batch-norm behaviour while crafting the perturbation.
    #[serde(default = "default_eval")]
    pub bn_mode: BnMode,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig::pgd(8.0 / 255.0, 2.0 / 255.0, 10)
    }
}

impl AttackConfig {
    pub fn pgd(epsilon: f64, alpha: f64, steps: usize) -> Self {
        AttackConfig {
            epsilon,
            alpha,
            steps,
            random_start: true,
            bn_mode: BnMode::Eval,
        }
    }

    /// Single step of size ε from the clean input.
    pub fn fgsm(epsilon: f64) -> Self {
        AttackConfig {
            epsilon,
            alpha: epsilon,
            steps: 1,
            random_start: false,
            bn_mode: BnMode::Eval,
        }
    }

    /// Checks `ε ∈ [0, 1]`, `α > 0`, `N ≥ 1`, and `α ≤ ε` whenever `ε > 0`.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad(format!("epsilon {} outside [0, 1]", self.epsilon));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if self.epsilon > 0.0 && self.alpha > self.epsilon {
            return bad(format!("alpha {} exceeds epsilon {}", self.alpha, self.epsilon));
        }
        if self.steps == 0 {
            return bad("attack needs at least one step".into());
        }
        Ok(())
    }
}

/// Clamps each `δ_i` to `[max(−ε, −x_i), min(ε, 1 − x_i)]`.
pub fn project_linf<T: Real>(delta: &mut [T], x: &[T], epsilon: f64) {
    for (d, xi) in delta.iter_mut().zip(x) {
        let xi = xi.f64();
        let lo = (-epsilon).max(-xi);
        let hi = epsilon.min(1.0 - xi);
        *d = T::of(d.f64().clamp(lo.min(hi), hi));
    }
}

fn sign<T: Real>(g: T) -> f64 {
    if g > T::zero() {
        1.0
    } else if g < T::zero() {
        -1.0
    } else {
        0.0
    }
}

fn compose<T: Real>(x: &Tensor<T>, delta: &[T]) -> Result<Tensor<T>> {
    let data = x
        .data()
        .iter()
        .zip(delta)
        .map(|(&a, &d)| num_traits::clamp(a + d, T::zero(), T::one()))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// PGD driven by an arbitrary input-gradient oracle.
///
/// `grad` returns `∇_x L` at the given point. When `cfg.random_start` is set
/// the start is drawn from `start`, one uniform value per input element.
pub fn pgd_with<T, F>(x: &Tensor<T>, cfg: &AttackConfig, start: Option<&mut RngState>, grad: F) -> Result<Tensor<T>>
where
    T: Real,
    F: FnMut(&Tensor<T>) -> Result<Vec<T>>,
{
    cfg.validate()?;
    let eps = cfg.epsilon;
    let mut delta = vec![T::zero(); x.numel()];
    if cfg.random_start {
        let rng = start.ok_or_else(|| Error::InvalidArgument("random start requested without an RNG".into()))?;
        for d in &mut delta {
            *d = T::of(rng.uniform(-eps, eps));
        }
        project_linf(&mut delta, x.data(), eps);
    }
    pgd_continue(x, &mut delta, cfg, grad)
}

/// Mean cross-entropy of `net` at `x` and its gradient with respect to `x`.
///
/// Parameters receive no gradient; batch statistics observed in `mode`
/// `Train` are discarded, so the model is never mutated.
pub fn input_gradient<T: Real>(net: &Network<T>, x: &Tensor<T>, labels: &[usize], mode: BnMode) -> Result<(f64, Vec<T>)> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true)?;
    let mut ctx = ForwardCtx::new(mode, false);
    let out = net.forward(&mut tape, xv, &mut ctx)?.output;
    let loss = tape.softmax_cross_entropy(out, labels)?;
    let value = tape.value(loss).item().f64();
    let mut grads = tape.backward(loss)?;
    let g = grads
        .take(xv)
        .ok_or_else(|| Error::MissingGradient("attack input".into()))?;
    Ok((value, g))
}

/// Mean cross-entropy of `net` at `x` in inference mode.
pub fn loss_at<T: Real>(net: &Network<T>, x: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let xv = tape.leaf(x.clone(), false)?;
    let out = net.forward(&mut tape, xv, &mut ForwardCtx::eval())?.output;
    let loss = tape.softmax_cross_entropy(out, labels)?;
    Ok(tape.value(loss).item().f64())
}

/// `x̃ = clamp(x + ε·sign(∇_x L))` with the box projection applied.
pub fn fgsm<T: Real>(net: &Network<T>, x: &Tensor<T>, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    let (_, g) = input_gradient(net, x, labels, cfg.bn_mode)?;
    let mut delta: Vec<T> = g.iter().map(|gi| T::of(cfg.epsilon * sign(*gi))).collect();
    project_linf(&mut delta, x.data(), cfg.epsilon);
    compose(x, &delta)
}

pub fn pgd<T: Real>(
    net: &Network<T>,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut RngState,
) -> Result<Tensor<T>> {
    pgd_with(x, cfg, Some(rng), |xa| Ok(input_gradient(net, xa, labels, cfg.bn_mode)?.1))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustReport {
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub n: usize,
}

/// Clean and PGD accuracy over `(images, labels)`.
///
/// Each example's random start comes from its own stream keyed by its index,
/// so results do not depend on the evaluation batch size.
pub fn robust_accuracy<T: Real>(
    net: &Network<T>,
    images: &Tensor<T>,
    labels: &[usize],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<RobustReport> {
    const CHUNK: usize = 200;
    let n = images.batch();
    if n == 0 || labels.is_empty() {
        return Err(Error::Data("robust accuracy on an empty dataset".into()));
    }
    if labels.len() != n {
        return Err(Error::shape("robust_accuracy", format!("{n} images, {} labels", labels.len())));
    }
    cfg.validate()?;
    let row = images.row_len();
    let (mut clean, mut robust) = (0usize, 0usize);
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let x = images.rows(start, end)?;
        let y = &labels[start..end];
        let clean_pred = net.predict(&x)?;
        clean += clean_pred.iter().zip(y).filter(|(p, t)| p == t).count();

        let mut delta = vec![T::zero(); x.numel()];
        if cfg.random_start {
            for (i, chunk) in delta.chunks_mut(row).enumerate() {
                let mut r = RngState::derive(seed, &[stream::EVAL, (start + i) as u64]);
                for d in chunk {
                    *d = T::of(r.uniform(-cfg.epsilon, cfg.epsilon));
                }
            }
            project_linf(&mut delta, x.data(), cfg.epsilon);
        }
        let xa = pgd_continue(&x, &mut delta, cfg, |xa| Ok(input_gradient(net, xa, y, cfg.bn_mode)?.1))?;
        let adv_pred = argmax_rows(&net.logits(&xa)?);
        robust += adv_pred.iter().zip(y).filter(|(p, t)| p == t).count();
        start = end;
    }
    Ok(RobustReport {
        clean_acc: clean as f64 / n as f64,
        robust_acc: robust as f64 / n as f64,
        n,
    })
}

/// Runs `cfg.steps` signed-gradient steps from the perturbation `delta`.
fn pgd_continue<T, F>(x: &Tensor<T>, delta: &mut [T], cfg: &AttackConfig, mut grad: F) -> Result<Tensor<T>>
where
    T: Real,
    F: FnMut(&Tensor<T>) -> Result<Vec<T>>,
{
    for _ in 0..cfg.steps {
        let xa = compose(x, delta)?;
        let g = grad(&xa)?;
        if g.len() != delta.len() {
            return Err(Error::shape("pgd", "gradient length differs from input"));
        }
        for (d, gi) in delta.iter_mut().zip(&g) {
            *d = T::of(d.f64() + cfg.alpha * sign(*gi));
        }
        project_linf(delta, x.data(), cfg.epsilon);
    }
    compose(x, delta)
}
