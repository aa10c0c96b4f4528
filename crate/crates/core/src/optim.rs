//! SGD with momentum and the step-decay learning-rate schedule.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Var};
use crate::error::{Error, Result};
use crate::layers::Param;
use crate::tensor::Real;

/// Piecewise-constant learning rate: `base_lr · decay^(#milestones ≤ e)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub decay: f64,
    pub total_epochs: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            base_lr: 0.1,
            milestones: vec![40, 70, 90],
            decay: 0.2,
            total_epochs: 100,
        }
    }
}

impl Schedule {
    /// The default milestones rescaled proportionally to a shorter run.
    pub fn scaled(total_epochs: usize) -> Self {
        let base = Schedule::default();
        let milestones = base
            .milestones
            .iter()
            .map(|&m| ((m * total_epochs) as f64 / base.total_epochs as f64).round() as usize)
            .filter(|&m| m > 0 && m < total_epochs)
            .collect();
        Schedule {
            milestones,
            total_epochs,
            ..base
        }
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::InvalidArgument(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.total_epochs
            )));
        }
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        Ok(self.base_lr * self.decay.powi(passed as i32))
    }
}

/// Momentum buffers keyed by parameter name.
#[derive(Clone, Debug)]
pub struct OptimState<T: Real> {
    pub momentum: f64,
    pub velocity: HashMap<String, Vec<T>>,
}

impl<T: Real> Default for OptimState<T> {
    fn default() -> Self {
        OptimState {
            momentum: 0.9,
            velocity: HashMap::new(),
        }
    }
}

/// Pairs each bound parameter name with its gradient.
pub fn named_gradients<T: Real>(bindings: &HashMap<String, Var>, grads: &mut Gradients<T>) -> HashMap<String, Vec<T>> {
    bindings
        .iter()
        .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g)))
        .collect()
}

/// `v ← μ·v + g; p ← p − lr·v` for every trainable parameter; frozen ones are skipped.
pub fn sgd_step<'a, T: Real + 'a>(
    params: impl IntoIterator<Item = &'a mut Param<T>>,
    grads: &HashMap<String, Vec<T>>,
    state: &mut OptimState<T>,
    lr: f64,
) -> Result<()> {
    let mu = T::of(state.momentum);
    let lr = T::of(lr);
    for p in params {
        if !p.trainable {
            continue;
        }
        let g = grads
            .get(&p.name)
            .ok_or_else(|| Error::MissingGradient(p.name.clone()))?;
        if g.len() != p.value.numel() {
            return Err(Error::shape("sgd_step", format!("gradient of {} has {} values", p.name, g.len())));
        }
        let v = state
            .velocity
            .entry(p.name.clone())
            .or_insert_with(|| vec![T::zero(); g.len()]);
        for ((w, vi), gi) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = mu * *vi + *gi;
            *w -= lr * *vi;
        }
    }
    Ok(())
}
