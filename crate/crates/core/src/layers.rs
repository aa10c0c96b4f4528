//! Layer zoo: dense, convolution, batch-norm, activation and pooling layers.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{bilinear, BatchStats, BnStats, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Real, Tensor};

/// A named learnable tensor.
#[derive(Clone, Debug)]
pub struct Param<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Param {
            name: name.into(),
            value,
            trainable: true,
        }
    }

    /// Leaf for this parameter; repeated passes through one context share it,
    /// so gradients from every use accumulate into a single slot.
    fn leaf(&self, tape: &mut Tape<T>, ctx: &mut ForwardCtx<'_>) -> Result<Var> {
        if let Some(&v) = ctx.bindings.get(&self.name) {
            return Ok(v);
        }
        let v = tape.leaf(self.value.clone(), ctx.params_grad && self.trainable)?;
        ctx.bindings.insert(self.name.clone(), v);
        Ok(v)
    }

    fn cast<U: Real>(&self) -> Param<U> {
        Param {
            name: self.name.clone(),
            value: self.value.cast(),
            trainable: self.trainable,
        }
    }
}

/// Batch-norm behaviour for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    /// Batch statistics (layers whose statistics are frozen still use running ones).
    Train,
    /// Running statistics everywhere.
    Eval,
}

/// Power-iteration vectors and scale applied to one weight during a forward pass.
#[derive(Clone, Debug)]
pub struct SpectralEntry {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub beta: f64,
}

/// σ̂ at or below this is treated as degenerate and normalization is skipped.
pub const DEGENERATE_SIGMA: f64 = 1e-12;

/// Per-pass settings plus everything the pass records for the caller.
///
/// A context is tied to the tape it was first used with.
pub struct ForwardCtx<'a> {
    pub mode: BnMode,
    pub params_grad: bool,
    pub spectral: Option<&'a HashMap<String, SpectralEntry>>,
    /// Leaf variable of every parameter touched, keyed by parameter name.
    pub bindings: HashMap<String, Var>,
    /// Batch statistics observed by batch-norm layers that update running stats.
    pub bn_updates: Vec<(String, BatchStats)>,
    /// Weights whose σ̂ was degenerate this pass (normalization skipped).
    pub degenerate: Vec<String>,
    /// σ̂ used for each spectrally normalized weight.
    pub sigmas: Vec<(String, f64)>,
}

impl<'a> ForwardCtx<'a> {
    pub fn new(mode: BnMode, params_grad: bool) -> Self {
        ForwardCtx {
            mode,
            params_grad,
            spectral: None,
            bindings: HashMap::new(),
            bn_updates: Vec::new(),
            degenerate: Vec::new(),
            sigmas: Vec::new(),
        }
    }

    /// Inference: running statistics, no parameter gradients.
    pub fn eval() -> Self {
        Self::new(BnMode::Eval, false)
    }

    pub fn train() -> Self {
        Self::new(BnMode::Train, true)
    }

    pub fn with_spectral(mut self, map: &'a HashMap<String, SpectralEntry>) -> Self {
        self.spectral = Some(map);
        self
    }
}

fn effective_weight<T: Real>(
    tape: &mut Tape<T>,
    weight: &Param<T>,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var> {
    let w = weight.leaf(tape, ctx)?;
    let Some(entry) = ctx.spectral.and_then(|m| m.get(&weight.name)) else {
        return Ok(w);
    };
    let rows = weight.value.shape()[0];
    let cols = weight.value.numel() / rows;
    let sigma = bilinear(weight.value.data(), rows, cols, &entry.u, &entry.v);
    if !(sigma > DEGENERATE_SIGMA) {
        ctx.degenerate.push(weight.name.clone());
        return Ok(w);
    }
    let (scaled, sigma) = tape.spectral_scale(w, &entry.u, &entry.v, entry.beta)?;
    ctx.sigmas.push((weight.name.clone(), sigma));
    Ok(scaled)
}

fn kaiming<T: Real>(shape: &[usize], fan_in: usize, rng: &mut RngState) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.normal() * std)).collect();
    Tensor::new(shape.to_vec(), data).expect("kaiming shape")
}

#[derive(Clone, Debug)]
pub struct Dense<T: Real> {
    /// `[out, in]`
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Dense<T> {
    pub fn new(prefix: &str, in_dim: usize, out_dim: usize, rng: &mut RngState) -> Self {
        Dense {
            weight: Param::new(format!("{prefix}.weight"), kaiming(&[out_dim, in_dim], in_dim, rng)),
            bias: Param::new(format!("{prefix}.bias"), Tensor::zeros(&[out_dim])),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d<T: Real> {
    /// `[C_out, C_in, K, K]`
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut RngState,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Conv2d {
            weight: Param::new(
                format!("{prefix}.weight"),
                kaiming(&[out_ch, in_ch, kernel, kernel], fan_in, rng),
            ),
            bias: bias.then(|| Param::new(format!("{prefix}.bias"), Tensor::zeros(&[out_ch]))),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    /// Filters as a `C_out × (C_in·K·K)` matrix view; each row is one filter
    /// flattened channel-major, then kernel row, then kernel column.
    pub fn weight_matrix(&self) -> MatrixView<'_, T> {
        let rows = self.out_channels();
        MatrixView {
            rows,
            cols: self.weight.value.numel() / rows,
            data: self.weight.value.data(),
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let k = self.kernel();
        if h + 2 * self.padding < k || w + 2 * self.padding < k {
            return None;
        }
        Some((
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        ))
    }
}

/// Row-major matrix borrowed from a parameter's storage.
#[derive(Clone, Copy, Debug)]
pub struct MatrixView<'a, T: Real> {
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [T],
}

impl<'a, T: Real> MatrixView<'a, T> {
    pub fn of(t: &'a Tensor<T>) -> Self {
        let rows = t.shape()[0];
        MatrixView {
            rows,
            cols: t.numel() / rows,
            data: t.data(),
        }
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.f64()).collect()
    }
}

/// Reassembles a filter bank from its `C_out × (C_in·K·K)` matrix form.
pub fn filters_from_matrix<T: Real>(
    matrix: &[T],
    out_ch: usize,
    in_ch: usize,
    kernel: usize,
) -> Result<Tensor<T>> {
    Tensor::new(vec![out_ch, in_ch, kernel, kernel], matrix.to_vec())
}

#[derive(Clone, Debug)]
pub struct BatchNorm<T: Real> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
    /// Running statistics are neither updated nor replaced by batch statistics.
    pub stats_frozen: bool,
    pub name: String,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

impl<T: Real> BatchNorm<T> {
    pub fn new(prefix: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: Param::new(format!("{prefix}.gamma"), Tensor::full(&[channels], T::one())),
            beta: Param::new(format!("{prefix}.beta"), Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            stats_frozen: false,
            name: prefix.to_string(),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.numel()
    }

    pub fn affine_frozen(&self) -> bool {
        !self.gamma.trainable && !self.beta.trainable
    }

    pub fn set_affine_trainable(&mut self, trainable: bool) {
        self.gamma.trainable = trainable;
        self.beta.trainable = trainable;
    }

    pub fn running_mean_name(&self) -> String {
        format!("{}.running_mean", self.name)
    }

    pub fn running_var_name(&self) -> String {
        format!("{}.running_var", self.name)
    }

    /// `μ ← (1−m)·μ + m·mean`, `σ² ← (1−m)·σ² + m·var` (biased batch variance).
    pub fn update_running(&mut self, stats: &BatchStats) {
        if self.stats_frozen {
            return;
        }
        let m = self.momentum;
        for (r, b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = T::of((1.0 - m) * r.f64() + m * b);
        }
        for (r, b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = T::of((1.0 - m) * r.f64() + m * b);
        }
    }

    /// Lipschitz constant of the inference-mode map: `max |γ_c| / √(σ²_c + ε)`.
    pub fn eval_lipschitz(&self) -> f64 {
        self.gamma
            .value
            .data()
            .iter()
            .zip(self.running_var.data())
            .map(|(g, v)| g.f64().abs() / (v.f64() + self.eps).sqrt())
            .fold(0.0, f64::max)
    }

    fn forward(&self, tape: &mut Tape<T>, x: Var, ctx: &mut ForwardCtx<'_>) -> Result<Var> {
        let c = tape.value(x).shape().get(1).copied().unwrap_or(0);
        if c != self.channels() {
            return Err(Error::shape(
                "batch_norm",
                format!("{c} input channels for a {}-channel layer", self.channels()),
            ));
        }
        let gamma = self.gamma.leaf(tape, ctx)?;
        let beta = self.beta.leaf(tape, ctx)?;
        if ctx.mode == BnMode::Train && !self.stats_frozen {
            let (y, stats) = tape.batch_norm(x, gamma, beta, self.eps, BnStats::Batch)?;
            if let Some(s) = stats {
                ctx.bn_updates.push((self.name.clone(), s));
            }
            Ok(y)
        } else {
            let mean = self.running_mean.to_f64_vec();
            let var = self.running_var.to_f64_vec();
            let (y, _) = tape.batch_norm(x, gamma, beta, self.eps, BnStats::Running { mean: &mean, var: &var })?;
            Ok(y)
        }
    }
}

#[derive(Clone, Debug)]
pub enum Layer<T: Real> {
    Dense(Dense<T>),
    Conv(Conv2d<T>),
    BatchNorm(BatchNorm<T>),
    Relu,
    AvgPool(usize),
    GlobalAvgPool,
    Flatten,
}

impl<T: Real> Layer<T> {
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, ctx: &mut ForwardCtx<'_>) -> Result<Var> {
        match self {
            Layer::Dense(d) => {
                let w = effective_weight(tape, &d.weight, ctx)?;
                let b = d.bias.leaf(tape, ctx)?;
                tape.linear(x, w, Some(b))
            }
            Layer::Conv(c) => {
                let w = effective_weight(tape, &c.weight, ctx)?;
                let b = match &c.bias {
                    Some(b) => Some(b.leaf(tape, ctx)?),
                    None => None,
                };
                tape.conv2d(x, w, b, c.stride, c.padding)
            }
            Layer::BatchNorm(bn) => bn.forward(tape, x, ctx),
            Layer::Relu => tape.relu(x),
            Layer::AvgPool(k) => tape.avg_pool(x, *k),
            Layer::GlobalAvgPool => tape.global_avg_pool(x),
            Layer::Flatten => tape.flatten(x),
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        match self {
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            Layer::Conv(c) => std::iter::once(&c.weight).chain(c.bias.as_ref()).collect(),
            Layer::BatchNorm(bn) => vec![&bn.gamma, &bn.beta],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            Layer::Conv(c) => std::iter::once(&mut c.weight).chain(c.bias.as_mut()).collect(),
            Layer::BatchNorm(bn) => vec![&mut bn.gamma, &mut bn.beta],
            _ => Vec::new(),
        }
    }

    /// The matrix parameter subject to spectral normalization, if any.
    pub fn spectral_weight(&self) -> Option<&Param<T>> {
        match self {
            Layer::Dense(d) => Some(&d.weight),
            Layer::Conv(c) => Some(&c.weight),
            _ => None,
        }
    }

    pub fn spectral_weight_mut(&mut self) -> Option<&mut Param<T>> {
        match self {
            Layer::Dense(d) => Some(&mut d.weight),
            Layer::Conv(c) => Some(&mut c.weight),
            _ => None,
        }
    }

    pub fn cast<U: Real>(&self) -> Layer<U> {
        match self {
            Layer::Dense(d) => Layer::Dense(Dense {
                weight: d.weight.cast(),
                bias: d.bias.cast(),
            }),
            Layer::Conv(c) => Layer::Conv(Conv2d {
                weight: c.weight.cast(),
                bias: c.bias.as_ref().map(|b| b.cast()),
                stride: c.stride,
                padding: c.padding,
            }),
            Layer::BatchNorm(bn) => Layer::BatchNorm(BatchNorm {
                gamma: bn.gamma.cast(),
                beta: bn.beta.cast(),
                running_mean: bn.running_mean.cast(),
                running_var: bn.running_var.cast(),
                momentum: bn.momentum,
                eps: bn.eps,
                stats_frozen: bn.stats_frozen,
                name: bn.name.clone(),
            }),
            Layer::Relu => Layer::Relu,
            Layer::AvgPool(k) => Layer::AvgPool(*k),
            Layer::GlobalAvgPool => Layer::GlobalAvgPool,
            Layer::Flatten => Layer::Flatten,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_bn(bn: &BatchNorm<f64>, x: Tensor<f64>, mode: BnMode) -> (Tensor<f64>, Vec<(String, BatchStats)>) {
        let mut tape = Tape::no_grad();
        let xv = tape.leaf(x, false).unwrap();
        let mut ctx = ForwardCtx::new(mode, false);
        let y = bn.forward(&mut tape, xv, &mut ctx).unwrap();
        (tape.value(y).clone(), ctx.bn_updates)
    }

    #[test]
    fn bn_train_standardizes_batch() {
        let bn = BatchNorm::<f64>::new("bn", 1);
        let x = Tensor::from_f64(&[2, 1], &[0.0, 2.0]).unwrap();
        let (y, upd) = run_bn(&bn, x, BnMode::Train);
        assert!((y.data()[0] + 1.0).abs() < 1e-4);
        assert!((y.data()[1] - 1.0).abs() < 1e-4);
        assert_eq!(upd[0].1.mean, vec![1.0]);
        assert_eq!(upd[0].1.var, vec![1.0]);
    }

    #[test]
    fn bn_eval_with_identity_stats() {
        let bn = BatchNorm::<f64>::new("bn", 1);
        let x = Tensor::from_f64(&[3, 1], &[0.5, -2.0, 3.0]).unwrap();
        let (y, upd) = run_bn(&bn, x.clone(), BnMode::Eval);
        assert!(upd.is_empty());
        for (yv, xv) in y.data().iter().zip(x.data()) {
            assert!((yv - xv / (1.0 + BN_EPS).sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn running_stats_follow_momentum_rule() {
        let mut bn = BatchNorm::<f64>::new("bn", 1);
        bn.update_running(&BatchStats {
            mean: vec![1.0],
            var: vec![3.0],
        });
        assert!((bn.running_mean.data()[0] - 0.1).abs() < 1e-15);
        assert!((bn.running_var.data()[0] - 1.2).abs() < 1e-15);
        bn.stats_frozen = true;
        bn.update_running(&BatchStats {
            mean: vec![5.0],
            var: vec![5.0],
        });
        assert!((bn.running_mean.data()[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn bn_train_rejects_single_value_channels() {
        let bn = BatchNorm::<f64>::new("bn", 2);
        let mut tape = Tape::no_grad();
        let x = tape.leaf(Tensor::zeros(&[1, 2]), false).unwrap();
        let mut ctx = ForwardCtx::new(BnMode::Train, false);
        assert!(bn.forward(&mut tape, x, &mut ctx).is_err());
    }

    #[test]
    fn frozen_stats_normalize_with_running_values() {
        let mut bn = BatchNorm::<f64>::new("bn", 1);
        bn.stats_frozen = true;
        let x = Tensor::from_f64(&[2, 1], &[0.0, 2.0]).unwrap();
        let (y, upd) = run_bn(&bn, x, BnMode::Train);
        assert!(upd.is_empty());
        assert!((y.data()[1] - 2.0 / (1.0 + BN_EPS).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn conv_matrix_view_shapes() {
        let mut rng = RngState::new(0);
        let c = Conv2d::<f32>::new("c", 3, 8, 3, 1, 1, false, &mut rng);
        let m = c.weight_matrix();
        assert_eq!((m.rows, m.cols), (8, 27));
        let c1 = Conv2d::<f32>::new("c", 1, 1, 1, 1, 0, false, &mut rng);
        let m1 = c1.weight_matrix();
        assert_eq!((m1.rows, m1.cols), (1, 1));
        assert_eq!(m1.get(0, 0), c1.weight.value.data()[0]);
    }

    #[test]
    fn conv_matrix_round_trip_is_bit_exact() {
        let mut rng = RngState::new(3);
        let c = Conv2d::<f32>::new("c", 3, 8, 3, 1, 1, false, &mut rng);
        let m = c.weight_matrix();
        // row r, column (ci·K + ki)·K + kj is filter r at (ci, ki, kj)
        assert_eq!(m.get(5, (2 * 3 + 1) * 3 + 2), c.weight.value.data()[((5 * 3 + 2) * 3 + 1) * 3 + 2]);
        let back = filters_from_matrix(m.data, 8, 3, 3).unwrap();
        assert!(back.bits_eq(&c.weight.value));
    }
}
