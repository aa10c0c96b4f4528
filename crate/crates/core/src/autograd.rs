//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its forward value plus whatever
//! it needs for the backward pass. [`Tape::backward`] walks the nodes in
//! reverse and accumulates gradients additively, so fan-out is handled by
//! summation. A tape supports exactly one backward pass.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims};
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics observed by a training-mode batch-norm op.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// How a batch-norm op normalizes its input.
#[derive(Clone, Debug)]
pub enum BnStats<'a> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with fixed running statistics.
    Running { mean: &'a [f64], var: &'a [f64] },
}

enum Op<T: Real> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
        cols: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu {
        x: Var,
    },
    AvgPool {
        x: Var,
        k: usize,
    },
    GlobalAvgPool {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    Aggregate {
        inputs: Vec<Var>,
        weight: T,
    },
    MulConst {
        x: Var,
        c: Vec<T>,
    },
    SumAll {
        x: Var,
    },
    SumSquares {
        x: Var,
    },
    RowNormSum {
        x: Var,
        norms: Vec<f64>,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SpectralScale {
        w: Var,
        u: Vec<f64>,
        v: Vec<f64>,
        sigma: f64,
        beta: f64,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the leaves of a tape after [`Tape::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.get(v)
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.to_vec()).expect("gradient shape"))
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Writes the gradient of `v` into the grad slot of `target`.
    pub fn bind(&self, v: Var, target: &mut Tensor<T>) -> Result<bool> {
        match self.get(v) {
            Some(g) => {
                target.set_grad(g.to_vec())?;
                Ok(true)
            }
            None => Ok(false),
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl<T: Real> Tape<T> {
    /// Tape that records backward information.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
            consumed: false,
        }
    }

    /// Forward-only tape: nothing requires gradients.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
            consumed: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        self.grad_enabled && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &str) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        value.check_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf. Its gradient is kept only if `requires_grad` and the tape records gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        let rg = requires_grad && self.grad_enabled;
        self.push(value, Op::Leaf, rg, "leaf")
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// `x·Wᵀ + b` for `x: [N, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape("linear", format!("x {xs:?}, W {ws:?}")));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.value(b).numel() != dout {
                return Err(Error::shape("linear", format!("bias {:?} for {dout} outputs", self.value(b).shape())));
            }
        }
        let mut y = vec![T::zero(); n * dout];
        T::gemm(
            n,
            din,
            dout,
            T::one(),
            self.value(x).data(),
            (din as isize, 1),
            self.value(w).data(),
            (1, din as isize),
            T::zero(),
            &mut y,
            (dout as isize, 1),
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in y.chunks_mut(dout) {
                add_into(row, bias);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        let op = if rg { Op::Linear { x, w, b } } else { Op::Leaf };
        self.push(Tensor::new(vec![n, dout], y)?, op, rg, "linear")
    }

    /// 2-D convolution, `x: [N, C, H, W]`, `W: [O, C, K, K]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let dims = ConvDims::new(&xs, &ws, stride, padding)
            .ok_or_else(|| Error::shape("conv2d", format!("x {xs:?}, W {ws:?}, stride {stride}, pad {padding}")))?;
        if let Some(b) = b {
            if self.value(b).numel() != dims.out_channels {
                return Err(Error::shape("conv2d", "bias length differs from output channels"));
            }
        }
        let cols = kernels::im2col(self.value(x).data(), &dims);
        let pl = dims.patch_len();
        let np = dims.batch * dims.out_pixels();
        let o = dims.out_channels;
        let mut ycm = vec![T::zero(); o * np];
        T::gemm(
            o,
            pl,
            np,
            T::one(),
            self.value(w).data(),
            (pl as isize, 1),
            &cols,
            (np as isize, 1),
            T::zero(),
            &mut ycm,
            (np as isize, 1),
        );
        if let Some(b) = b {
            for (row, &bv) in ycm.chunks_mut(np).zip(self.value(b).data()) {
                for v in row {
                    *v += bv;
                }
            }
        }
        let y = kernels::channel_major_to_batch(&ycm, dims.batch, o, dims.out_pixels());
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        let op = if rg {
            Op::Conv2d { x, w, b, dims, cols }
        } else {
            Op::Leaf
        };
        self.push(Tensor::new(dims.output_shape().to_vec(), y)?, op, rg, "conv2d")
    }

    /// Batch normalization over `[N, C]` or `[N, C, H, W]`.
    ///
    /// With [`BnStats::Batch`] the returned [`BatchStats`] hold the batch mean
    /// and biased variance; the caller decides whether to fold them into
    /// running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        stats: BnStats<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 && xs.len() != 4 {
            return Err(Error::shape("batch_norm", format!("input rank {}", xs.len())));
        }
        let (n, c) = (xs[0], xs[1]);
        let s: usize = xs[2..].iter().product();
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape("batch_norm", format!("{c} channels, affine params of len {}", self.value(gamma).numel())));
        }
        let (mean, var, observed) = match stats {
            BnStats::Batch => {
                if n * s < 2 {
                    return Err(Error::InvalidArgument(
                        "batch-norm in training mode needs at least 2 values per channel".into(),
                    ));
                }
                let (m, v) = kernels::channel_moments(self.value(x).data(), n, c, s);
                (m.clone(), v.clone(), Some(BatchStats { mean: m, var: v }))
            }
            BnStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", "running statistics length"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut y = vec![T::zero(); xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let (m, is) = (mean[ch], inv_std[ch]);
                let (gc, bc) = (g[ch].f64(), bt[ch].f64());
                let r = (b * c + ch) * s..(b * c + ch + 1) * s;
                for ((xh, yv), xi) in xhat[r.clone()].iter_mut().zip(&mut y[r.clone()]).zip(&xv[r]) {
                    let h = (xi.f64() - m) * is;
                    *xh = T::of(h);
                    *yv = T::of(gc * h + bc);
                }
            }
        }
        let batch_stats = observed.is_some();
        let rg = self.rg(&[x, gamma, beta]);
        let op = if rg {
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            }
        } else {
            Op::Leaf
        };
        let name = if batch_stats { "batch_norm(train)" } else { "batch_norm(eval)" };
        let out = self.push(Tensor::new(xs, y)?, op, rg, name)?;
        Ok((out, observed))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[x]);
        self.push(y, if rg { Op::Relu { x } } else { Op::Leaf }, rg, "relu")
    }

    /// Non-overlapping `k×k` average pooling; spatial dims must be divisible by `k`.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || k == 0 || xs[2] % k != 0 || xs[3] % k != 0 {
            return Err(Error::shape("avg_pool", format!("input {xs:?}, window {k}")));
        }
        let (oh, ow) = (xs[2] / k, xs[3] / k);
        let planes = xs[0] * xs[1];
        let xv = self.value(x).data();
        let inv = 1.0 / (k * k) as f64;
        let mut y = vec![T::zero(); planes * oh * ow];
        for p in 0..planes {
            let src = &xv[p * xs[2] * xs[3]..];
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0f64;
                    for di in 0..k {
                        for dj in 0..k {
                            acc += src[(i * k + di) * xs[3] + j * k + dj].f64();
                        }
                    }
                    y[(p * oh + i) * ow + j] = T::of(acc * inv);
                }
            }
        }
        let rg = self.rg(&[x]);
        let out = Tensor::new(vec![xs[0], xs[1], oh, ow], y)?;
        self.push(out, if rg { Op::AvgPool { x, k } } else { Op::Leaf }, rg, "avg_pool")
    }

    /// `[N, C, H, W]` → `[N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("input {xs:?}")));
        }
        let s = xs[2] * xs[3];
        let y: Vec<T> = self
            .value(x)
            .data()
            .chunks(s)
            .map(|p| T::of(p.iter().map(|v| v.f64()).sum::<f64>() / s as f64))
            .collect();
        let rg = self.rg(&[x]);
        let out = Tensor::new(vec![xs[0], xs[1]], y)?;
        self.push(out, if rg { Op::GlobalAvgPool { x } } else { Op::Leaf }, rg, "global_avg_pool")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(y, if rg { Op::Reshape { x } } else { Op::Leaf }, rg, "reshape")
    }

    /// `[N, ...]` → `[N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let shape = [v.batch(), v.row_len()];
        self.reshape(x, &shape)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut y = self.value(a).clone();
        y.clear_grad();
        add_into(y.data_mut(), self.value(b).data());
        let rg = self.rg(&[a, b]);
        self.push(y, if rg { Op::Add { a, b } } else { Op::Leaf }, rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let mut y = self.value(a).clone();
        y.clear_grad();
        for (d, s) in y.data_mut().iter_mut().zip(self.value(b).data()) {
            *d -= *s;
        }
        let rg = self.rg(&[a, b]);
        self.push(y, if rg { Op::Sub { a, b } } else { Op::Leaf }, rg, "sub")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let y = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(y, if rg { Op::Scale { x, c } } else { Op::Leaf }, rg, "scale")
    }

    fn aggregate(&mut self, inputs: &[Var], weight: T, name: &'static str) -> Result<Var> {
        if inputs.len() < 2 {
            return Err(Error::InvalidArgument(format!("{name} needs at least two inputs")));
        }
        for &v in &inputs[1..] {
            self.same_shape(name, inputs[0], v)?;
        }
        let mut acc = vec![0.0f64; self.value(inputs[0]).numel()];
        for &v in inputs {
            for (a, x) in acc.iter_mut().zip(self.value(v).data()) {
                *a += x.f64();
            }
        }
        let w = weight.f64();
        let shape = self.value(inputs[0]).shape().to_vec();
        let y = Tensor::new(shape, acc.into_iter().map(|a| T::of(a * w)).collect())?;
        let rg = self.rg(inputs);
        let op = if rg {
            Op::Aggregate {
                inputs: inputs.to_vec(),
                weight,
            }
        } else {
            Op::Leaf
        };
        self.push(y, op, rg, name)
    }

    /// Plain residual aggregation: `Σ inputs`.
    pub fn sum_of(&mut self, inputs: &[Var]) -> Result<Var> {
        self.aggregate(inputs, T::one(), "sum_of")
    }

    /// Convex residual aggregation with fixed weights `1/n`.
    pub fn convex_mean(&mut self, inputs: &[Var]) -> Result<Var> {
        let w = T::of(1.0 / inputs.len().max(1) as f64);
        self.aggregate(inputs, w, "convex_mean")
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        if c.shape() != self.value(x).shape() {
            return Err(Error::shape("mul_const", format!("{:?} vs {:?}", self.value(x).shape(), c.shape())));
        }
        let mut y = self.value(x).clone();
        y.clear_grad();
        for (d, s) in y.data_mut().iter_mut().zip(c.data()) {
            *d *= *s;
        }
        let rg = self.rg(&[x]);
        let op = if rg {
            Op::MulConst {
                x,
                c: c.data().to_vec(),
            }
        } else {
            Op::Leaf
        };
        self.push(y, op, rg, "mul_const")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|v| v.f64()).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(T::of(s)), if rg { Op::SumAll { x } } else { Op::Leaf }, rg, "sum")
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|v| v.f64() * v.f64()).sum();
        let rg = self.rg(&[x]);
        let op = if rg { Op::SumSquares { x } } else { Op::Leaf };
        self.push(Tensor::scalar(T::of(s)), op, rg, "sum_squares")
    }

    /// `Σ_n ‖x_n‖₂` over the rows of `[N, ...]`. The subgradient at a zero row is zero.
    pub fn row_norm_sum(&mut self, x: Var) -> Result<Var> {
        let rl = self.value(x).row_len();
        let norms: Vec<f64> = self
            .value(x)
            .data()
            .chunks(rl)
            .map(|r| r.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt())
            .collect();
        let total: f64 = norms.iter().sum();
        let rg = self.rg(&[x]);
        let op = if rg { Op::RowNormSum { x, norms } } else { Op::Leaf };
        self.push(Tensor::scalar(T::of(total)), op, rg, "row_norm_sum")
    }

    /// Mean softmax cross-entropy of `[N, C]` logits against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.value(logits).shape().to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {ls:?} for {} labels", labels.len()),
            ));
        }
        let (n, c) = (ls[0], ls[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = vec![0.0f64; n * c];
        let mut total = 0.0f64;
        for (i, row) in self.value(logits).data().chunks(c).enumerate() {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
            let mut z = 0.0;
            for (j, v) in row.iter().enumerate() {
                let e = (v.f64() - max).exp();
                probs[i * c + j] = e;
                z += e;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p /= z;
            }
            total += max + z.ln() - row[labels[i]].f64();
        }
        let rg = self.rg(&[logits]);
        let op = if rg {
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            }
        } else {
            Op::Leaf
        };
        self.push(Tensor::scalar(T::of(total / n as f64)), op, rg, "softmax_cross_entropy")
    }

    /// `β·W/σ` with `σ = uᵀ W v` for the matrix view `[shape[0], rest]` of `W`.
    ///
    /// `u` and `v` are treated as constants; the gradient flows through both
    /// `W` and `σ(W)`.
    pub fn spectral_scale(&mut self, w: Var, u: &[f64], v: &[f64], beta: f64) -> Result<(Var, f64)> {
        let wt = self.value(w);
        let rows = wt.shape()[0];
        let cols = wt.numel() / rows;
        if u.len() != rows || v.len() != cols {
            return Err(Error::shape(
                "spectral_scale",
                format!("W as {rows}x{cols}, u {}, v {}", u.len(), v.len()),
            ));
        }
        let sigma = bilinear(wt.data(), rows, cols, u, v);
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::DegenerateSpectrum {
                param: "spectral_scale".into(),
                sigma,
            });
        }
        let f = beta / sigma;
        let y = wt.map(|x| T::of(x.f64() * f));
        let rg = self.rg(&[w]);
        let op = if rg {
            Op::SpectralScale {
                w,
                u: u.to_vec(),
                v: v.to_vec(),
                sigma,
                beta,
            }
        } else {
            Op::Leaf
        };
        Ok((self.push(y, op, rg, "spectral_scale")?, sigma))
    }

    /// Back-propagates from the scalar `loss`, consuming the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop(i, &g, &mut grads)?;
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        op: format!("backward (leaf #{i})"),
                    });
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contribution: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => add_into(existing, &contribution),
            slot => *slot = Some(contribution),
        }
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (x, w) = (*x, *w);
                let xv = self.value(x);
                let wv = self.value(w);
                let (n, din) = (xv.shape()[0], xv.shape()[1]);
                let dout = wv.shape()[0];
                if self.requires_grad(x) {
                    let mut dx = vec![T::zero(); n * din];
                    T::gemm(n, dout, din, T::one(), g, (dout as isize, 1), wv.data(), (din as isize, 1), T::zero(), &mut dx, (din as isize, 1));
                    self.accumulate(grads, x, dx);
                }
                if self.requires_grad(w) {
                    let mut dw = vec![T::zero(); dout * din];
                    T::gemm(dout, n, din, T::one(), g, (1, dout as isize), xv.data(), (din as isize, 1), T::zero(), &mut dw, (din as isize, 1));
                    self.accumulate(grads, w, dw);
                }
                if let Some(b) = *b {
                    if self.requires_grad(b) {
                        self.accumulate(grads, b, column_sums(g, dout));
                    }
                }
            }
            Op::Conv2d { x, w, b, dims, cols } => {
                let d = dims;
                let (o, pl) = (d.out_channels, d.patch_len());
                let np = d.batch * d.out_pixels();
                let gcm = kernels::batch_to_channel_major(g, d.batch, o, d.out_pixels());
                if self.requires_grad(*w) {
                    let mut dw = vec![T::zero(); o * pl];
                    T::gemm(o, np, pl, T::one(), &gcm, (np as isize, 1), cols, (1, np as isize), T::zero(), &mut dw, (pl as isize, 1));
                    self.accumulate(grads, *w, dw);
                }
                if self.requires_grad(*x) {
                    let mut dcols = vec![T::zero(); pl * np];
                    T::gemm(pl, o, np, T::one(), self.value(*w).data(), (1, pl as isize), &gcm, (np as isize, 1), T::zero(), &mut dcols, (np as isize, 1));
                    self.accumulate(grads, *x, kernels::col2im(&dcols, d));
                }
                if let Some(b) = *b {
                    if self.requires_grad(b) {
                        let db = gcm
                            .chunks(np)
                            .map(|r| T::of(r.iter().map(|v| v.f64()).sum()))
                            .collect();
                        self.accumulate(grads, b, db);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = out.shape();
                let (n, c) = (shape[0], shape[1]);
                let s: usize = shape[2..].iter().product();
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for b in 0..n {
                    for ch in 0..c {
                        let r = (b * c + ch) * s..(b * c + ch + 1) * s;
                        for (gv, xh) in g[r.clone()].iter().zip(&xhat[r]) {
                            sum_g[ch] += gv.f64();
                            sum_gx[ch] += gv.f64() * xh.f64();
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let m = (n * s) as f64;
                    let mut dx = vec![T::zero(); g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let gc = gam[ch].f64();
                            let is = inv_std[ch];
                            let r = (b * c + ch) * s..(b * c + ch + 1) * s;
                            for ((d, gv), xh) in dx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r]) {
                                let v = if *batch_stats {
                                    gc * is / m * (m * gv.f64() - sum_g[ch] - xh.f64() * sum_gx[ch])
                                } else {
                                    gc * is * gv.f64()
                                };
                                *d = T::of(v);
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.requires_grad(*gamma) {
                    self.accumulate(grads, *gamma, sum_gx.iter().map(|&v| T::of(v)).collect());
                }
                if self.requires_grad(*beta) {
                    self.accumulate(grads, *beta, sum_g.iter().map(|&v| T::of(v)).collect());
                }
            }
            Op::Relu { x } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(xv, gv)| if *xv > T::zero() { *gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::AvgPool { x, k } => {
                let xs = self.value(*x).shape();
                let (h, w) = (xs[2], xs[3]);
                let (oh, ow) = (h / k, w / k);
                let inv = T::of(1.0 / (k * k) as f64);
                let mut dx = vec![T::zero(); xs.iter().product()];
                for p in 0..xs[0] * xs[1] {
                    for i in 0..h {
                        for j in 0..w {
                            dx[p * h * w + i * w + j] = g[(p * oh + i / k) * ow + j / k] * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GlobalAvgPool { x } => {
                let xs = self.value(*x).shape();
                let s = xs[2] * xs[3];
                let inv = T::of(1.0 / s as f64);
                let mut dx = Vec::with_capacity(xs.iter().product());
                for gv in g {
                    dx.extend(std::iter::repeat_n(*gv * inv, s));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape { x } => self.accumulate(grads, *x, g.to_vec()),
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -*v).collect());
            }
            Op::Scale { x, c } => self.accumulate(grads, *x, g.iter().map(|v| *v * *c).collect()),
            Op::Aggregate { inputs, weight } => {
                let d: Vec<T> = g.iter().map(|v| *v * *weight).collect();
                for &v in inputs {
                    self.accumulate(grads, v, d.clone());
                }
            }
            Op::MulConst { x, c } => {
                self.accumulate(grads, *x, g.iter().zip(c).map(|(a, b)| *a * *b).collect())
            }
            Op::SumAll { x } => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::SumSquares { x } => {
                let two = T::of(2.0) * g[0];
                self.accumulate(grads, *x, self.value(*x).data().iter().map(|v| two * *v).collect());
            }
            Op::RowNormSum { x, norms } => {
                let xv = self.value(*x);
                let rl = xv.row_len();
                let mut dx = vec![T::zero(); xv.numel()];
                for ((row, d), &nrm) in xv.data().chunks(rl).zip(dx.chunks_mut(rl)).zip(norms) {
                    if nrm > 0.0 {
                        let f = g[0].f64() / nrm;
                        for (dv, xv) in d.iter_mut().zip(row) {
                            *dv = T::of(xv.f64() * f);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let n = labels.len();
                let c = probs.len() / n;
                let f = g[0].f64() / n as f64;
                let mut dl: Vec<T> = probs.iter().map(|p| T::of(p * f)).collect();
                for (i, &y) in labels.iter().enumerate() {
                    dl[i * c + y] = T::of((probs[i * c + y] - 1.0) * f);
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::SpectralScale { w, u, v, sigma, beta } => {
                let wv = self.value(*w);
                let rows = u.len();
                let cols = v.len();
                let inner: f64 = g.iter().zip(wv.data()).map(|(a, b)| a.f64() * b.f64()).sum();
                let f = beta / sigma;
                let corr = inner / sigma;
                let mut dw = vec![T::zero(); wv.numel()];
                for r in 0..rows {
                    for c in 0..cols {
                        let k = r * cols + c;
                        dw[k] = T::of(f * (g[k].f64() - corr * u[r] * v[c]));
                    }
                }
                self.accumulate(grads, *w, dw);
            }
        }
        Ok(())
    }
}

fn column_sums<T: Real>(g: &[T], cols: usize) -> Vec<T> {
    let mut acc = vec![0.0f64; cols];
    for row in g.chunks(cols) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v.f64();
        }
    }
    acc.into_iter().map(T::of).collect()
}

/// `uᵀ W v` for row-major `W: [rows, cols]`, in f64.
pub fn bilinear<T: Real>(w: &[T], rows: usize, cols: usize, u: &[f64], v: &[f64]) -> f64 {
    (0..rows)
        .map(|r| {
            u[r] * w[r * cols..(r + 1) * cols]
                .iter()
                .zip(v)
                .map(|(a, b)| a.f64() * b)
                .sum::<f64>()
        })
        .sum()
}

/// Evaluates `graph` on `inputs`, recording a tape when `record` is set.
///
/// Inputs are registered as gradient-requiring leaves in the order given.
pub fn forward_eval<T, F>(graph: F, inputs: &[Tensor<T>], record: bool) -> Result<(Tape<T>, Vec<Var>, Var)>
where
    T: Real,
    F: FnOnce(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = if record { Tape::new() } else { Tape::no_grad() };
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = graph(&mut tape, &vars)?;
    Ok((tape, vars, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn identity_graph_returns_input() {
        let (tape, _, out) = forward_eval(|_, v| Ok(v[0]), &[t(&[2], &[3.0, -1.0])], false).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, -1.0]);
    }

    #[test]
    fn dense_identity_then_relu() {
        let x = t(&[1, 2], &[-1.0, 2.0]);
        let (tape, _, out) = forward_eval(
            |tp, v| {
                let w = tp.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]))?;
                let b = tp.constant(t(&[2], &[0.0, 0.0]))?;
                let h = tp.linear(v[0], w, Some(b))?;
                tp.relu(h)
            },
            &[x],
            false,
        )
        .unwrap();
        assert_eq!(tape.value(out).data(), &[0.0, 2.0]);
    }

    #[test]
    fn squared_norm_gradient_is_two_x() {
        let (mut tape, v, out) = forward_eval(|tp, v| tp.sum_squares(v[0]), &[t(&[2], &[1.0, 2.0])], true).unwrap();
        let g = tape.backward(out).unwrap();
        assert_eq!(g.get(v[0]).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn relu_dead_unit_passes_zero_gradient() {
        for x0 in [-3.0, 0.0] {
            let (mut tape, v, out) = forward_eval(
                |tp, v| {
                    let r = tp.relu(v[0])?;
                    tp.sum(r)
                },
                &[t(&[1], &[x0])],
                true,
            )
            .unwrap();
            let g = tape.backward(out).unwrap();
            assert_eq!(g.get(v[0]).unwrap(), &[0.0]);
        }
    }

    #[test]
    fn fan_out_gradients_add() {
        // f(x) = sum(x) + sum_squares(x): grad = 1 + 2x
        let (mut tape, v, out) = forward_eval(
            |tp, v| {
                let a = tp.sum(v[0])?;
                let b = tp.sum_squares(v[0])?;
                tp.add(a, b)
            },
            &[t(&[3], &[0.5, -1.0, 2.0])],
            true,
        )
        .unwrap();
        let g = tape.backward(out).unwrap();
        assert_eq!(g.get(v[0]).unwrap(), &[2.0, -1.0, 5.0]);
    }

    #[test]
    fn tape_is_single_use() {
        let (mut tape, v, out) = forward_eval(|tp, v| tp.sum(v[0]), &[t(&[2], &[1.0, 2.0])], true).unwrap();
        tape.backward(out).unwrap();
        assert!(matches!(tape.backward(out), Err(Error::TapeConsumed)));
        assert!(matches!(tape.relu(v[0]), Err(Error::TapeConsumed)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let (mut tape, _, out) = forward_eval(|tp, v| tp.relu(v[0]), &[t(&[2], &[1.0, 2.0])], true).unwrap();
        assert!(matches!(tape.backward(out), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn non_finite_forward_names_op() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1], &[1e300]), true).unwrap();
        match tape.sum_squares(x) {
            Err(Error::NonFinite { op }) => assert_eq!(op, "sum_squares"),
            other => panic!("expected NonFinite, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]), true).unwrap();
        assert!(tape.softmax_cross_entropy(x, &[0, 3]).is_err());
        let l = tape.softmax_cross_entropy(x, &[0, 2]).unwrap();
        assert!((tape.value(l).item() - 3f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn convex_mean_uses_one_over_n() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2], &[2.0, 4.0]), true).unwrap();
        let b = tape.leaf(t(&[2], &[0.0, 0.0]), true).unwrap();
        let m = tape.convex_mean(&[a, b]).unwrap();
        assert_eq!(tape.value(m).data(), &[1.0, 2.0]);
        let s = tape.sum(m).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap(), &[0.5, 0.5]);
        assert_eq!(g.get(b).unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 2], &[1.0, 2.0]), true).unwrap();
        let w = tape.leaf(t(&[1, 2], &[3.0, 4.0]), false).unwrap();
        let y = tape.linear(x, w, None).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(w).is_none());
        assert_eq!(g.get(x).unwrap(), &[3.0, 4.0]);
    }
}
