//! Block-structured networks and the extractor / sub-model split.
//!
//! A network is an ordered list of `L` blocks. Fine-tuning the last `k`
//! blocks splits it at `L − k`: blocks before the split form the frozen
//! feature extractor, blocks from the split on form the sub-model.

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv2d, Dense, ForwardCtx, Layer, Param};
use crate::rng::{stream, RngState};
use crate::tensor::{argmax_rows, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Mlp,
    SmallCnn,
    MiniResnet,
}

/// Architecture descriptor; together with a seed it fully determines initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub family: Family,
    /// Number of blocks `L`.
    pub depth: usize,
    /// Width multiplier (hidden units for `mlp`, 8·width base channels otherwise).
    pub width: usize,
    pub classes: usize,
    /// `[C, H, W]` of one input.
    pub input: [usize; 3],
}

impl ArchSpec {
    pub fn mlp(depth: usize, hidden: usize, classes: usize, input_dim: usize) -> Self {
        ArchSpec {
            family: Family::Mlp,
            depth,
            width: hidden,
            classes,
            input: [1, 1, input_dim],
        }
    }

    pub fn small_cnn(depth: usize, width: usize, classes: usize, input: [usize; 3]) -> Self {
        ArchSpec {
            family: Family::SmallCnn,
            depth,
            width,
            classes,
            input,
        }
    }

    pub fn mini_resnet(depth: usize, width: usize, classes: usize, input: [usize; 3]) -> Self {
        ArchSpec {
            family: Family::MiniResnet,
            depth,
            width,
            classes,
            input,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Sum,
    /// Convex combination with fixed weights `1/n`.
    Convex,
}

#[derive(Clone, Debug)]
pub struct Residual<T: Real> {
    pub main: Vec<Layer<T>>,
    /// Empty for an identity shortcut.
    pub shortcut: Vec<Layer<T>>,
    pub aggregation: Aggregation,
}

/// One fine-tuning unit.
#[derive(Clone, Debug)]
pub enum Block<T: Real> {
    Plain(Vec<Layer<T>>),
    /// `relu(aggregate(main(x), shortcut(x)))`
    Residual(Residual<T>),
}

fn run_layers<T: Real>(layers: &[Layer<T>], tape: &mut Tape<T>, mut x: Var, ctx: &mut ForwardCtx<'_>) -> Result<Var> {
    for layer in layers {
        x = layer.forward(tape, x, ctx)?;
    }
    Ok(x)
}

impl<T: Real> Block<T> {
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, ctx: &mut ForwardCtx<'_>) -> Result<Var> {
        match self {
            Block::Plain(layers) => run_layers(layers, tape, x, ctx),
            Block::Residual(r) => {
                let main = run_layers(&r.main, tape, x, ctx)?;
                let short = run_layers(&r.shortcut, tape, x, ctx)?;
                let agg = match r.aggregation {
                    Aggregation::Sum => tape.sum_of(&[main, short])?,
                    Aggregation::Convex => tape.convex_mean(&[main, short])?,
                };
                tape.relu(agg)
            }
        }
    }

    pub fn layers(&self) -> Box<dyn Iterator<Item = &Layer<T>> + '_> {
        match self {
            Block::Plain(l) => Box::new(l.iter()),
            Block::Residual(r) => Box::new(r.main.iter().chain(r.shortcut.iter())),
        }
    }

    pub fn layers_mut(&mut self) -> Box<dyn Iterator<Item = &mut Layer<T>> + '_> {
        match self {
            Block::Plain(l) => Box::new(l.iter_mut()),
            Block::Residual(r) => Box::new(r.main.iter_mut().chain(r.shortcut.iter_mut())),
        }
    }

    pub fn aggregation(&self) -> Option<Aggregation> {
        match self {
            Block::Plain(_) => None,
            Block::Residual(r) => Some(r.aggregation),
        }
    }

    fn cast<U: Real>(&self) -> Block<U> {
        match self {
            Block::Plain(l) => Block::Plain(l.iter().map(|x| x.cast()).collect()),
            Block::Residual(r) => Block::Residual(Residual {
                main: r.main.iter().map(|x| x.cast()).collect(),
                shortcut: r.shortcut.iter().map(|x| x.cast()).collect(),
                aggregation: r.aggregation,
            }),
        }
    }
}

/// Output of a forward pass over a block range.
pub struct Trace {
    pub output: Var,
    /// Output of each block in the range, in order.
    pub block_outputs: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Network<T: Real = f32> {
    arch: ArchSpec,
    blocks: Vec<Block<T>>,
    split_index: usize,
    /// Split `k` the network was pinned to by feature-distance source training.
    pub fdm_k: Option<usize>,
}

impl<T: Real> Network<T> {
    /// Builds and initializes a network (Kaiming fan-in weights; BN γ=1, β=0, μ=0, σ²=1).
    pub fn build(arch: &ArchSpec, seed: u64) -> Result<Self> {
        if arch.classes < 1 || arch.width < 1 || arch.input.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("degenerate architecture {arch:?}")));
        }
        let mut rng = RngState::derive(seed, &[stream::INIT]);
        let blocks = match arch.family {
            Family::Mlp => build_mlp(arch, &mut rng)?,
            Family::SmallCnn => build_small_cnn(arch, &mut rng)?,
            Family::MiniResnet => build_mini_resnet(arch, &mut rng)?,
        };
        debug_assert_eq!(blocks.len(), arch.depth);
        Ok(Network {
            arch: arch.clone(),
            blocks,
            split_index: 0,
            fdm_k: None,
        })
    }

    /// Assembles a network from explicit blocks (for hand-built models).
    pub fn from_blocks(arch: ArchSpec, blocks: Vec<Block<T>>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::Config("network needs at least one block".into()));
        }
        Ok(Network {
            arch: ArchSpec {
                depth: blocks.len(),
                ..arch
            },
            blocks,
            split_index: 0,
            fdm_k: None,
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    pub fn blocks(&self) -> &[Block<T>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Block<T>] {
        &mut self.blocks
    }

    /// First block of the sub-model (`L − k`).
    pub fn split_index(&self) -> usize {
        self.split_index
    }

    /// Number of fine-tuned blocks `k`.
    pub fn k(&self) -> usize {
        self.blocks.len() - self.split_index
    }

    /// Splits at `L − k`, freezing every extractor parameter and unfreezing the sub-model.
    pub fn split(&mut self, k: usize) -> Result<()> {
        let l = self.blocks.len();
        if k == 0 || k > l {
            return Err(Error::InvalidArgument(format!(
                "fine-tuned block count k={k} outside 1..={l}"
            )));
        }
        self.split_index = l - k;
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let trainable = i >= l - k;
            for layer in block.layers_mut() {
                for p in layer.params_mut() {
                    p.trainable = trainable;
                }
            }
        }
        Ok(())
    }

    pub fn extractor(&self) -> &[Block<T>] {
        &self.blocks[..self.split_index]
    }

    pub fn submodel(&self) -> &[Block<T>] {
        &self.blocks[self.split_index..]
    }

    pub fn extractor_range(&self) -> Range<usize> {
        0..self.split_index
    }

    pub fn submodel_range(&self) -> Range<usize> {
        self.split_index..self.blocks.len()
    }

    /// Runs blocks `range` on `x`.
    pub fn forward_range(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        range: Range<usize>,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Trace> {
        if range.end > self.blocks.len() || range.start > range.end {
            return Err(Error::InvalidArgument(format!(
                "block range {range:?} of {} blocks",
                self.blocks.len()
            )));
        }
        let mut out = x;
        let mut block_outputs = Vec::with_capacity(range.len());
        for block in &self.blocks[range] {
            out = block.forward(tape, out, ctx)?;
            block_outputs.push(out);
        }
        Ok(Trace {
            output: out,
            block_outputs,
        })
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, ctx: &mut ForwardCtx<'_>) -> Result<Trace> {
        self.check_input(tape.value(x).shape())?;
        self.forward_range(tape, x, 0..self.blocks.len(), ctx)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let expected = &self.arch.input;
        if shape.len() != 4 || shape[1..] != expected[..] {
            return Err(Error::shape(
                "network input",
                format!("got {shape:?}, expected [N, {}, {}, {}]", expected[0], expected[1], expected[2]),
            ));
        }
        Ok(())
    }

    /// Inference-mode logits, evaluated in chunks of at most `chunk` rows.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        const CHUNK: usize = 256;
        let n = x.batch();
        let mut data = Vec::with_capacity(n * self.arch.classes);
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let mut tape = Tape::no_grad();
            let xv = tape.leaf(x.rows(start, end)?, false)?;
            let mut ctx = ForwardCtx::eval();
            let tr = self.forward(&mut tape, xv, &mut ctx)?;
            data.extend_from_slice(tape.value(tr.output).data());
            start = end;
        }
        let c = data.len() / n;
        Tensor::new(vec![n, c], data)
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?))
    }

    /// Every learnable parameter, in block order.
    pub fn params(&self) -> Vec<&Param<T>> {
        self.blocks
            .iter()
            .flat_map(|b| b.layers().flat_map(|l| l.params()))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.layers_mut().flat_map(|l| l.params_mut()))
            .collect()
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params().into_iter().find(|p| p.name == name)
    }

    pub fn batch_norms(&self) -> Vec<(usize, &BatchNorm<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            for l in b.layers() {
                if let Layer::BatchNorm(bn) = l {
                    out.push((i, bn));
                }
            }
        }
        out
    }

    pub fn batch_norms_mut(&mut self) -> Vec<(usize, &mut BatchNorm<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for l in b.layers_mut() {
                if let Layer::BatchNorm(bn) = l {
                    out.push((i, bn));
                }
            }
        }
        out
    }

    /// Folds observed batch statistics into the named layers' running statistics.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats)]) {
        if updates.is_empty() {
            return;
        }
        let by_name: HashMap<&str, &BatchStats> = updates.iter().map(|(n, s)| (n.as_str(), s)).collect();
        for (_, bn) in self.batch_norms_mut() {
            if let Some(s) = by_name.get(bn.name.as_str()) {
                bn.update_running(s);
            }
        }
    }

    /// Named state tensors: all parameters and BN running statistics, in a fixed order.
    pub fn state(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for b in &self.blocks {
            for l in b.layers() {
                for p in l.params() {
                    out.push((p.name.clone(), &p.value));
                }
                if let Layer::BatchNorm(bn) = l {
                    out.push((bn.running_mean_name(), &bn.running_mean));
                    out.push((bn.running_var_name(), &bn.running_var));
                }
            }
        }
        out
    }

    pub fn state_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            for l in b.layers_mut() {
                if let Layer::BatchNorm(bn) = l {
                    let (mn, vn) = (bn.running_mean_name(), bn.running_var_name());
                    out.push((bn.gamma.name.clone(), &mut bn.gamma.value));
                    out.push((bn.beta.name.clone(), &mut bn.beta.value));
                    out.push((mn, &mut bn.running_mean));
                    out.push((vn, &mut bn.running_var));
                } else {
                    for p in l.params_mut() {
                        out.push((p.name.clone(), &mut p.value));
                    }
                }
            }
        }
        out
    }

    /// Bitwise equality of every state tensor.
    pub fn state_bits_eq(&self, other: &Network<T>) -> bool {
        let a = self.state();
        let b = other.state();
        a.len() == b.len() && a.iter().zip(&b).all(|((na, ta), (nb, tb))| na == nb && ta.bits_eq(tb))
    }

    pub fn set_aggregation(&mut self, range: Range<usize>, mode: Aggregation) {
        for b in &mut self.blocks[range] {
            if let Block::Residual(r) = b {
                r.aggregation = mode;
            }
        }
    }

    /// Indices of blocks using convex aggregation.
    pub fn convex_blocks(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| b.aggregation() == Some(Aggregation::Convex))
            .map(|(i, _)| i)
            .collect()
    }

    /// Dense layer of the last block.
    pub fn head(&self) -> Option<&Dense<T>> {
        self.blocks.last()?.layers().find_map(|l| match l {
            Layer::Dense(d) => Some(d),
            _ => None,
        })
    }

    /// Replaces the classifier with a freshly initialized one for `classes` outputs.
    pub fn reinit_head(&mut self, classes: usize, seed: u64) -> Result<()> {
        let mut rng = RngState::derive(seed, &[stream::HEAD]);
        let last = self.blocks.last_mut().expect("nonempty network");
        let dense = last
            .layers_mut()
            .find_map(|l| match l {
                Layer::Dense(d) => Some(d),
                _ => None,
            })
            .ok_or_else(|| Error::Config("last block has no dense classifier".into()))?;
        let prefix = dense
            .weight
            .name
            .strip_suffix(".weight")
            .unwrap_or("head")
            .to_string();
        let trainable = dense.weight.trainable;
        let mut fresh = Dense::new(&prefix, dense.in_dim(), classes, &mut rng);
        fresh.weight.trainable = trainable;
        fresh.bias.trainable = trainable;
        *dense = fresh;
        self.arch.classes = classes;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            arch: self.arch.clone(),
            blocks: self.blocks.iter().map(|b| b.cast()).collect(),
            split_index: self.split_index,
            fdm_k: self.fdm_k,
        }
    }

    /// Shape of one sample at the output of block `index − 1` (the input shape for index 0).
    pub fn feature_shape(&self, index: usize) -> Result<Vec<usize>> {
        let [c, h, w] = self.arch.input;
        let mut tape = Tape::<T>::no_grad();
        let x = tape.leaf(Tensor::zeros(&[2, c, h, w]), false)?;
        let mut ctx = ForwardCtx::eval();
        let tr = self.forward_range(&mut tape, x, 0..index, &mut ctx)?;
        Ok(tape.value(tr.output).shape()[1..].to_vec())
    }
}

fn conv_bn_relu<T: Real>(prefix: &str, cin: usize, cout: usize, stride: usize, rng: &mut RngState) -> Vec<Layer<T>> {
    vec![
        Layer::Conv(Conv2d::new(&format!("{prefix}.l0"), cin, cout, 3, stride, 1, false, rng)),
        Layer::BatchNorm(BatchNorm::new(&format!("{prefix}.l1"), cout)),
        Layer::Relu,
    ]
}

fn build_mlp<T: Real>(arch: &ArchSpec, rng: &mut RngState) -> Result<Vec<Block<T>>> {
    if arch.depth < 1 {
        return Err(Error::Config("mlp depth must be at least 1".into()));
    }
    let mut dim: usize = arch.input.iter().product();
    let mut blocks = Vec::with_capacity(arch.depth);
    for i in 0..arch.depth - 1 {
        let mut layers = Vec::new();
        if i == 0 {
            layers.push(Layer::Flatten);
        }
        layers.push(Layer::Dense(Dense::new(&format!("b{i}.l{}", layers.len()), dim, arch.width, rng)));
        layers.push(Layer::Relu);
        blocks.push(Block::Plain(layers));
        dim = arch.width;
    }
    let h = arch.depth - 1;
    let mut head = Vec::new();
    if arch.depth == 1 {
        head.push(Layer::Flatten);
    }
    head.push(Layer::Dense(Dense::new(&format!("b{h}.l{}", head.len()), dim, arch.classes, rng)));
    blocks.push(Block::Plain(head));
    Ok(blocks)
}

fn build_small_cnn<T: Real>(arch: &ArchSpec, rng: &mut RngState) -> Result<Vec<Block<T>>> {
    if arch.depth < 2 {
        return Err(Error::Config("small-cnn depth must be at least 2".into()));
    }
    let [mut ch, mut h, mut w] = arch.input;
    let mut width = 8 * arch.width;
    let mut blocks = Vec::with_capacity(arch.depth);
    for i in 0..arch.depth - 1 {
        let mut layers = conv_bn_relu(&format!("b{i}"), ch, width, 1, rng);
        ch = width;
        if i % 2 == 1 && h % 2 == 0 && w % 2 == 0 && h >= 4 && w >= 4 {
            layers.push(Layer::AvgPool(2));
            h /= 2;
            w /= 2;
            width = (width * 2).min(32 * arch.width);
        }
        blocks.push(Block::Plain(layers));
    }
    let hd = arch.depth - 1;
    blocks.push(Block::Plain(vec![
        Layer::Flatten,
        Layer::Dense(Dense::new(&format!("b{hd}.l1"), ch * h * w, arch.classes, rng)),
    ]));
    Ok(blocks)
}

fn build_mini_resnet<T: Real>(arch: &ArchSpec, rng: &mut RngState) -> Result<Vec<Block<T>>> {
    if arch.depth < 3 {
        return Err(Error::Config("mini-resnet depth must be at least 3".into()));
    }
    let [cin, mut h, mut w] = arch.input;
    let mut ch = 8 * arch.width;
    let mut blocks = vec![Block::Plain(conv_bn_relu("b0", cin, ch, 1, rng))];
    let residual = arch.depth - 2;
    let downsample: Vec<usize> = if residual >= 3 {
        vec![residual / 3, 2 * residual / 3]
    } else {
        Vec::new()
    };
    for r in 0..residual {
        let i = r + 1;
        let p = format!("b{i}");
        let (stride, out) = if downsample.contains(&r) && h >= 4 && w >= 4 {
            (2, ch * 2)
        } else {
            (1, ch)
        };
        let conv_a = Conv2d::new(&format!("{p}.m0"), ch, out, 3, stride, 1, false, rng);
        let (nh, nw) = conv_a
            .output_hw(h, w)
            .ok_or_else(|| Error::Config(format!("input too small at block {i}")))?;
        let main = vec![
            Layer::Conv(conv_a),
            Layer::BatchNorm(BatchNorm::new(&format!("{p}.m1"), out)),
            Layer::Relu,
            Layer::Conv(Conv2d::new(&format!("{p}.m3"), out, out, 3, 1, 1, false, rng)),
            Layer::BatchNorm(BatchNorm::new(&format!("{p}.m4"), out)),
        ];
        let shortcut = if stride != 1 || out != ch {
            vec![
                Layer::Conv(Conv2d::new(&format!("{p}.s0"), ch, out, 1, stride, 0, false, rng)),
                Layer::BatchNorm(BatchNorm::new(&format!("{p}.s1"), out)),
            ]
        } else {
            Vec::new()
        };
        blocks.push(Block::Residual(Residual {
            main,
            shortcut,
            aggregation: Aggregation::Sum,
        }));
        ch = out;
        h = nh;
        w = nw;
    }
    let hd = arch.depth - 1;
    blocks.push(Block::Plain(vec![
        Layer::GlobalAvgPool,
        Layer::Dense(Dense::new(&format!("b{hd}.l1"), ch, arch.classes, rng)),
    ]));
    Ok(blocks)
}
