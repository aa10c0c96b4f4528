//! Seeded random instances of every differentiable layer type.

use rtransfer_core::autograd::{BnStats, Tape, Var};
use rtransfer_core::gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};
use rtransfer_core::rng::RngState;
use rtransfer_core::{Result, Tensor};

fn rand_tensor(shape: &[usize], rng: &mut RngState) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Reduces `y` to a scalar through fixed random weights so no gradient is trivially zero.
fn project(tp: &mut Tape<f64>, y: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = RngState::new(rng_seed ^ 0x5eed);
    let shape = tp.value(y).shape().to_vec();
    let w = rand_tensor(&shape, &mut rng);
    let z = tp.mul_const(y, &w)?;
    tp.sum(z)
}

fn check(seed: u64, inputs: Vec<Tensor<f64>>, graph: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> GradCheckReport {
    let opts = GradCheckOptions {
        step: 1e-6,
        ..Default::default()
    };
    let r = finite_diff_check(graph, &inputs, opts).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
    assert!(r.checked > 0, "seed {seed}: every coordinate excluded");
    r
}

fn dense(seed: u64) -> GradCheckReport {
    let mut rng = RngState::new(seed);
    let (n, i, o) = (1 + rng.below(4), 1 + rng.below(6), 1 + rng.below(5));
    let inputs = vec![rand_tensor(&[n, i], &mut rng), rand_tensor(&[o, i], &mut rng), rand_tensor(&[o], &mut rng)];
    check(seed, inputs, |tp, v| {
        let y = tp.linear(v[0], v[1], Some(v[2]))?;
        project(tp, y, seed)
    })
}

fn conv(seed: u64) -> GradCheckReport {
    let mut rng = RngState::new(seed);
    let (n, c, co) = (1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(3));
    let k = [1, 3][rng.below(2)];
    let stride = 1 + rng.below(2);
    let pad = rng.below(2);
    let hw = k + rng.below(4);
    let inputs = vec![
        rand_tensor(&[n, c, hw, hw], &mut rng),
        rand_tensor(&[co, c, k, k], &mut rng),
        rand_tensor(&[co], &mut rng),
    ];
    check(seed, inputs, move |tp, v| {
        let y = tp.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
        project(tp, y, seed)
    })
}

fn bn_shape(rng: &mut RngState) -> Vec<usize> {
    let n = 2 + rng.below(3);
    let c = 1 + rng.below(3);
    if rng.below(2) == 0 {
        vec![n, c]
    } else {
        vec![n, c, 1 + rng.below(3), 1 + rng.below(3)]
    }
}

fn bn_train(seed: u64) -> GradCheckReport {
    let mut rng = RngState::new(seed);
    let shape = bn_shape(&mut rng);
    let c = shape[1];
    let inputs = vec![rand_tensor(&shape, &mut rng), rand_tensor(&[c], &mut rng), rand_tensor(&[c], &mut rng)];
    check(seed, inputs, |tp, v| {
        let (y, _) = tp.batch_norm(v[0], v[1], v[2], 1e-5, BnStats::Batch)?;
        project(tp, y, seed)
    })
}

fn bn_eval(seed: u64) -> GradCheckReport {
    let mut rng = RngState::new(seed);
    let shape = bn_shape(&mut rng);
    let c = shape[1];
    let mean: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
    let var: Vec<f64> = (0..c).map(|_| rng.uniform(0.1, 2.0)).collect();
    let inputs = vec![rand_tensor(&shape, &mut rng), rand_tensor(&[c], &mut rng), rand_tensor(&[c], &mut rng)];
    check(seed, inputs, move |tp, v| {
        let (y, _) = tp.batch_norm(v[0], v[1], v[2], 1e-5, BnStats::Running { mean: &mean, var: &var })?;
        project(tp, y, seed)
    })
}

fn relu(seed: u64) -> GradCheckReport {
    let mut rng = RngState::new(seed);
    let shape = [1 + rng.below(3), 1 + rng.below(8)];
    check(seed, vec![rand_tensor(&shape, &mut rng)], |tp, v| {
        let y = tp.relu(v[0])?;
        project(tp, y, seed)
    })
}

fn pool(seed: u64) -> GradCheckReport {
    let mut rng = RngState::new(seed);
    let k = 1 + rng.below(3);
    let shape = [1 + rng.below(2), 1 + rng.below(2), k * (1 + rng.below(2)), k * (1 + rng.below(2))];
    let global = rng.below(2) == 0;
    check(seed, vec![rand_tensor(&shape, &mut rng)], move |tp, v| {
        let y = if global { tp.global_avg_pool(v[0])? } else { tp.avg_pool(v[0], k)? };
        project(tp, y, seed)
    })
}

/// `½(relu(x Wᵀ) + x Sᵀ)`: a two-branch block with convex aggregation.
fn residual_convex(seed: u64) -> GradCheckReport {
    let mut rng = RngState::new(seed);
    let (n, d) = (1 + rng.below(3), 1 + rng.below(5));
    let inputs = vec![rand_tensor(&[n, d], &mut rng), rand_tensor(&[d, d], &mut rng), rand_tensor(&[d, d], &mut rng)];
    check(seed, inputs, |tp, v| {
        let main = tp.linear(v[0], v[1], None)?;
        let main = tp.relu(main)?;
        let short = tp.linear(v[0], v[2], None)?;
        let y = tp.convex_mean(&[main, short])?;
        project(tp, y, seed)
    })
}

fn softmax_ce(seed: u64) -> GradCheckReport {
    let mut rng = RngState::new(seed);
    let (n, c) = (1 + rng.below(4), 2 + rng.below(5));
    let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
    let mut logits = rand_tensor(&[n, c], &mut rng);
    logits.data_mut().iter_mut().for_each(|z| *z *= 3.0);
    check(seed, vec![logits], move |tp, v| tp.softmax_cross_entropy(v[0], &labels))
}

/// `(layer type, seeded instance)` pairs covering every differentiable op family.
pub fn layer_cases() -> Vec<(&'static str, fn(u64) -> GradCheckReport)> {
    vec![
        ("dense", dense),
        ("conv", conv),
        ("bn-train", bn_train),
        ("bn-eval", bn_eval),
        ("relu", relu),
        ("pool", pool),
        ("residual-convex", residual_convex),
        ("softmax-ce", softmax_ce),
    ]
}

/// Outcome of running PGD-100 against an exhaustive grid on a 2-input model.
pub struct GridComparison {
    /// Fraction of points where PGD reaches at least 95% of the grid maximum.
    pub fraction_within: f64,
    /// Smallest PGD/grid loss ratio seen.
    pub worst_ratio: f64,
    /// Largest violation of the ε-box or `[0, 1]` by any adversarial point.
    pub max_violation: f64,
}

/// Trains a 2-input MLP on blobs, attacks 100 test points and compares each
/// final loss with the maximum over a 101×101 grid of the feasible box.
pub fn pgd_against_grid(seed: u64, attack: &rtransfer_core::attack::AttackConfig) -> GridComparison {
    use rtransfer_core::attack::pgd;
    use rtransfer_core::data::{synth_blobs, BlobSpec};
    use rtransfer_core::train::train_standard;
    use rtransfer_core::{ArchSpec, Network, Split, TrainConfig};

    let spec = BlobSpec {
        classes: 2,
        per_class: 200,
        dims: 2,
        separation: 0.35,
        noise: 0.12,
        seed,
    };
    let train = synth_blobs(&spec, Split::Train).unwrap();
    let test = synth_blobs(&BlobSpec { per_class: 50, ..spec }, Split::Test).unwrap();
    let mut net = Network::<f32>::build(&ArchSpec::mlp(3, 16, 2, 2), seed).unwrap();
    let mut cfg = TrainConfig::new(10, seed);
    cfg.batch_size = 32;
    train_standard(&mut net, &train, &cfg).unwrap();
    let net = net.cast::<f64>();

    let x = test.images.cast::<f64>();
    let epsilon = attack.epsilon;
    let adv = pgd(&net, &x, &test.labels, attack, &mut RngState::new(seed)).unwrap();

    let n = test.len();
    let mut within = 0;
    let mut worst_ratio = f64::INFINITY;
    let mut max_violation = 0.0f64;
    for i in 0..n {
        let p = &x.data()[2 * i..2 * i + 2];
        let a = &adv.data()[2 * i..2 * i + 2];
        for d in 0..2 {
            max_violation = max_violation
                .max((a[d] - p[d]).abs() - epsilon)
                .max(-a[d])
                .max(a[d] - 1.0);
        }
        let y = test.labels[i];
        let loss = |u: f64, v: f64| {
            let z = net.logits(&Tensor::new(vec![1, 1, 1, 2], vec![u, v]).unwrap()).unwrap();
            super::cross_entropy(z.data(), y)
        };
        let lo = [(p[0] - epsilon).max(0.0), (p[1] - epsilon).max(0.0)];
        let hi = [(p[0] + epsilon).min(1.0), (p[1] + epsilon).min(1.0)];
        let best = super::grid_max(lo, hi, 101, loss);
        let ratio = loss(a[0], a[1]) / best;
        worst_ratio = worst_ratio.min(ratio);
        if ratio >= 0.95 {
            within += 1;
        }
    }
    GridComparison {
        fraction_within: within as f64 / n as f64,
        worst_ratio,
        max_violation: max_violation.max(0.0),
    }
}
