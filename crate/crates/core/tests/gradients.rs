mod common;

use common::cases::layer_cases;
use rtransfer_core::attack::input_gradient;
use rtransfer_core::autograd::Tape;
use rtransfer_core::gradcheck::{finite_diff_check, GradCheckOptions};
use rtransfer_core::layers::ForwardCtx;
use rtransfer_core::rng::RngState;
use rtransfer_core::{ArchSpec, BnMode, Network, Tensor};

#[test]
fn every_layer_type_matches_central_differences() {
    for (name, case) in layer_cases() {
        let worst = (0..100).map(|seed| case(seed).max_rel_error).fold(0.0, f64::max);
        assert!(worst < 1e-3, "{name}: max relative error {worst:e}");
    }
}

fn input_batch(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = RngState::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap()
}

#[test]
fn whole_networks_differentiate_with_respect_to_inputs() {
    let archs = [
        ArchSpec::mlp(3, 6, 3, 5),
        ArchSpec::small_cnn(3, 1, 3, [1, 8, 8]),
        ArchSpec::mini_resnet(4, 1, 3, [1, 8, 8]),
    ];
    for (i, arch) in archs.iter().enumerate() {
        for mode in [BnMode::Train, BnMode::Eval] {
            let net = Network::<f64>::build(arch, i as u64).unwrap();
            let mut shape = vec![3];
            shape.extend(arch.input);
            let x = input_batch(&shape, 40 + i as u64);
            let labels = [0, 1, 2];
            let r = finite_diff_check(
                |tp: &mut Tape<f64>, v| {
                    let mut ctx = ForwardCtx::new(mode, false);
                    let out = net.forward(tp, v[0], &mut ctx)?.output;
                    tp.softmax_cross_entropy(out, &labels)
                },
                &[x.clone()],
                GradCheckOptions::default(),
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-3, "{:?} {mode:?}: {r:?}", arch.family);
            let (_, g) = input_gradient(&net, &x, &labels, mode).unwrap();
            assert_eq!(g.len(), x.numel());
        }
    }
}
