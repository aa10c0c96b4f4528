use proptest::prelude::*;
use rtransfer_core::checkpoint::{decode, encode, CheckpointMeta};
use rtransfer_core::data::{stratified_subset, synth_blobs, BlobSpec};
use rtransfer_core::optim::Schedule;
use rtransfer_core::{Aggregation, ArchSpec, Network, Split, Tensor};

fn arch(family: u8, depth: usize, classes: usize) -> ArchSpec {
    match family {
        0 => ArchSpec::mlp(depth, 6, classes, 12),
        1 => ArchSpec::small_cnn(depth + 1, 1, classes, [1, 8, 8]),
        _ => ArchSpec::mini_resnet(depth + 2, 1, classes, [2, 8, 8]),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn subset_takes_an_equal_share_of_every_class(
        classes in 2usize..8,
        per_class in 1usize..30,
        fraction in 0.05f64..=1.0,
        seed in any::<u64>(),
    ) {
        let ds = synth_blobs(
            &BlobSpec { classes, per_class, dims: classes, separation: 0.3, noise: 0.05, seed },
            Split::Train,
        )
        .unwrap();
        let want = (fraction * ds.len() as f64 / classes as f64).floor() as usize;
        match stratified_subset(&ds, fraction, seed) {
            Ok(sub) => {
                prop_assert_eq!(sub.class_counts(), vec![want; classes]);
                let rows: Vec<&[f32]> = ds.images.data().chunks(classes).collect();
                for (row, label) in sub.images.data().chunks(classes).zip(&sub.labels) {
                    let hit = rows.iter().zip(&ds.labels).any(|(r, l)| *r == row && l == label);
                    prop_assert!(hit);
                }
            }
            Err(_) => prop_assert_eq!(want, 0),
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact(
        family in 0u8..3,
        depth in 2usize..5,
        classes in 2usize..6,
        seed in any::<u64>(),
        k_frac in 0.0f64..1.0,
        convex in any::<bool>(),
    ) {
        let a = arch(family, depth, classes);
        let mut net = Network::<f32>::build(&a, seed).unwrap();
        let l = net.num_blocks();
        let k = 1 + ((l - 1) as f64 * k_frac) as usize;
        net.split(k).unwrap();
        if convex {
            let sub = net.submodel_range();
            net.set_aggregation(sub, Aggregation::Convex);
        }
        let meta = CheckpointMeta::describe(&net, "transfer", seed);
        let bytes = encode(&net, &meta).unwrap();
        let (back, meta2) = decode::<f32>(&bytes).unwrap();
        prop_assert!(back.state_bits_eq(&net));
        prop_assert_eq!(&meta2, &meta);
        prop_assert_eq!(back.split_index(), net.split_index());
        let mut shape = vec![3];
        shape.extend(a.input);
        let n: usize = shape.iter().product();
        let x = Tensor::new(shape, (0..n).map(|i| ((i * 7919) % 97) as f32 / 97.0).collect()).unwrap();
        prop_assert!(back.logits(&x).unwrap().bits_eq(&net.logits(&x).unwrap()));
        prop_assert_eq!(encode(&back, &meta2).unwrap(), bytes);
    }

    #[test]
    fn learning_rate_never_increases(total in 1usize..200, a in 0usize..200, b in 0usize..200) {
        let s = Schedule::scaled(total);
        let (lo, hi) = (a.min(b) % total, a.max(b) % total);
        let (lo, hi) = (lo.min(hi), lo.max(hi));
        prop_assert!(s.lr_at(hi).unwrap() <= s.lr_at(lo).unwrap());
    }
}
