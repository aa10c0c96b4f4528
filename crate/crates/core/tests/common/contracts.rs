//! Bit-exact equivalences and freeze contracts over short toy runs.

use std::collections::BTreeMap;

use rtransfer_core::attack::{fgsm, pgd, AttackConfig};
use rtransfer_core::data::{synth_glyphs, GlyphSpec};
use rtransfer_core::rng::RngState;
use rtransfer_core::train::{train_adversarial, train_source_fdm, train_standard};
use rtransfer_core::transfer::{
    lwf_finetune, neft_finetune, vanilla_finetune, AffinePolicy, BnPolicy, StatsPolicy,
};
use rtransfer_core::{
    ArchSpec, Dataset, FdmConfig, Network, Split, Tensor, TrainConfig, TransferConfig, TransferMode,
};

pub type Check = (String, bool);

fn glyphs(per_class: usize, seed: u64) -> Dataset {
    synth_glyphs(
        &GlyphSpec {
            per_class,
            side: 16,
            noise: 0.15,
            seed,
        },
        Split::Train,
    )
    .unwrap()
}

fn archs() -> [ArchSpec; 2] {
    [
        ArchSpec::small_cnn(4, 1, 5, [1, 16, 16]),
        ArchSpec::mini_resnet(5, 1, 5, [1, 16, 16]),
    ]
}

fn train_cfg(seed: u64) -> TrainConfig {
    let mut c = TrainConfig::new(2, seed);
    c.batch_size = 20;
    c
}

/// `fdm(λ=0) ≡ adversarial`, `lwf(λ_d=0) ≡ vanilla k=L`, `adversarial(ε=0) ≡ standard`,
/// `PGD(N=1, no start, α=ε) ≡ FGSM`, each on both architecture families.
pub fn equivalence_checks() -> Vec<Check> {
    let src = glyphs(12, 1).select_classes(&[0, 1, 2, 3, 4]).unwrap();
    let tgt = glyphs(12, 2).select_classes(&[5, 6, 7, 8, 9]).unwrap();
    let attack = AttackConfig::pgd(0.1, 0.025, 3);
    let mut out = Vec::new();
    for arch in archs() {
        let fam = format!("{:?}", arch.family);
        let cfg = train_cfg(4);
        let init = Network::<f32>::build(&arch, 8).unwrap();

        let mut fdm = init.clone();
        let mut at = init.clone();
        train_source_fdm(&mut fdm, &src, &attack, &FdmConfig::new(0.0, 2), &cfg).unwrap();
        train_adversarial(&mut at, &src, &attack, &cfg).unwrap();
        out.push((format!("{fam}: feature-distance training with λ=0 equals adversarial training"), fdm.state_bits_eq(&at)));

        let mut zero = init.clone();
        let mut std = init.clone();
        train_adversarial(&mut zero, &src, &AttackConfig::pgd(0.0, 0.01, 3), &cfg).unwrap();
        train_standard(&mut std, &src, &cfg).unwrap();
        out.push((format!("{fam}: adversarial training with ε=0 equals standard training"), zero.state_bits_eq(&std)));

        let l = init.num_blocks();
        let lwf = lwf_finetune(&std, &tgt, &TransferConfig::new(TransferMode::Lwf, l, cfg.clone())).unwrap();
        let van = vanilla_finetune(&std, &tgt, &TransferConfig::new(TransferMode::Vanilla, l, cfg.clone())).unwrap();
        out.push((format!("{fam}: LwF with λ_d=0 equals vanilla fine-tuning of all blocks"), lwf.net.state_bits_eq(&van.net)));

        let x = src.gather(&(0..16).collect::<Vec<_>>()).unwrap();
        let one_step = AttackConfig {
            random_start: false,
            ..AttackConfig::pgd(0.1, 0.1, 1)
        };
        let p = pgd(&at, &x.0, &x.1, &one_step, &mut RngState::new(0)).unwrap();
        let f = fgsm(&at, &x.0, &x.1, &AttackConfig::fgsm(0.1)).unwrap();
        out.push((format!("{fam}: one-step PGD without random start equals FGSM"), p.bits_eq(&f)));
    }
    out
}

fn snapshot(net: &Network<f32>) -> BTreeMap<String, Tensor<f32>> {
    net.state().into_iter().map(|(n, t)| (n, t.clone())).collect()
}

fn unchanged(before: &BTreeMap<String, Tensor<f32>>, after: &Network<f32>, names: &[String]) -> bool {
    let now = snapshot(after);
    !names.is_empty() && names.iter().all(|n| before[n].bits_eq(&now[n]))
}

fn changed(before: &BTreeMap<String, Tensor<f32>>, after: &Network<f32>, names: &[String]) -> bool {
    let now = snapshot(after);
    !names.is_empty() && names.iter().all(|n| !before[n].bits_eq(&now[n]))
}

/// Names of state tensors grouped by role for a network split at `L − k`.
struct Groups {
    extractor_params: Vec<String>,
    extractor_stats: Vec<String>,
    submodel_affine: Vec<String>,
    submodel_stats: Vec<String>,
}

fn groups(net: &Network<f32>, k: usize) -> Groups {
    let split = net.num_blocks() - k;
    let mut g = Groups {
        extractor_params: Vec::new(),
        extractor_stats: Vec::new(),
        submodel_affine: Vec::new(),
        submodel_stats: Vec::new(),
    };
    for (block, bn) in net.batch_norms() {
        let stats = [bn.running_mean_name(), bn.running_var_name()];
        let affine = [bn.gamma.name.clone(), bn.beta.name.clone()];
        if block < split {
            g.extractor_stats.extend(stats);
        } else {
            g.submodel_stats.extend(stats);
            g.submodel_affine.extend(affine);
        }
    }
    for block in &net.blocks()[..split] {
        for layer in block.layers() {
            g.extractor_params.extend(layer.params().iter().map(|p| p.name.clone()));
        }
    }
    g
}

/// Frozen tensors stay bit-identical across full fine-tuning runs; the
/// forbidden policy is rejected.
pub fn freeze_checks() -> Vec<Check> {
    let tgt = glyphs(12, 2).select_classes(&[5, 6, 7, 8, 9]).unwrap();
    let mut out = Vec::new();
    for arch in archs() {
        let fam = format!("{:?}", arch.family);
        let mut source = Network::<f32>::build(&arch, 3).unwrap();
        train_standard(&mut source, &glyphs(12, 1).select_classes(&[0, 1, 2, 3, 4]).unwrap(), &train_cfg(1)).unwrap();
        let before = snapshot(&source);
        let k = 2;
        let g = groups(&source, k);

        let van = vanilla_finetune(&source, &tgt, &TransferConfig::new(TransferMode::Vanilla, k, train_cfg(5))).unwrap();
        out.push((format!("{fam}: vanilla keeps extractor weights"), unchanged(&before, &van.net, &g.extractor_params)));
        out.push((format!("{fam}: frozen-stats policy keeps extractor running statistics"), unchanged(&before, &van.net, &g.extractor_stats)));
        out.push((format!("{fam}: frozen-affine policy keeps sub-model BN affine"), unchanged(&before, &van.net, &g.submodel_affine)));
        out.push((format!("{fam}: sub-model running statistics update"), changed(&before, &van.net, &g.submodel_stats)));

        let mut open = TransferConfig::new(TransferMode::Vanilla, k, train_cfg(5));
        open.bn_policy = BnPolicy {
            extractor_stats: StatsPolicy::Updating,
            submodel_affine: AffinePolicy::Trainable,
            ..BnPolicy::default()
        };
        let opened = vanilla_finetune(&source, &tgt, &open).unwrap();
        out.push((format!("{fam}: updating policy moves extractor statistics but not weights"),
            changed(&before, &opened.net, &g.extractor_stats) && unchanged(&before, &opened.net, &g.extractor_params)));
        out.push((format!("{fam}: trainable-affine policy moves sub-model BN affine"), changed(&before, &opened.net, &g.submodel_affine)));

        let mut neft_cfg = TransferConfig::new(TransferMode::Neft, k, train_cfg(5));
        neft_cfg.beta = 0.6;
        neft_cfg.bn_policy.submodel_affine = AffinePolicy::Trainable;
        let neft = neft_finetune(&source, &tgt, &neft_cfg).unwrap();
        out.push((format!("{fam}: NEFT keeps sub-model BN affine even when asked to train it"), unchanged(&before, &neft.net, &g.submodel_affine)));
        out.push((format!("{fam}: NEFT keeps extractor weights"), unchanged(&before, &neft.net, &g.extractor_params)));

        let lwf = lwf_finetune(&source, &tgt, &{
            let mut c = TransferConfig::new(TransferMode::Lwf, k, train_cfg(5));
            c.lambda_d = 0.1;
            c
        })
        .unwrap();
        let all: Vec<String> = before.keys().cloned().collect();
        out.push((format!("{fam}: LwF leaves the source snapshot untouched"), unchanged(&before, &source, &all)));
        out.push((format!("{fam}: LwF trains every block"), lwf.k == source.num_blocks()));

        let mut bad = TransferConfig::new(TransferMode::Vanilla, k, train_cfg(5));
        bad.bn_policy.submodel_stats = StatsPolicy::Frozen;
        let err = vanilla_finetune(&source, &tgt, &bad).err().map(|e| e.to_string()).unwrap_or_default();
        out.push((format!("{fam}: freezing sub-model statistics is rejected"), err.contains("hard to converge")));
    }
    out
}

/// Checkpoint round trips preserve outputs bit-exactly, corruption is
/// detected, and a 10% stratified subset of 100 examples holds one per class.
pub fn persistence_checks(dir: &std::path::Path) -> Vec<Check> {
    use rtransfer_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
    use rtransfer_core::data::{stratified_subset, synth_blobs, BlobSpec};

    let tgt = glyphs(12, 2).select_classes(&[5, 6, 7, 8, 9]).unwrap();
    let probe = glyphs(4, 9).images;
    let mut out = Vec::new();
    for arch in archs() {
        let fam = format!("{:?}", arch.family);
        let source = Network::<f32>::build(&arch, 6).unwrap();
        let mut cfg = TransferConfig::new(TransferMode::Neft, 3, train_cfg(2));
        cfg.beta = 0.4;
        let o = neft_finetune(&source, &tgt, &cfg).unwrap();
        let mut meta = CheckpointMeta::describe(&o.net, "transfer", 2);
        meta.beta = Some(0.4);
        meta.baked = true;
        let path = dir.join(format!("{fam}.ckpt"));
        save_checkpoint(&o.net, &meta, &path).unwrap();
        let (back, meta2) = load_checkpoint(&path).unwrap();
        let same = back.logits(&probe).unwrap().bits_eq(&o.net.logits(&probe).unwrap())
            && back.state_bits_eq(&o.net)
            && meta2 == meta
            && back.convex_blocks() == o.net.convex_blocks();
        out.push((format!("{fam}: save/load preserves logits, state and metadata bit-exactly"), same));

        let resaved = dir.join(format!("{fam}.again.ckpt"));
        save_checkpoint(&back, &meta2, &resaved).unwrap();
        out.push((format!("{fam}: re-saving a loaded checkpoint is byte-identical"),
            std::fs::read(&path).unwrap() == std::fs::read(&resaved).unwrap()));

        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
        let bad = dir.join(format!("{fam}.bad.ckpt"));
        std::fs::write(&bad, &bytes).unwrap();
        let err = load_checkpoint(&bad).err().map(|e| e.to_string()).unwrap_or_default();
        out.push((format!("{fam}: a flipped payload bit fails the checksum"), err.contains("checksum")));
    }

    let fixture = synth_blobs(
        &BlobSpec {
            classes: 10,
            per_class: 10,
            dims: 10,
            separation: 0.3,
            noise: 0.05,
            seed: 1,
        },
        Split::Train,
    )
    .unwrap();
    let sub = stratified_subset(&fixture, 0.1, 3).unwrap();
    out.push(("stratified 10% of 100 examples over 10 classes keeps exactly one per class".into(),
        fixture.len() == 100 && sub.len() == 10 && sub.class_counts() == vec![1; 10]));
    out
}
