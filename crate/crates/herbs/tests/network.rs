use herbs::backbone::{extract_stages, ImageBatch};
use herbs::gradcheck::{gradcheck_net, GradcheckConfig};
use herbs::net::{ForwardOptions, HerbsConfig, HerbsNet, Variant};
use herbs::refinement::{kl_softened, RefinementMode};
use herbs::HerbsError;
use herbs_tensor::{ChaCha8Rng, Session, Tape, Tensor};
use rand::{Rng, SeedableRng};

fn batch(b: usize, size: usize, classes: usize, seed: u64) -> ImageBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = Tensor::from_fn([b, 3, size, size], |_| rng.gen_range(-1.0..1.0));
    let labels = (0..b).map(|i| i % classes).collect();
    ImageBatch::new(pixels, (0..b).map(|i| format!("img{i}")).collect(), Some(labels)).unwrap()
}

#[test]
fn full_model_bundle_contract() {
    let net = HerbsNet::new(HerbsConfig { num_classes: 10, ..HerbsConfig::tiny(10) }).unwrap();
    let (bundle, losses) = net.forward(&batch(2, 32, 10, 1), 0).unwrap();
    assert_eq!(bundle.heads().len(), 9);
    for h in bundle.heads() {
        assert_eq!(h.shape(), &[2, 10]);
    }
    for r in 0..2 {
        assert!((bundle.fused.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    assert!((losses.recomposed() - losses.loss_herbs).abs() < 1e-10);
    let w = net.cfg.weights;
    let bs = w.merged * losses.loss_m + w.dropped * losses.loss_d + w.layer * losses.loss_l;
    assert!((bs - losses.loss_bs).abs() < 1e-10);
}

#[test]
fn zero_weights_leave_only_merged_loss() {
    let mut cfg = HerbsConfig::tiny(5);
    cfg.lambda_r = 0.0;
    cfg.weights.dropped = 0.0;
    cfg.weights.layer = 0.0;
    let net = HerbsNet::new(cfg).unwrap();
    let (_, l) = net.forward(&batch(2, 32, 5, 2), 0).unwrap();
    assert_eq!(l.loss_herbs, l.loss_m);
}

#[test]
fn refinement_loss_tracks_the_epoch_temperature() {
    let net = HerbsNet::new(HerbsConfig::tiny(5)).unwrap();
    let b = batch(2, 32, 5, 3);
    let (bundle, l0) = net.forward(&b, 0).unwrap();
    let (_, l10) = net.forward(&b, 10).unwrap();
    assert_eq!((l0.temperature, l10.temperature), (64.0, 32.0));
    for (losses, t) in [(l0, 64.0), (l10, 32.0)] {
        let mut expect = 0.0;
        for (td, bu) in bundle.td_logits.iter().zip(&bundle.bu_logits) {
            for r in 0..2 {
                expect += kl_softened(bu.row(r), td.row(r), t) / 2.0;
            }
        }
        expect /= 4.0;
        assert!((losses.loss_r - expect).abs() < 1e-12, "{} vs {expect}", losses.loss_r);
    }
    assert_eq!(l0.loss_bs, l10.loss_bs);
}

#[test]
fn variant_head_counts_and_losses() {
    let b = batch(2, 32, 5, 4);
    for v in Variant::LADDER {
        let net = HerbsNet::new(HerbsConfig::tiny(5).with_variant(v)).unwrap();
        assert_eq!(net.num_heads(), v.head_count(4), "{v}");
        let (bundle, l) = net.forward(&b, 0).unwrap();
        assert_eq!(bundle.heads().len(), v.head_count(4));
        assert!((l.recomposed() - l.loss_herbs).abs() < 1e-12);
        if v != Variant::E {
            assert_eq!((l.loss_r, l.loss_bs), (0.0, 0.0));
        }
    }
    let c = HerbsNet::new(HerbsConfig::tiny(5).with_variant(Variant::C)).unwrap();
    let (bundle, l) = c.forward(&b, 0).unwrap();
    let labels = b.labels.as_ref().unwrap();
    let ce = |t: &Tensor| -> f64 {
        (0..2)
            .map(|r| {
                let row = t.row(r);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                lse - row[labels[r]]
            })
            .sum::<f64>()
            / 2.0
    };
    let mean: f64 = bundle.bu_logits.iter().map(ce).sum::<f64>() / 4.0;
    assert!((l.loss_heads - mean).abs() < 1e-12);
}

#[test]
fn variant_a_is_the_plain_backbone_classifier() {
    let net = HerbsNet::new(HerbsConfig::tiny(5).with_variant(Variant::A)).unwrap();
    let b = batch(2, 32, 5, 5);
    let out = net.predict(&b).unwrap();
    let tape = Tape::new();
    let sess = Session::frozen(&tape, &net.store);
    let stages = extract_stages(&sess, net.arch.backbone.as_ref(), &b).unwrap();
    let head = net.arch.final_head.as_ref().unwrap();
    let direct = head.forward(&sess, stages.stages[3].global_avg_pool()).value();
    assert_eq!(out.bundle.other_logits[0].data(), direct.data());
}

#[test]
fn inference_never_reads_labels() {
    let net = HerbsNet::new(HerbsConfig::tiny(5)).unwrap();
    let mut b = batch(2, 32, 5, 6);
    let with = net.predict(&b).unwrap();
    b.labels = Some(vec![999, 999]);
    let garbage = net.predict(&b).unwrap();
    b.labels = None;
    let without = net.predict(&b).unwrap();
    assert_eq!(with.bundle.fused.data(), without.bundle.fused.data());
    assert_eq!(garbage.bundle.fused.data(), without.bundle.fused.data());
    assert!(matches!(net.forward(&b, 0), Err(HerbsError::MissingLabels)));
}

#[test]
fn refinement_wiring() {
    let e = HerbsNet::new(HerbsConfig::tiny(5)).unwrap();
    assert_eq!(e.arch.refinement.as_ref().unwrap().pairs.len(), 4);
    let a = HerbsNet::new(HerbsConfig::tiny(5).with_variant(Variant::A)).unwrap();
    let basic = a.attach_refinement(RefinementMode::Basic).unwrap();
    assert_eq!(basic.arch.refinement.as_ref().unwrap().pairs.len(), 1);
    let (_, l) = basic.forward(&batch(2, 32, 5, 7), 0).unwrap();
    assert!(l.loss_r > 0.0);

    let mut one = HerbsConfig::tiny(5).with_variant(Variant::A);
    one.backbone.num_stages = 1;
    let net = HerbsNet::new(one).unwrap();
    assert!(matches!(net.attach_refinement(RefinementMode::Basic), Err(HerbsError::MissingHeads(_))));
    let a = HerbsNet::new(HerbsConfig::tiny(5).with_variant(Variant::A)).unwrap();
    assert!(a.attach_refinement(RefinementMode::Full).is_err());
}

#[test]
fn basic_suppression_variant_runs() {
    let mut cfg = HerbsConfig::tiny(5).with_variant(Variant::BasicSuppression);
    cfg.top_k = vec![1];
    let net = HerbsNet::new(cfg).unwrap();
    let (bundle, l) = net.forward(&batch(2, 64, 5, 8), 0).unwrap();
    assert_eq!(bundle.heads().len(), 2);
    assert!(l.loss_d > 0.0 && l.loss_m > 0.0);
}

#[test]
fn forward_is_deterministic() {
    let a = HerbsNet::new(HerbsConfig::tiny(5)).unwrap();
    let b = HerbsNet::new(HerbsConfig::tiny(5)).unwrap();
    let x = batch(2, 32, 5, 9);
    let (pa, la) = a.forward(&x, 3).unwrap();
    let (pb, lb) = b.forward(&x, 3).unwrap();
    assert_eq!(pa.fused.data(), pb.fused.data());
    assert_eq!(la, lb);
}

#[test]
fn frozen_selection_replays() {
    let net = HerbsNet::new(HerbsConfig::tiny(5)).unwrap();
    let x = batch(2, 32, 5, 10);
    let base = net.run(&net.store, &x, ForwardOptions { with_loss: true, ..Default::default() }).unwrap();
    let again = net
        .run(&net.store, &x, ForwardOptions { with_loss: true, frozen: Some(&base.replay), ..Default::default() })
        .unwrap();
    assert_eq!(base.losses, again.losses);
    assert_eq!(base.replay, again.replay);
}

#[test]
fn gradients_match_finite_differences_on_every_module() {
    let net = HerbsNet::new(HerbsConfig::tiny(5)).unwrap();
    let report = gradcheck_net(&net, &batch(2, 32, 5, 11), GradcheckConfig::default()).unwrap();
    println!("{}", report.to_text());
    assert!(report.weights.len() >= 20);
    assert!(report.modules.iter().all(|m| m.checked > 0));
    assert!(report.passed, "max rel error {}", report.max_rel_error);
}

#[test]
fn gradient_check_holds_across_seeds_and_variants() {
    for seed in 0..4 {
        for v in [Variant::E, Variant::D, Variant::BasicRefinement] {
            let mut cfg = HerbsConfig::tiny(5).with_variant(v);
            cfg.seed = seed;
            let net = HerbsNet::new(cfg).unwrap();
            let gc = GradcheckConfig { samples: 40, seed, epoch: 3 * seed, ..Default::default() };
            let report = gradcheck_net(&net, &batch(2, 32, 5, 100 + seed), gc).unwrap();
            assert!(report.passed, "variant {v} seed {seed}:\n{}", report.to_text());
        }
    }
}

#[test]
fn adapter_backbone_drives_the_full_model() {
    use herbs::backbone::{AdapterBackbone, BackboneHandle};
    use herbs::nn::{Conv2d, ParamBuilder};
    use herbs_tensor::ParamStore;
    use std::sync::Arc;

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut b = ParamBuilder::new(&mut store, &mut rng);
    let mut convs = Vec::new();
    let mut prev = 3;
    for (i, c) in [8, 8, 16, 16].into_iter().enumerate() {
        convs.push(Conv2d::new(&mut b.scope(&format!("ad{i}")), "conv", prev, c, 3, 2, 1, true));
        prev = c;
    }
    let blocks = convs.iter().map(|c| c.params()).collect();
    let bad = AdapterBackbone::new("x", vec![8, 8], vec![4, 2], vec![], Box::new(|_, _| Ok(vec![])));
    assert!(matches!(bad, Err(HerbsError::InvalidConfig(_))));
    let adapter = AdapterBackbone::new(
        "convs",
        vec![8, 8, 16, 16],
        vec![2, 4, 8, 16],
        blocks,
        Box::new(move |sess, x| {
            let mut x = x;
            Ok(convs
                .iter()
                .map(|c| {
                    x = c.forward(sess, x).relu();
                    x
                })
                .collect())
        }),
    )
    .unwrap();
    let backbone_params = store.num_scalars();
    let net = HerbsNet::with_backbone(HerbsConfig::tiny(4), BackboneHandle::new(Arc::new(adapter), store)).unwrap();
    assert!(net.num_parameters() > backbone_params);
    let (bundle, losses) = net.forward(&batch(2, 32, 4, 9), 0).unwrap();
    assert_eq!(bundle.heads().len(), 9);
    assert!(losses.loss_herbs.is_finite());
}
