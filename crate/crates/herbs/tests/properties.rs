use herbs::bs::select_topk;
use herbs::neck::{FusionNeck, NeckConfig};
use herbs::net::fuse_predictions;
use herbs::nn::{Activation, ParamBuilder};
use herbs::refinement::kl_softened;
use herbs_tensor::{ChaCha8Rng, ParamStore, Session, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;

/// Scores drawn from a small alphabet so ties are common.
fn scores() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![(-3i32..3).prop_map(f64::from), -5.0..5.0f64], 1..40)
}

fn logits(c: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-8.0..8.0f64, c)
}

fn brute_topk(s: &[f64], k: usize) -> Vec<usize> {
    let mut best = Vec::new();
    let mut taken = vec![false; s.len()];
    for _ in 0..k {
        let mut pick = None;
        for i in 0..s.len() {
            if taken[i] {
                continue;
            }
            match pick {
                Some(p) if s[i] <= s[p] => {}
                _ => pick = Some(i),
            }
        }
        let p = pick.unwrap();
        taken[p] = true;
        best.push(p);
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn selection_matches_brute_force((s, k) in scores().prop_flat_map(|s| { let n = s.len(); (Just(s), 1..=n) })) {
        let sel = select_topk(&s, k).unwrap();
        prop_assert_eq!(&sel.selected, &brute_topk(&s, k));
        let mut all: Vec<usize> = sel.selected.iter().chain(&sel.dropped).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..s.len()).collect::<Vec<_>>());
        prop_assert!(sel.dropped.windows(2).all(|w| w[0] < w[1]));
    }
}

proptest! {
    #[test]
    fn kl_is_nonnegative_and_shift_invariant(
        (p, q) in (2usize..12).prop_flat_map(|c| (logits(c), logits(c))),
        shift in -50.0..50.0f64,
        t in 0.5..256.0f64,
    ) {
        let kl = kl_softened(&p, &q, t);
        prop_assert!(kl >= -1e-12);
        let moved: Vec<f64> = q.iter().map(|x| x + shift).collect();
        prop_assert!((kl_softened(&p, &moved, t) - kl).abs() < 1e-9);
        prop_assert!(kl_softened(&p, &p, t).abs() < 1e-12);
    }

    #[test]
    fn fusion_is_normalized_and_order_free(
        heads in (2usize..20).prop_flat_map(|c| prop::collection::vec(logits(c), 1..10)),
        rot in 0usize..10,
        scale in prop_oneof![Just(1.0), Just(100.0)],
    ) {
        let heads: Vec<Vec<f64>> = heads.into_iter().map(|h| h.into_iter().map(|x| x * scale).collect()).collect();
        let refs: Vec<&[f64]> = heads.iter().map(|h| h.as_slice()).collect();
        let p = fuse_predictions(&refs).unwrap();
        prop_assert!(p.iter().all(|x| x.is_finite() && *x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);

        let mut shuffled = refs.clone();
        shuffled.rotate_left(rot % refs.len());
        shuffled.reverse();
        prop_assert_eq!(fuse_predictions(&shuffled).unwrap(), p.clone());

        let c = heads[0].len();
        let sums: Vec<f64> = (0..c).map(|j| heads.iter().map(|h| h[j]).sum()).collect();
        let m = sums.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = sums.iter().map(|s| (s - m).exp()).sum();
        for (a, s) in p.iter().zip(&sums) {
            prop_assert!((a - (s - m).exp() / z).abs() < 1e-12);
        }
    }
}

fn linear_neck(seed: u64) -> (ParamStore, FusionNeck) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = NeckConfig { dim: 6, activation: Activation::Identity, bias: false };
    let neck = FusionNeck::new(&mut ParamBuilder::new(&mut store, &mut rng), &[3, 5, 7], cfg);
    (store, neck)
}

fn stage_tensors(values: &[f64]) -> Vec<Tensor> {
    let mut it = values.iter().cycle().copied();
    [(3, 8), (5, 4), (7, 2)].iter().map(|&(c, s)| Tensor::from_fn([1, c, s, s], |_| it.next().unwrap())).collect()
}

fn run_neck(store: &ParamStore, neck: &FusionNeck, stages: &[Tensor]) -> Vec<Tensor> {
    let tape = Tape::new();
    let sess = Session::frozen(&tape, store);
    let vars: Vec<_> = stages.iter().map(|t| sess.input(t.clone())).collect();
    let f = neck.forward(&sess, &vars).unwrap();
    f.top_down.iter().chain(&f.bottom_up).map(|v| (*v.value()).clone()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn bias_free_identity_neck_is_linear(
        a in prop::collection::vec(-1.0..1.0f64, 17),
        b in prop::collection::vec(-1.0..1.0f64, 13),
        alpha in -3.0..3.0f64,
        seed in 0u64..1000,
    ) {
        let (store, neck) = linear_neck(seed);
        let (xa, xb) = (stage_tensors(&a), stage_tensors(&b));
        let mixed: Vec<Tensor> = xa.iter().zip(&xb).map(|(p, q)| p.zip_map(q, |u, v| alpha * u + v)).collect();
        let (ya, yb, ym) = (run_neck(&store, &neck, &xa), run_neck(&store, &neck, &xb), run_neck(&store, &neck, &mixed));
        let sizes = [8, 4, 2, 8, 4, 2];
        for (i, ((p, q), m)) in ya.iter().zip(&yb).zip(&ym).enumerate() {
            prop_assert_eq!(m.shape(), &[1, 6, sizes[i], sizes[i]]);
            for ((u, v), w) in p.data().iter().zip(q.data()).zip(m.data()) {
                prop_assert!((alpha * u + v - w).abs() < 1e-9);
            }
        }
    }
}
