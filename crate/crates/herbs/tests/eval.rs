use herbs::eval::{
    evaluate, false_true_counts, false_true_rate, generic_class_report, mask_for_input, read_dump, render_heatmap,
    save_heatmap, top_k_accuracy, write_dump, EvalOptions, EvalReport, HeatSource, PredictionRecord,
};
use herbs::train::{RunConfig, Trainer};
use proptest::prelude::*;

/// Random dump whose scores come from a small set so ties are common.
fn dump_strategy() -> impl Strategy<Value = (Vec<PredictionRecord>, usize)> {
    (2usize..=10).prop_flat_map(|c| {
        let rec = (0..c, prop::collection::vec(0u8..4, c), 0..c, 0..c).prop_map(move |(label, s, td, bu)| {
            let fused: Vec<f64> = s.iter().map(|&v| v as f64).collect();
            let fused_pred = brute_rank(&fused, 0);
            PredictionRecord { label, fused, fused_pred, td_pred: Some(td), bu_pred: Some(bu), ..Default::default() }
        });
        (prop::collection::vec(rec, 1..=50), Just(c))
    })
}

/// Class at rank `r`: the one with exactly `r` classes ahead of it.
fn brute_rank(scores: &[f64], r: usize) -> usize {
    (0..scores.len())
        .find(|&c| {
            (0..scores.len()).filter(|&o| scores[o] > scores[c] || (scores[o] == scores[c] && o < c)).count() == r
        })
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn top_k_matches_brute_force((dump, c) in dump_strategy(), k in 1usize..=10) {
        let k = k.min(c);
        let hits = dump.iter().filter(|r| (0..k).any(|i| brute_rank(&r.fused, i) == r.label)).count();
        prop_assert_eq!(top_k_accuracy(&dump, k).unwrap(), 100.0 * hits as f64 / dump.len() as f64);
    }

    #[test]
    fn generic_report_matches_brute_force((dump, c) in dump_strategy(), groups in 1usize..4, threshold in 0usize..3) {
        let map: Vec<usize> = (0..c).map(|f| f % groups).collect();
        let names: Vec<String> = (0..groups).map(|g| format!("g{g}")).collect();
        let report = generic_class_report(&dump, &map, &names, threshold).unwrap();
        let mut expected = Vec::new();
        for g in 0..groups {
            let cats = map.iter().filter(|&&x| x == g).count();
            let mine: Vec<&PredictionRecord> = dump.iter().filter(|r| map[r.label] == g).collect();
            if cats <= threshold || mine.is_empty() {
                continue;
            }
            let correct = mine.iter().filter(|r| r.fused_pred == r.label).count();
            let fp = mine.iter().filter(|r| map[r.fused_pred] != g).count();
            expected.push((g, mine.len(), 100.0 * correct as f64 / mine.len() as f64, fp));
        }
        prop_assert_eq!(report.rows.len(), expected.len());
        for (row, (g, num, pr, fp)) in report.rows.iter().zip(&expected) {
            prop_assert_eq!(&row.name, &names[*g]);
            prop_assert_eq!((row.num, row.precision, row.fp), (*num, *pr, *fp));
        }
        if let Some(avg) = report.average {
            let n = expected.len() as f64;
            prop_assert!((avg.precision - expected.iter().map(|e| e.2).sum::<f64>() / n).abs() < 1e-12);
            prop_assert!((avg.fp - expected.iter().map(|e| e.3 as f64).sum::<f64>() / n).abs() < 1e-12);
        }
    }

    #[test]
    fn false_true_matches_brute_force((dump, _c) in dump_strategy()) {
        let labels: Vec<usize> = dump.iter().map(|r| r.label).collect();
        let td: Vec<usize> = dump.iter().map(|r| r.td_pred.unwrap()).collect();
        let bu: Vec<usize> = dump.iter().map(|r| r.bu_pred.unwrap()).collect();
        let mut ft = 0;
        let mut ff = 0;
        for i in 0..labels.len() {
            match (td[i] == labels[i], bu[i] == labels[i]) {
                (false, true) => ft += 1,
                (false, false) => ff += 1,
                _ => {}
            }
        }
        let counts = false_true_counts(&td, &bu, &labels).unwrap();
        prop_assert_eq!((counts.false_true, counts.false_false), (ft, ff));
        let rate = false_true_rate(&td, &bu, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&rate));
        if ft + ff > 0 {
            prop_assert_eq!(rate, ft as f64 / (ft + ff) as f64);
        } else {
            prop_assert_eq!(rate, 0.0);
        }
        // Swapping the paths swaps the roles of right and wrong top-down answers.
        let swapped = false_true_counts(&bu, &td, &labels).unwrap();
        let bu_wrong_td_right = (0..labels.len()).filter(|&i| bu[i] != labels[i] && td[i] == labels[i]).count();
        prop_assert_eq!(swapped.false_true, bu_wrong_td_right);
        prop_assert_eq!(swapped.false_false, ff);
    }
}

#[test]
fn crafted_false_true_rate() {
    let labels = [1, 1, 1, 1];
    assert_eq!(false_true_rate(&[0, 0, 0, 0], &[1, 1, 1, 0], &labels).unwrap(), 0.75);
}

#[test]
fn six_record_enumeration() {
    // td/bu outcome pairs: (wrong, right) x2, (wrong, wrong) x1, (right, *) x3.
    let labels = [0, 1, 2, 3, 4, 5];
    let td = [9, 9, 9, 3, 4, 5];
    let bu = [0, 1, 9, 9, 4, 9];
    let c = false_true_counts(&td, &bu, &labels).unwrap();
    assert_eq!((c.false_true, c.false_false), (2, 1));
    assert!((c.rate - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn trained_model_dump_report_and_heat_maps() {
    let cfg = RunConfig::default();
    let split = cfg.load_data().unwrap();
    let mut t = Trainer::new(cfg.build_net(split.train.num_classes()).unwrap(), cfg.train).unwrap();
    t.fit(&split.train, |_, _| Ok(())).unwrap();
    let aug = cfg.train.augment();

    let dump = evaluate(&t.net, &split.test, &aug, EvalOptions { batch_size: 16, selections: true }).unwrap();
    assert_eq!(dump.len(), split.test.len());
    let r = &dump[0];
    assert_eq!((r.td_logits.len(), r.bu_logits.len()), (4, 4));
    assert!(r.comb_logits.is_some() && r.background_tanh.is_some());
    assert_eq!(r.selected.as_ref().unwrap().iter().map(Vec::len).collect::<Vec<_>>(), cfg.model.top_k);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dump.jsonl");
    write_dump(&path, &dump).unwrap();
    assert_eq!(read_dump(&path).unwrap(), dump);

    let mut names = split.test.generic_names.clone();
    names.iter_mut().for_each(|n| n.push('!'));
    let report = EvalReport::build("e", &dump, &split.test.fine_to_generic, &names, 1).unwrap();
    assert_eq!(report.generic.rows.len(), 5);
    assert!(report.false_true.is_some());
    assert_eq!(report.heads.len(), 9);
    let text = report.to_text();
    assert!(text.contains("average") && text.contains("false-true"));

    // Trained on planted patches, the heat map is brighter on the patch than off it.
    let (mut inside, mut outside) = (0.0, 0.0);
    for sample in &split.test.samples {
        let (hm, view) = render_heatmap(&t.net, &sample.image, &aug, HeatSource::MaxScore).unwrap();
        assert_eq!((hm.height, hm.width), (32, 32));
        let lo = hm.response.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = hm.response.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo == 0.0 && (hi == 1.0 || hi == 0.0));
        let mask = mask_for_input(sample.mask.as_ref().unwrap(), 32, 32, &aug);
        let (a, b) = hm.region_means(&mask);
        inside += a;
        outside += b;
        if sample.id == split.test.samples[0].id {
            let files = save_heatmap(&hm, &view, dir.path(), &sample.id).unwrap();
            assert!(files[0].ends_with(format!("{}_max_score.png", sample.id)));
            assert!(files.iter().all(|f| f.exists()));
        }
    }
    assert!(inside > outside, "inside {inside} vs outside {outside}");
}
