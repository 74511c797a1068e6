use std::collections::BTreeSet;

use geotrec_core::corpus::{build_histories, split, SplitMode, SplitSpec};
use geotrec_core::evaluation::*;
use geotrec_core::model::{Architecture, BackboneConfig, ModelState, VariantConfig};
use geotrec_core::synth::{generate, SynthConfig};
use geotrec_core::training::{train, TrainConfig, TrainData};
use proptest::prelude::*;

fn case(user: usize, target: usize, filtered: Vec<usize>) -> EvalCase {
    EvalCase { user: user.to_string(), input: vec![], input_gt: None, target, target_gt: None, filtered }
}

#[test]
fn popularity_scorer_matches_hand_counts() {
    // Popularity 5 > 4 > 3 > ...: item j has score 10 - j, so its rank is j + 1.
    let scorer = StaticScorer((0..10).map(|j| 10.0 - j as f64).collect());
    let cases: Vec<EvalCase> = [0, 1, 4, 9].iter().enumerate().map(|(u, &t)| case(u, t, vec![])).collect();
    let (ranked, m) = evaluate_cases(&scorer, &cases, &[1, 5, 10], true).unwrap();
    assert_eq!(ranked.iter().map(|r| r.rank).collect::<Vec<_>>(), vec![1, 2, 5, 10]);
    assert_eq!(m[0].hr, 0.25);
    assert_eq!(m[1].hr, 0.75);
    assert_eq!(m[2].hr, 1.0);
    let want5 = (1.0 + 1.0 / 3f64.log2() + 1.0 / 6f64.log2()) / 4.0;
    assert!((m[1].ndcg - want5).abs() < 1e-15);
    assert_eq!(m[0].coverage, Some(0.1));
    assert_eq!(m[1].coverage, Some(0.5));
}

#[test]
fn filtering_removes_items_ahead_of_the_target() {
    let scorer = StaticScorer((0..10).map(|j| 10.0 - j as f64).collect());
    let (ranked, _) = evaluate_cases(&scorer, &[case(0, 4, vec![0, 1, 4, 7])], &[1], false).unwrap();
    assert_eq!(ranked[0].rank, 3);
    assert_eq!(ranked[0].top, vec![2]);
}

#[test]
fn ties_break_by_index() {
    let r = rank_scores(&[1.0, 2.0, 2.0, 2.0], 2, &[], 4).unwrap();
    assert_eq!(r.rank, 2);
    assert_eq!(r.top, vec![1, 2, 3, 0]);
    assert!(rank_scores(&[1.0, f64::NAN], 0, &[], 2).is_err());
}

#[test]
fn metric_helpers() {
    assert_eq!(ndcg_from_rank(11, 10), 0.0);
    assert_eq!(hr_at_k(&[3, 1, 2], 2, 2), 0.0);
    assert_eq!(hr_at_k(&[3, 1, 2], 1, 2), 1.0);
    assert!((ndcg_at_k(&[3, 1, 2], 1, 3) - 1.0 / 3f64.log2()).abs() < 1e-15);
    assert_eq!(coverage_at_k(&[vec![0, 1], vec![1, 2]], 4, 1), 0.5);
}

#[test]
fn improvement_table_flags_zero_baselines() {
    let rep = |name: &str, hr1: f64| MetricsReport {
        variant: name.into(),
        split_mode: SplitMode::General,
        with_context: false,
        n_users: 3,
        metrics: vec![KMetrics { k: 1, hr: hr1, ndcg: hr1, coverage: Some(0.2) }],
    };
    let t = improvement_table(&[rep("M", 0.1)], &rep("Baseline", 0.0));
    let hr1 = t.columns.iter().position(|c| c == "HR@1").unwrap();
    assert_eq!(t.rows[0].1[hr1], Cell::ZeroBaseline);
    let cov = t.columns.iter().position(|c| c == "Coverage@1").unwrap();
    assert_eq!(t.rows[0].1[cov], Cell::Pct(0.0));
    let n5 = t.columns.iter().position(|c| c == "NDCG@5").unwrap();
    assert_eq!(t.rows[0].1[n5], Cell::Missing);
    assert!(t.to_csv().lines().count() >= 2);
    assert!(t.to_text().contains("M"));
    assert_eq!(improvement_pct(1.0, 0.0), None);
}

#[test]
fn full_catalog_cutoff_is_a_certain_hit_and_context_toggles() {
    let ds = generate(&SynthConfig { n_users: 40, n_items: 60, dim: 8, ..SynthConfig::default() }).unwrap();
    let gt = ds.gt_source();
    let sp = split(&build_histories(&ds.log, 200), &SplitSpec::default()).unwrap();
    let cfg = TrainConfig {
        variant: VariantConfig::new(Architecture::MetaGt),
        backbone: BackboneConfig { d_model: 8, max_seq_len: 20, ..BackboneConfig::default() },
        max_epochs: 2,
        ..TrainConfig::default()
    };
    let out = train(&cfg, TrainData { split: &sp, catalog: None, meta: Some(&ds.item_emb), gt: Some(&gt) }).unwrap();
    let n = out.model.catalog.len();
    let opts = EvalOptions { ks: vec![1, n], ..EvalOptions::default() };
    let with = evaluate(&out.model, &sp, Some(&gt), &opts).unwrap();
    assert!(with.with_context);
    assert_eq!(with.at(n).unwrap().hr, 1.0);
    assert_eq!(with.at(n).unwrap().coverage, Some(1.0));
    let without = evaluate(&out.model, &sp, Some(&gt), &EvalOptions { with_context: Some(false), ..opts.clone() }).unwrap();
    assert!(!without.with_context);
    assert!(without.variant.contains("no context"));
    assert!(evaluate(&out.model, &sp, None, &opts).is_err());
    assert_eq!(with, evaluate(&out.model, &sp, Some(&gt), &opts).unwrap());
}

#[test]
fn explorer_filters_seen_items_and_drops_coverage() {
    let ds = generate(&SynthConfig { n_users: 40, n_items: 60, dim: 8, ..SynthConfig::default() }).unwrap();
    let sp = split(&build_histories(&ds.log, 200), &SplitSpec::explorer()).unwrap();
    let model = ModelState::new(
        VariantConfig::new(Architecture::BaselineId),
        BackboneConfig { d_model: 8, ..BackboneConfig::default() },
        geotrec_core::corpus::Catalog::from_log(&ds.log),
        None,
        None,
        1,
    )
    .unwrap();
    let c = &sp.test[0];
    let ec = make_case(&model, &c.input, &c.target, None, false, true).unwrap();
    let seen: BTreeSet<usize> = c.input.items.iter().map(|k| model.item_index(k).unwrap()).collect();
    assert_eq!(ec.filtered, seen.into_iter().collect::<Vec<_>>());
    let rep = evaluate(&model, &sp, None, &EvalOptions::default()).unwrap();
    assert!(rep.metrics.iter().all(|m| m.coverage.is_none()));
}

proptest! {
    #[test]
    fn metrics_agree_with_sorted_lists(scores in prop::collection::vec(0u8..5, 2..40), t in 0usize..40, k in 1usize..40) {
        let n = scores.len();
        let target = t % n;
        let s: Vec<f64> = scores.iter().map(|&x| x as f64).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
        let r = rank_scores(&s, target, &[], n).unwrap();
        prop_assert_eq!(&r.top, &order);
        prop_assert_eq!(r.rank, order.iter().position(|&j| j == target).unwrap() + 1);
        prop_assert_eq!(hr_at_k(&order, target, k), if r.rank <= k { 1.0 } else { 0.0 });
        prop_assert_eq!(ndcg_at_k(&order, target, k), ndcg_from_rank(r.rank, k));
    }
}
