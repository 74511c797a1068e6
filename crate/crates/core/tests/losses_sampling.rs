use std::collections::HashSet;

use geotrec_autograd::{Graph, Tensor};
use geotrec_core::corpus::{Catalog, Interaction};
use geotrec_core::losses::*;
use geotrec_core::sampling::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vecs(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

#[test]
fn ranking_loss_is_monotone_on_a_grid() {
    let grid: Vec<f64> = (-20..=20).map(|i| i as f64 * 0.5).collect();
    for &n in &grid {
        for w in grid.windows(2) {
            assert!(ranking_loss(w[1], &[n]).unwrap() < ranking_loss(w[0], &[n]).unwrap());
        }
    }
    for &p in &grid {
        for w in grid.windows(2) {
            assert!(ranking_loss(p, &[w[1]]).unwrap() > ranking_loss(p, &[w[0]]).unwrap());
        }
    }
}

#[test]
fn bce_two_anchor_hand_value() {
    // Orthonormal vectors make every cosine 0 or 1.
    let e = |i: usize| (0..4).map(|c| if c == i { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    let batch = AuxBatch {
        anchors: vec![e(0), e(1)],
        positives: vec![e(0), e(2)],
        negatives: vec![vec![e(1)], vec![e(1)]],
        provenance: Provenance::TemporalWindow,
    };
    let p = AuxParams { tau: 2.0, margin: 0.5 };
    let ln_s = |x: f64| -(1.0 + (-x).exp()).ln();
    // Anchor 0: sim+ 1, sim- 0. Anchor 1: sim+ 0, sim- 1.
    let a0 = -ln_s(2.0) - ln_s(0.0);
    let a1 = -ln_s(0.0) - ln_s(-2.0);
    let got = aux_loss(&batch, AuxForm::Bce, &p).unwrap();
    assert!((got - (a0 + a1) / 2.0).abs() < 1e-12, "{got}");
    let pw = aux_loss(&batch, AuxForm::Pairwise, &p).unwrap();
    assert!((pw - (0.0 + 1.5) / 2.0).abs() < 1e-12);
}

#[test]
fn graph_losses_match_scalar_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (b, n, d) = (5, 3, 6);
    let anchors = vecs(&mut rng, b, d);
    let positives = vecs(&mut rng, b, d);
    let negatives: Vec<Vec<Vec<f64>>> = (0..b).map(|_| vecs(&mut rng, n, d)).collect();
    let p = AuxParams::default();
    for form in [AuxForm::Bce, AuxForm::Cosine, AuxForm::Pairwise] {
        let batch = AuxBatch { anchors: anchors.clone(), positives: positives.clone(), negatives: negatives.clone(), provenance: Provenance::Uniform };
        let want = aux_loss(&batch, form, &p).unwrap();
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&anchors).unwrap()).unwrap();
        let pos = g.constant(Tensor::from_rows(&positives).unwrap()).unwrap();
        let flat: Vec<Vec<f64>> = negatives.iter().flatten().cloned().collect();
        let neg = g.constant(Tensor::from_rows(&flat).unwrap()).unwrap();
        let l = aux_loss_graph(&mut g, a, pos, Some(neg), form, &p).unwrap();
        assert!((g.value(l).item().unwrap() - want).abs() < 1e-12, "{form:?}");
    }
    let sp: Vec<f64> = (0..b).map(|_| rng.random_range(-3.0..3.0)).collect();
    let sn: Vec<Vec<f64>> = (0..b).map(|_| (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
    let want = sp.iter().zip(&sn).map(|(p, ns)| ranking_loss(*p, ns).unwrap()).sum::<f64>() / b as f64;
    let mut g = Graph::new();
    let vp = g.constant(Tensor::vector(sp)).unwrap();
    let vn = g.constant(Tensor::from_rows(&sn).unwrap()).unwrap();
    let l = ranking_loss_graph(&mut g, vp, vn).unwrap();
    assert!((g.value(l).item().unwrap() - want).abs() < 1e-12);
}

#[test]
fn malformed_aux_batches_are_rejected() {
    let batch = AuxBatch { anchors: vec![vec![1.0, 0.0]], positives: vec![vec![0.0, 0.0]], negatives: vec![], provenance: Provenance::Uniform };
    assert_eq!(aux_loss(&batch, AuxForm::Cosine, &AuxParams::default()), Err(LossError::ZeroVector));
    let no_negs = AuxBatch { positives: vec![vec![1.0, 1.0]], ..batch };
    assert!(aux_loss(&no_negs, AuxForm::Bce, &AuxParams::default()).is_err());
}

fn small_log() -> (Vec<Interaction>, Catalog) {
    let day = 86_400;
    let t0 = 1_600_000_000;
    let log = vec![
        Interaction::new("a", "x", t0, "L"),
        Interaction::new("b", "y", t0 + day, "L"),
        Interaction::new("b", "x", t0 + day + 5, "L"),
        Interaction::new("c", "z", t0 + 2 * day, "L"),
        Interaction::new("a", "w", t0 + 20 * day, "L"),
    ];
    let catalog = Catalog::from_log(&log);
    (log, catalog)
}

#[test]
fn window_pool_respects_window_and_user() {
    let (log, catalog) = small_log();
    let idx = WindowIndex::new(&log, &catalog).unwrap();
    let ix = |k: &str| catalog.index_of(k).unwrap();
    let exclude: HashSet<usize> = [ix("x"), ix("w")].into_iter().collect();
    let ts = 1_600_000_000 + 3 * 86_400;
    assert_eq!(idx.pool("a", ts, 7, &exclude), {
        let mut v = vec![ix("y"), ix("z")];
        v.sort();
        v
    });
    assert!(idx.pool("a", ts + 30 * 86_400, 7, &exclude).is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let err = sample_window_negatives(&idx, "a", ts + 30 * 86_400, 7, 2, &exclude, &mut rng).unwrap_err();
    assert!(matches!(err, SampleError::EmptyPool { provenance: Provenance::TemporalWindow, .. }));
    let neg = sample_window_negatives(&idx, "a", ts, 7, 5, &exclude, &mut rng).unwrap();
    assert!(neg.with_replacement);
    assert_eq!(neg.items.len(), 5);
}

#[test]
fn semantic_pool_takes_least_similar_items() {
    let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.7, 0.7]];
    let t = [1.0, 0.0];
    assert_eq!(least_similar_order(&t, &rows).unwrap(), vec![2, 1, 3, 0]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let neg = sample_semantic_negatives(&t, &rows, 0.25, 3, &HashSet::new(), "u", &mut rng).unwrap();
    assert_eq!(neg.items, vec![2, 2, 2]);
    let all = sample_semantic_negatives(&t, &rows, 1.0, 3, &[2usize].into_iter().collect(), "u", &mut rng).unwrap();
    assert!(!all.items.contains(&2) && !all.with_replacement);
    assert!(sample_semantic_negatives(&t, &rows, 0.0, 3, &HashSet::new(), "u", &mut rng).is_err());
}

#[test]
fn uniform_never_draws_excluded_items() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let exclude: HashSet<usize> = (0..50).filter(|j| j % 3 == 0).collect();
    let mut seen = HashSet::new();
    for _ in 0..10_000 {
        let neg = sample_uniform_negatives(50, 1, &exclude, "u", &mut rng).unwrap();
        assert!(!exclude.contains(&neg.items[0]));
        seen.insert(neg.items[0]);
    }
    assert_eq!(seen.len(), 50 - exclude.len());
    let all: HashSet<usize> = (0..5).collect();
    assert!(sample_uniform_negatives(5, 1, &all, "u", &mut rng).is_err());
}

proptest! {
    #[test]
    fn pairwise_is_bounded_by_margin_plus_two(seed in any::<u64>(), margin in 0.01f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = AuxBatch {
            anchors: vecs(&mut rng, 4, 5),
            positives: vecs(&mut rng, 4, 5),
            negatives: (0..4).map(|_| vecs(&mut rng, 3, 5)).collect(),
            provenance: Provenance::Uniform,
        };
        let v = aux_loss(&batch, AuxForm::Pairwise, &AuxParams { tau: 1.0, margin }).unwrap();
        prop_assert!((0.0..=margin + 2.0).contains(&v));
    }

    #[test]
    fn cosine_aux_ignores_anchor_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let anchors = vecs(&mut rng, 6, 4);
        let positives = vecs(&mut rng, 6, 4);
        let batch = AuxBatch { anchors: anchors.clone(), positives: positives.clone(), negatives: vec![], provenance: Provenance::Uniform };
        let mut perm: Vec<usize> = (0..6).collect();
        perm.rotate_left((seed % 6) as usize);
        perm.swap(0, 5);
        let permuted = AuxBatch {
            anchors: perm.iter().map(|&i| anchors[i].clone()).collect(),
            positives: perm.iter().map(|&i| positives[i].clone()).collect(),
            negatives: vec![],
            provenance: Provenance::Uniform,
        };
        let a = aux_loss(&batch, AuxForm::Cosine, &AuxParams::default()).unwrap();
        let b = aux_loss(&permuted, AuxForm::Cosine, &AuxParams::default()).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn bce_falls_as_positive_aligns(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = vecs(&mut rng, 1, 4).remove(0);
        let other = vecs(&mut rng, 1, 4).remove(0);
        let neg = vecs(&mut rng, 2, 4);
        let loss = |w: f64| {
            let pos: Vec<f64> = t.iter().zip(&other).map(|(a, b)| w * a + (1.0 - w) * b).collect();
            let batch = AuxBatch { anchors: vec![t.clone()], positives: vec![pos], negatives: vec![neg.clone()], provenance: Provenance::Uniform };
            aux_loss(&batch, AuxForm::Bce, &AuxParams::default()).unwrap()
        };
        prop_assert!(loss(1.0) <= loss(0.5) + 1e-12);
    }
}
