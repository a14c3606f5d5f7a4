mod common;

use common::seeded;
use dnsgt_core::evalx::{
    context_sensitivity, cosine, embedding_distances, embedding_table, euclidean, f1_at, f1_best,
    multiclass_report, roc_auc, roc_curve, sequence_vs_random_distance, Occurrence, CV_THRESHOLDS,
};
use dnsgt_core::Error;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let n = rng.random_range(2..=100);
    let levels = rng.random_range(2..30);
    let mut labels: Vec<bool> = (0..n).map(|_| rng.random()).collect();
    labels[0] = true;
    labels[1] = false;
    // coarse levels force ties
    let scores = (0..n)
        .map(|_| f64::from(rng.random_range(0..levels)) / f64::from(levels))
        .collect();
    (scores, labels)
}

fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                den += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn trapezoid(curve: &[(f64, f64, f64)]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

#[test]
fn auc_matches_brute_force_and_trapezoid() {
    let mut rng = seeded(1);
    for trial in 0..1000 {
        let (s, l) = instance(&mut rng);
        let a = roc_auc(&s, &l).unwrap();
        assert!((a - brute_auc(&s, &l)).abs() <= 1e-12, "trial {trial}");
        assert!(
            (a - trapezoid(&roc_curve(&s, &l).unwrap())).abs() <= 1e-12,
            "trial {trial}"
        );
    }
}

#[test]
fn auc_flip_identity() {
    let mut rng = seeded(2);
    for _ in 0..1000 {
        let (s, l) = instance(&mut rng);
        let flipped: Vec<bool> = l.iter().map(|b| !b).collect();
        let sum = roc_auc(&s, &l).unwrap() + roc_auc(&s, &flipped).unwrap();
        assert!((sum - 1.0).abs() <= f64::EPSILON, "sum {sum}");
    }
}

#[test]
fn auc_invariant_under_monotone_transforms() {
    let mut rng = seeded(3);
    for _ in 0..500 {
        let (s, l) = instance(&mut rng);
        let a = roc_auc(&s, &l).unwrap();
        let cubed: Vec<f64> = s.iter().map(|x| (x - 0.3).powi(3)).collect();
        let logit: Vec<f64> = s.iter().map(|x| 5.0 * x + 2.0).collect();
        let exp: Vec<f64> = s.iter().map(|x| x.exp()).collect();
        for t in [cubed, logit, exp] {
            assert_eq!(roc_auc(&t, &l).unwrap(), a);
        }
    }
}

fn exhaustive_f1(scores: &[f64], labels: &[bool]) -> f64 {
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut cands = vec![distinct[0] - 1.0, distinct[distinct.len() - 1] + 1.0];
    cands.extend(distinct.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    cands
        .iter()
        .map(|&t| f1_at(scores, labels, t).unwrap())
        .fold(0.0, f64::max)
}

#[test]
fn f1_best_matches_midpoint_sweep() {
    let mut rng = seeded(4);
    for trial in 0..1000 {
        let (s, l) = instance(&mut rng);
        let (thr, best) = f1_best(&s, &l).unwrap();
        assert!(
            (best - exhaustive_f1(&s, &l)).abs() <= 1e-12,
            "trial {trial}"
        );
        assert_eq!(f1_at(&s, &l, thr).unwrap(), best);
        assert!(best >= f1_at(&s, &l, 0.5).unwrap());
    }
}

#[test]
fn f1_hand_cases() {
    assert_eq!(
        f1_at(&[0.2, 0.6, 0.7], &[false, true, true], 0.5).unwrap(),
        1.0
    );
    assert_eq!(f1_at(&[0.1, 0.9], &[false, true], 0.95).unwrap(), 0.0);
    assert!(matches!(
        f1_best(&[0.1, 0.2], &[true, true]),
        Err(Error::DegenerateLabels)
    ));
    assert!(matches!(
        roc_auc(&[0.1, f64::NAN], &[true, false]),
        Err(Error::NonFiniteDetected { .. })
    ));
}

#[test]
fn multiclass_hand_case() {
    // predictions 0, 1, 1 against labels 0, 0, 1
    let probs = vec![vec![0.8, 0.2], vec![0.3, 0.7], vec![0.4, 0.6]];
    let r = multiclass_report(&probs, &[0, 0, 1]).unwrap();
    assert!((r.accuracy - 2.0 / 3.0).abs() < 1e-15);
    // class 0: tp 1 fp 0 fn 1 -> 2/3; class 1: tp 1 fp 1 fn 0 -> 2/3
    assert!((r.f1 - 2.0 / 3.0).abs() < 1e-15);
    // class 0 scores [.8,.3,.4] vs labels [1,1,0]: wins 1 of 2; class 1 [.2,.7,.6] vs [0,0,1]: wins 1 of 2
    assert!((r.auc - 0.5).abs() < 1e-15);
    let uniform = vec![vec![0.5, 0.5]; 4];
    assert_eq!(
        multiclass_report(&uniform, &[0, 1, 0, 0]).unwrap().accuracy,
        0.75
    );
}

fn occ(domain: usize, sequence: usize, score: f64) -> Occurrence {
    Occurrence {
        sequence,
        position: 0,
        domain,
        score,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn cv_exceedance_is_monotone(scores in proptest::collection::vec((0usize..6, 0.01f64..1.0), 1..200)) {
        let occs: Vec<Occurrence> = scores.iter().enumerate().map(|(i, &(d, s))| occ(d, i, s)).collect();
        let r = context_sensitivity(&occs, 2);
        let fracs: Vec<f64> = r.exceedance.iter().map(|e| e.1).collect();
        prop_assert_eq!(r.exceedance.iter().map(|e| e.0).collect::<Vec<_>>(), CV_THRESHOLDS.to_vec());
        prop_assert!(fracs.iter().all(|f| (0.0..=1.0).contains(f)));
        prop_assert!(fracs.windows(2).all(|w| w[0] >= w[1]));
        for d in r.per_domain.values() {
            prop_assert!(d.sequences >= 2 && d.cv >= 0.0);
        }
    }

    #[test]
    fn inter_distance_is_symmetric(vecs in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 4), 4..10), split in 1usize..3) {
        let names: Vec<String> = (0..vecs.len()).map(|i| format!("d{i}")).collect();
        let emb = embedding_table(names.iter().cloned().zip(vecs).collect());
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let (a, b) = refs.split_at(split);
        let ab = embedding_distances(&emb, a, b).unwrap().inter;
        let ba = embedding_distances(&emb, b, a).unwrap().inter;
        prop_assert!((ab.cosine - ba.cosine).abs() < 1e-12);
        prop_assert!((ab.euclidean - ba.euclidean).abs() < 1e-12);
    }
}

#[test]
fn cv_of_constant_scores_is_zero() {
    let occs: Vec<Occurrence> = (0..10).map(|i| occ(3, i, 0.123_456_789)).collect();
    let r = context_sensitivity(&occs, 5);
    assert_eq!(r.per_domain[&3].cv, 0.0);
    assert_eq!(r.fraction_above(0.0), 0.0);
}

#[test]
fn cv_hand_case_and_min_occurrences() {
    // scores 0.2 and 0.6: mean 0.4, population std 0.2
    let occs = vec![occ(3, 0, 0.2), occ(3, 1, 0.6), occ(4, 0, 0.5)];
    let r = context_sensitivity(&occs, 2);
    assert!((r.per_domain[&3].cv - 0.5).abs() < 1e-12);
    assert!(!r.per_domain.contains_key(&4));
}

#[test]
fn distance_hand_cases() {
    let emb = embedding_table(vec![
        ("a".into(), vec![1.0, 0.0]),
        ("b".into(), vec![0.0, 1.0]),
        ("c".into(), vec![1.0, 1.0]),
        ("z".into(), vec![0.0, 0.0]),
    ]);
    let r = embedding_distances(&emb, &["a", "b"], &["c"]).unwrap();
    let intra = r.intra.unwrap();
    assert_eq!(intra.cosine, 0.0);
    assert!((intra.euclidean - 2f64.sqrt()).abs() < 1e-15);
    assert!((r.inter.cosine - 1.0 / 2f64.sqrt()).abs() < 1e-15);
    assert!((r.inter.euclidean - 1.0).abs() < 1e-15);
    assert_eq!(cosine(&emb["z"], &emb["a"]), 0.0);
    assert_eq!(euclidean(&emb["a"], &emb["a"]), 0.0);
    assert!(embedding_distances(&emb, &["a"], &["b"])
        .unwrap()
        .intra
        .is_none());
    assert!(matches!(
        embedding_distances(&emb, &["a", "nope"], &["b"]),
        Err(Error::MissingDomain(_))
    ));
    assert!(matches!(
        embedding_distances(&emb, &[], &["b"]),
        Err(Error::BadConfig(_))
    ));
}

#[test]
fn equal_embeddings_give_identical_curves() {
    let emb = embedding_table(
        (0..30)
            .map(|i| (format!("d{i}"), vec![0.5, -0.25, 1.0]))
            .collect(),
    );
    let mut rng = seeded(8);
    let seqs: Vec<Vec<String>> = (0..50)
        .map(|_| {
            (0..rng.random_range(2..8))
                .map(|_| format!("d{}", rng.random_range(0..30)))
                .collect()
        })
        .collect();
    let r = sequence_vs_random_distance(&emb, &seqs, 20, &mut seeded(9)).unwrap();
    assert_eq!(r.sequences, 20);
    for s in [r.within, r.within_distinct, r.random] {
        assert!((s.cosine - 1.0).abs() < 1e-12);
        assert_eq!(s.euclidean, 0.0);
    }
}
