mod common;

use std::collections::HashMap;

use common::*;
use echo_contrast::embedding::Role;
use echo_contrast::evaluation::{auc, classification_metrics, knn_classify, precision_recall_f1, retrieval_recall_at_k};
use echo_contrast::{Error, Exec};
use rand::Rng;

/// Fraction of (positive, negative) pairs ordered correctly, ties one half.
fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Brute-force weighted vote: rank by similarity (lower index on ties), sum
/// weights per label, largest total wins with ties to the lower label.
fn knn_oracle(train: &Mat, labels: &[u32], query: &[f64], k: usize, t: f64) -> u32 {
    let tr = unit(train);
    let q = unit(&vec![query.to_vec()]).remove(0);
    let mut scored: Vec<(f64, usize)> = tr.iter().enumerate().map(|(j, r)| (dot(r, &q), j)).collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut votes: HashMap<u32, f64> = HashMap::new();
    for &(s, j) in scored.iter().take(k) {
        *votes.entry(labels[j]).or_insert(0.0) += (s / t).exp();
    }
    let mut best: Option<(u32, f64)> = None;
    for (&l, &w) in &votes {
        best = match best {
            Some((bl, bw)) if bw > w || (bw == w && bl < l) => Some((bl, bw)),
            _ => Some((l, w)),
        };
    }
    best.unwrap().0
}

#[test]
fn auc_matches_pairwise_count() {
    for seed in 0..50 {
        let mut r = rng(seed);
        let n = r.random_range(2..60);
        let scores: Vec<f64> = (0..n).map(|_| (r.random_range(0.0..1.0f64) * 8.0).round() / 8.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let got = auc(&scores, &labels).unwrap();
        assert!((got - pairwise_auc(&scores, &labels)).abs() < 1e-12, "seed {seed}");
    }
}

#[test]
fn auc_invariant_to_monotone_transform() {
    let mut r = rng(1);
    let scores: Vec<f64> = (0..40).map(|_| r.random_range(-2.0..2.0)).collect();
    let labels: Vec<bool> = (0..40).map(|i| i % 3 == 0).collect();
    let squashed: Vec<f64> = scores.iter().map(|s| 1.0 / (1.0 + (-3.0 * s).exp())).collect();
    assert_eq!(auc(&scores, &labels).unwrap(), auc(&squashed, &labels).unwrap());
    let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
    let a = auc(&scores, &labels).unwrap();
    assert!((auc(&flipped, &labels).unwrap() - (1.0 - a)).abs() < 1e-12);
}

#[test]
fn auc_single_class_is_undefined() {
    assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(Error::AucUndefined)));
    assert!(matches!(auc(&[0.1, 0.2], &[false, false]), Err(Error::AucUndefined)));
}

#[test]
fn precision_without_positive_predictions_is_flagged() {
    let m = precision_recall_f1(&[false, false, false], &[true, false, false]).unwrap();
    assert_eq!(m.precision, 0.0);
    assert!(m.precision_undefined && !m.recall_undefined);
    assert_eq!(m.fn_, 1);
}

#[test]
fn perfect_retrieval_is_one() {
    let e = random_rows(&mut rng(2), 30, 8);
    let (i, t) = (batch(&e, Role::Image), batch(&e, Role::Text));
    assert_eq!(retrieval_recall_at_k(&i, &t, 1).unwrap(), 1.0);
}

#[test]
fn adversarial_retrieval_is_zero() {
    // Every image points away from its own text and towards all others.
    let n = 12;
    let texts: Mat = (0..n).map(|i| (0..n).map(|k| if k == i { 1.0 } else { 0.0 }).collect()).collect();
    let images: Mat = (0..n).map(|i| (0..n).map(|k| if k == i { -1.0 } else { 1.0 }).collect()).collect();
    let (i, t) = (batch(&images, Role::Image), batch(&texts, Role::Text));
    assert_eq!(retrieval_recall_at_k(&i, &t, 5).unwrap(), 0.0);
    assert_eq!(retrieval_recall_at_k(&i, &t, n - 1).unwrap(), 0.0);
    assert_eq!(retrieval_recall_at_k(&i, &t, n).unwrap(), 1.0);
}

#[test]
fn random_retrieval_is_near_chance() {
    let (n, k, trials) = (50, 5, 200);
    let mut total = 0.0;
    for seed in 0..trials {
        let mut r = rng(1000 + seed);
        let (i, t) = (random_rows(&mut r, n, 16), random_rows(&mut r, n, 16));
        total += retrieval_recall_at_k(&batch(&i, Role::Image), &batch(&t, Role::Text), k).unwrap();
    }
    let mean = total / trials as f64;
    // Standard error of the mean is about 0.003 here.
    assert!((mean - k as f64 / n as f64).abs() < 0.015, "{mean}");
}

#[test]
fn invalid_k_rejected() {
    let e = random_rows(&mut rng(3), 4, 3);
    let (i, t) = (batch(&e, Role::Image), batch(&e, Role::Text));
    assert!(matches!(retrieval_recall_at_k(&i, &t, 0), Err(Error::InvalidK { .. })));
    assert!(matches!(retrieval_recall_at_k(&i, &t, 5), Err(Error::InvalidK { .. })));
}

#[test]
fn knn_matches_brute_force() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let train = random_rows(&mut r, 60, 6);
        let labels: Vec<u32> = (0..60).map(|_| r.random_range(0..4)).collect();
        let queries = random_rows(&mut r, 15, 6);
        let k = r.random_range(1..30);
        let t = r.random_range(0.05..1.0);
        for exec in [Exec::Sequential, Exec::Parallel] {
            let got = knn_classify(
                &batch(&train, Role::Image),
                &labels,
                &batch(&queries, Role::Image),
                k,
                t,
                exec,
            )
            .unwrap();
            for (q, &g) in queries.iter().zip(&got) {
                assert_eq!(g, knn_oracle(&train, &labels, q, k, t), "seed {seed}");
            }
        }
    }
}

#[test]
fn knn_tie_goes_to_lower_label() {
    let train = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
    let got = knn_classify(
        &batch(&train, Role::Image),
        &[7, 3],
        &batch(&vec![vec![1.0, 0.0]], Role::Image),
        2,
        0.07,
        Exec::Sequential,
    )
    .unwrap();
    assert_eq!(got, vec![3]);
}

#[test]
fn knn_k_larger_than_train_uses_all_rows() {
    let mut r = rng(9);
    let train = random_rows(&mut r, 5, 4);
    let labels = vec![0, 1, 1, 2, 2];
    let queries = random_rows(&mut r, 6, 4);
    let (a, b) = (batch(&train, Role::Image), batch(&queries, Role::Image));
    let big = knn_classify(&a, &labels, &b, 100, 0.5, Exec::Sequential).unwrap();
    let exact = knn_classify(&a, &labels, &b, 5, 0.5, Exec::Sequential).unwrap();
    assert_eq!(big, exact);
}

#[test]
fn confusion_counts_add_up() {
    let truth = [0, 0, 1, 1, 2, 2, 2];
    let pred = [0, 1, 1, 1, 2, 0, 2];
    let m = classification_metrics(&pred, &truth).unwrap();
    assert_eq!(m.confusion.iter().flatten().sum::<usize>(), truth.len());
    assert!((m.accuracy - 5.0 / 7.0).abs() < 1e-12);
    assert!((m.balanced_accuracy - (0.5 + 1.0 + 2.0 / 3.0) / 3.0).abs() < 1e-12);
}
