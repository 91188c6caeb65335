//! Metrics and matching against independent reference computations.

use std::collections::HashMap;

use pici::assignment::{assignment_weight, max_weight_assignment};
use pici::crosslevel::{match_clusters, overlap};
use pici::metrics::{accuracy, ari, nmi, nmi_with, NmiNorm};
use pici::seed;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn random_labels(rng: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..k)).collect()
}

/// Pair-count table keyed on label values, built with a hash map.
fn counts(truth: &[usize], pred: &[usize]) -> (HashMap<(usize, usize), f64>, HashMap<usize, f64>, HashMap<usize, f64>) {
    let mut joint = HashMap::new();
    let mut a = HashMap::new();
    let mut b = HashMap::new();
    for (&t, &p) in truth.iter().zip(pred) {
        *joint.entry((t, p)).or_insert(0.0) += 1.0;
        *a.entry(t).or_insert(0.0) += 1.0;
        *b.entry(p).or_insert(0.0) += 1.0;
    }
    (joint, a, b)
}

fn reference_nmi(truth: &[usize], pred: &[usize], arithmetic: bool) -> f64 {
    let n = truth.len() as f64;
    let (joint, a, b) = counts(truth, pred);
    let h = |m: &HashMap<usize, f64>| -m.values().map(|c| c / n * (c / n).log2()).sum::<f64>();
    let (ha, hb) = (h(&a), h(&b));
    if ha == 0.0 || hb == 0.0 {
        return if ha == hb { 1.0 } else { 0.0 };
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(t, p), &c)| c / n * (c * n / (a[&t] * b[&p])).log2())
        .sum();
    if arithmetic {
        mi / ((ha + hb) / 2.0)
    } else {
        mi / (ha * hb).sqrt()
    }
}

fn choose2(x: f64) -> f64 {
    x * (x - 1.0) / 2.0
}

fn reference_ari(truth: &[usize], pred: &[usize]) -> f64 {
    let (joint, a, b) = counts(truth, pred);
    let index: f64 = joint.values().map(|&c| choose2(c)).sum();
    let sa: f64 = a.values().map(|&c| choose2(c)).sum();
    let sb: f64 = b.values().map(|&c| choose2(c)).sum();
    let expected = sa * sb / choose2(truth.len() as f64);
    let max = (sa + sb) / 2.0;
    if max == expected {
        1.0
    } else {
        (index - expected) / (max - expected)
    }
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

fn brute_force_best(weight: &[Vec<i64>]) -> i64 {
    permutations(weight.len())
        .iter()
        .map(|p| assignment_weight(weight, p))
        .max()
        .unwrap()
}

/// Best accuracy over all injective cluster→class maps, by enumeration.
fn brute_force_accuracy(truth: &[usize], pred: &[usize]) -> f64 {
    let kt = truth.iter().max().unwrap() + 1;
    let kp = pred.iter().max().unwrap() + 1;
    let k = kt.max(kp);
    let best = permutations(k)
        .iter()
        .map(|map| truth.iter().zip(pred).filter(|(&t, &p)| map[p] == t).count())
        .max()
        .unwrap();
    best as f64 / truth.len() as f64
}

#[test]
fn nmi_and_ari_match_reference() {
    let mut rng = seed::rng(21);
    for trial in 0..1000 {
        let n = rng.gen_range(2..60);
        let kt = rng.gen_range(1..8);
        let kp = rng.gen_range(1..8);
        let t = random_labels(&mut rng, n, kt);
        let p = random_labels(&mut rng, n, kp);
        let got = nmi(&t, &p).unwrap();
        let want = reference_nmi(&t, &p, false).clamp(0.0, 1.0);
        assert!((got - want).abs() < 1e-10, "trial {trial} nmi {got} vs {want}");
        let got = nmi_with(&t, &p, NmiNorm::Arithmetic).unwrap();
        let want = reference_nmi(&t, &p, true).clamp(0.0, 1.0);
        assert!((got - want).abs() < 1e-10, "trial {trial} arithmetic nmi {got} vs {want}");
        let got = ari(&t, &p).unwrap();
        let want = reference_ari(&t, &p);
        assert!((got - want).abs() < 1e-10, "trial {trial} ari {got} vs {want}");
    }
}

#[test]
fn metrics_are_relabel_invariant() {
    let mut rng = seed::rng(22);
    for _ in 0..1000 {
        let n = rng.gen_range(2..60);
        let k = rng.gen_range(1..7);
        let t = random_labels(&mut rng, n, k);
        let p = random_labels(&mut rng, n, k);
        // permute and shift both label alphabets
        let mut perm: Vec<usize> = (0..k).map(|v| v * 3 + 10).collect();
        perm.shuffle(&mut rng);
        let t2: Vec<usize> = t.iter().map(|&v| perm[v]).collect();
        perm.shuffle(&mut rng);
        let p2: Vec<usize> = p.iter().map(|&v| perm[v]).collect();
        assert!((nmi(&t, &p).unwrap() - nmi(&t2, &p2).unwrap()).abs() < 1e-12);
        assert!((ari(&t, &p).unwrap() - ari(&t2, &p2).unwrap()).abs() < 1e-12);
        assert_eq!(accuracy(&t, &p).unwrap(), accuracy(&t2, &p2).unwrap());
    }
}

#[test]
fn accuracy_matching_equals_enumeration() {
    let mut rng = seed::rng(23);
    for _ in 0..200 {
        let n = rng.gen_range(1..40);
        let k = rng.gen_range(1..=7);
        let t = random_labels(&mut rng, n, k);
        let kp = rng.gen_range(1..=7);
        let p = random_labels(&mut rng, n, kp);
        assert_eq!(accuracy(&t, &p).unwrap(), brute_force_accuracy(&t, &p));
    }
}

#[test]
fn match_clusters_equals_enumeration() {
    let mut rng = seed::rng(24);
    for _ in 0..200 {
        let m = rng.gen_range(1..=7);
        let n = rng.gen_range(m..60);
        let p = random_labels(&mut rng, n, m);
        let q = random_labels(&mut rng, n, m);
        let w = match_clusters(&p, &q, m).unwrap();
        let weight = overlap(&p, &q, m).unwrap();
        let got: i64 = (0..m).map(|k| weight[k][w.pseudo_of[k]]).sum();
        assert_eq!(got, brute_force_best(&weight));
        let mut targets = w.pseudo_of.clone();
        targets.sort_unstable();
        assert_eq!(targets, (0..m).collect::<Vec<_>>());
    }
}

proptest! {
    #[test]
    fn hungarian_is_optimal(m in 1usize..=6, vals in proptest::collection::vec(-50i64..50, 36)) {
        let weight: Vec<Vec<i64>> = (0..m).map(|i| vals[i * 6..i * 6 + m].to_vec()).collect();
        let assign = max_weight_assignment(&weight);
        prop_assert_eq!(assignment_weight(&weight, &assign), brute_force_best(&weight));
    }

    #[test]
    fn metrics_stay_in_range(t in proptest::collection::vec(0usize..5, 2..40), seed_value in any::<u64>()) {
        let mut rng = seed::rng(seed_value);
        let p = random_labels(&mut rng, t.len(), 5);
        let v = nmi(&t, &p).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        let a = accuracy(&t, &p).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!(ari(&t, &p).unwrap() <= 1.0 + 1e-12);
        prop_assert!((nmi(&t, &t).unwrap() - 1.0).abs() < 1e-12 || t.iter().all(|&x| x == t[0]));
    }
}
