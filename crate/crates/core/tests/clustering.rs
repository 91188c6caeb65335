//! K-means, masking statistics and the synthetic fixture.

use ndarray::Array2;
use pici::crosslevel::{kmeans, kmeans_exec};
use pici::data::synth_blobs;
use pici::masking::{masked_count, sample_mask};
use pici::metrics::{accuracy, nmi};
use pici::par::Exec;
use pici::seed;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

#[test]
fn kmeans_objective_never_increases() {
    let mut rng = seed::rng(31);
    for trial in 0..100 {
        let n = rng.gen_range(5..80);
        let d = rng.gen_range(1..6);
        let m = rng.gen_range(1..=n.min(8));
        let z = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
        let r = kmeans(&z, m, trial, 100, 0.0).unwrap();
        for w in r.history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "trial {trial}: {:?}", r.history);
        }
        assert_eq!(r.objective, *r.history.last().unwrap());
        assert!(r.labels.iter().all(|&l| l < m));
    }
}

#[test]
fn kmeans_recovers_separated_blobs_exactly() {
    let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]];
    let mut rng = seed::rng(32);
    let per = 25;
    let mut rows = Vec::new();
    let mut truth = Vec::new();
    for (k, c) in centers.iter().enumerate() {
        for _ in 0..per {
            rows.push(c[0] + 0.3 * rng.sample::<f64, _>(StandardNormal));
            rows.push(c[1] + 0.3 * rng.sample::<f64, _>(StandardNormal));
            truth.push(k);
        }
    }
    let z = Array2::from_shape_vec((centers.len() * per, 2), rows).unwrap();
    for s in 0..10 {
        let r = kmeans(&z, 4, s, 100, 0.0).unwrap();
        assert_eq!(accuracy(&truth, &r.labels).unwrap(), 1.0, "seed {s}");
    }
}

#[test]
fn kmeans_is_identical_across_exec_modes() {
    let mut rng = seed::rng(33);
    let z = Array2::from_shape_fn((200, 5), |_| rng.sample::<f64, _>(StandardNormal));
    let a = kmeans_exec(&z, 6, 4, 50, 0.0, Exec::Sequential).unwrap();
    let b = kmeans_exec(&z, 6, 4, 50, 0.0, Exec::Parallel).unwrap();
    assert_eq!(a.labels, b.labels);
    assert_eq!(a.history, b.history);
}

#[test]
fn mask_frequencies_are_uniform() {
    let n = 196;
    let draws = 10_000;
    let mut hits = vec![0u32; n];
    for d in 0..draws {
        let plan = sample_mask(n, 0.5, seed::derive(41, &[d])).unwrap();
        assert_eq!(plan.masked_idx.len(), 98);
        for &k in &plan.masked_idx {
            hits[k] += 1;
        }
    }
    for (k, &h) in hits.iter().enumerate() {
        let f = h as f64 / draws as f64;
        assert!((f - 0.5).abs() <= 0.02, "patch {k}: {f}");
    }
}

#[test]
fn synth_fixture_is_separable_in_pixel_space() {
    let ds = synth_blobs(3, 40, 32, 7).unwrap();
    let d = 32 * 32 * 3;
    let flat: Vec<f64> = ds.items.iter().flat_map(|i| i.image.pixels().iter().copied()).collect();
    let z = Array2::from_shape_vec((ds.len(), d), flat).unwrap();
    let r = kmeans(&z, 3, 0, 100, 0.0).unwrap();
    let acc = accuracy(&ds.labels(), &r.labels).unwrap();
    assert!(acc >= 0.9, "pixel k-means accuracy {acc}");
    assert!(nmi(&ds.labels(), &r.labels).unwrap() > 0.7);
}

proptest! {
    #[test]
    fn mask_plans_partition_the_grid(n in 1usize..300, ratio in 0.0f64..0.99, s in any::<u64>()) {
        let plan = sample_mask(n, ratio, s).unwrap();
        prop_assert_eq!(plan.masked_idx.len(), masked_count(n, ratio));
        let mut all: Vec<usize> = plan.visible_idx.iter().chain(&plan.masked_idx).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(sample_mask(n, ratio, s).unwrap(), plan);
    }
}
