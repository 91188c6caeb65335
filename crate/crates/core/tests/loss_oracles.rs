//! Vectorized contrastive losses against naive per-term evaluation.

use ndarray::{Array2, ArrayView1};
use pici::losses::{cluster_loss, cluster_loss_with_grad, instance_loss, instance_loss_with_grad, LossOptions};
use pici::seed;
use rand::Rng;
use rand_distr::StandardNormal;

fn cos(u: ArrayView1<f64>, v: ArrayView1<f64>) -> f64 {
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for k in 0..u.len() {
        dot += u[k] * v[k];
        nu += u[k] * u[k];
        nv += v[k] * v[k];
    }
    dot / (nu.sqrt() * nv.sqrt())
}

/// Mean over both views and all anchors of
/// -log( e^{s(i,i')/τ} / Σ_j [e^{s(i,j')/τ} + [j≠i] e^{s(i,j)/τ}] ).
fn naive_pair_loss(a: &Array2<f64>, b: &Array2<f64>, tau: f64, include_self: bool) -> f64 {
    let n = a.nrows();
    let mut total = 0.0;
    for (x, y) in [(a, b), (b, a)] {
        for i in 0..n {
            let pos = (cos(x.row(i), y.row(i)) / tau).exp();
            let mut denom = 0.0;
            for j in 0..n {
                denom += (cos(x.row(i), y.row(j)) / tau).exp();
                if j != i || include_self {
                    denom += (cos(x.row(i), x.row(j)) / tau).exp();
                }
            }
            total += -(pos / denom).ln();
        }
    }
    total / (2 * n) as f64
}

fn naive_entropy(c: &Array2<f64>) -> f64 {
    let (n, m) = c.dim();
    let mut h = 0.0;
    for j in 0..m {
        let mut p = 0.0;
        for i in 0..n {
            p += c[[i, j]];
        }
        p /= n as f64;
        h -= p * p.ln();
    }
    h
}

fn naive_cluster_loss(ca: &Array2<f64>, cb: &Array2<f64>, tau: f64, include_self: bool) -> f64 {
    let ya = ca.t().to_owned();
    let yb = cb.t().to_owned();
    naive_pair_loss(&ya, &yb, tau, include_self) - naive_entropy(ca) - naive_entropy(cb)
}

fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

#[test]
fn instance_loss_matches_double_loop() {
    let mut rng = seed::rng(11);
    for trial in 0..100 {
        let n = rng.gen_range(1..=16);
        let d = rng.gen_range(2..=16);
        let tau = rng.gen_range(0.1..2.0);
        let za = gaussian(&mut rng, n, d);
        let zb = gaussian(&mut rng, n, d);
        for include_self in [false, true] {
            let opts = LossOptions {
                include_self,
                ..Default::default()
            };
            let got = instance_loss_with_grad(&za, &zb, tau, &opts).unwrap().0;
            let want = naive_pair_loss(&za, &zb, tau, include_self);
            assert!((got - want).abs() < 1e-10, "trial {trial}: {got} vs {want}");
        }
        assert_eq!(instance_loss(&za, &zb, tau).unwrap(), instance_loss_with_grad(&za, &zb, tau, &LossOptions::default()).unwrap().0);
    }
}

#[test]
fn cluster_loss_matches_double_loop() {
    let mut rng = seed::rng(12);
    for trial in 0..100 {
        let n = rng.gen_range(1..=16);
        let m = rng.gen_range(2..=16);
        let tau = rng.gen_range(0.2..2.0);
        let ca = softmax_rows(&gaussian(&mut rng, n, m));
        let cb = softmax_rows(&gaussian(&mut rng, n, m));
        for include_self in [false, true] {
            let opts = LossOptions {
                include_self,
                ..Default::default()
            };
            let (got, h, _, _) = cluster_loss_with_grad(&ca, &cb, tau, &opts).unwrap();
            let want = naive_cluster_loss(&ca, &cb, tau, include_self);
            assert!((got - want).abs() < 1e-10, "trial {trial}: {got} vs {want}");
            assert!((h - naive_entropy(&ca) - naive_entropy(&cb)).abs() < 1e-12);
        }
        assert_eq!(cluster_loss(&ca, &cb, tau).unwrap(), cluster_loss_with_grad(&ca, &cb, tau, &LossOptions::default()).unwrap().0);
    }
}

#[test]
fn cosine_similarity_is_scale_free() {
    let mut rng = seed::rng(13);
    let za = gaussian(&mut rng, 5, 4);
    let zb = gaussian(&mut rng, 5, 4);
    let base = instance_loss(&za, &zb, 0.5).unwrap();
    let scaled = instance_loss(&(&za * 7.5), &(&zb * 0.01), 0.5).unwrap();
    assert!((base - scaled).abs() < 1e-12);
}
