//! Cross-level interaction: K-means pseudo-labels from the instance subspace,
//! aligned to the cluster head's hard labels by maximum matching, then used as
//! cross-entropy targets for the cluster head.

use ndarray::{Array2, ArrayView1, Axis};
use rand::Rng;

use crate::assignment::max_weight_assignment;
use crate::error::{PiciError, Result};
use crate::par::Exec;
use crate::seed;

const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Array2<f64>,
    pub labels: Vec<usize>,
    pub objective: f64,
    pub iterations_run: usize,
    /// Objective after seeding and after every Lloyd iteration.
    pub history: Vec<f64>,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid per point; ties go to the smallest centroid index.
fn assign(z: &Array2<f64>, centroids: &Array2<f64>, exec: Exec) -> Vec<(usize, f64)> {
    exec.map(z.nrows(), |i| {
        let p = z.row(i);
        let mut best = (0, f64::INFINITY);
        for (k, c) in centroids.rows().into_iter().enumerate() {
            let d = sq_dist(p, c);
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    })
}

fn seed_centroids(z: &Array2<f64>, m: usize, seed_value: u64) -> Array2<f64> {
    let n = z.nrows();
    let mut rng = seed::rng(seed_value);
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(z.row(i), z.row(chosen[0]))).collect();
    while chosen.len() < m {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if target < d {
                        break;
                    }
                    target -= d;
                }
            }
            pick.expect("positive mass exists")
        } else {
            // every point coincides with a chosen centroid
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(z.row(i), z.row(next)));
        }
    }
    let mut centroids = Array2::zeros((m, z.ncols()));
    for (k, &i) in chosen.iter().enumerate() {
        centroids.row_mut(k).assign(&z.row(i));
    }
    centroids
}

pub fn kmeans(z: &Array2<f64>, m: usize, seed: u64, max_iters: usize, tol: f64) -> Result<KMeansResult> {
    kmeans_exec(z, m, seed, max_iters, tol, Exec::default())
}

/// Lloyd's algorithm from k-means++ seeding.
pub fn kmeans_exec(
    z: &Array2<f64>,
    m: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
    exec: Exec,
) -> Result<KMeansResult> {
    let n = z.nrows();
    if m == 0 || n < m {
        return Err(PiciError::Config(format!("k-means needs N >= M >= 1, got N={n}, M={m}")));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(PiciError::Config("k-means input is not finite".into()));
    }
    let mut centroids = seed_centroids(z, m, seed);
    let mut assigned = assign(z, &centroids, exec);
    let mut objective: f64 = assigned.iter().map(|a| a.1).sum();
    let mut history = vec![objective];
    let mut iterations_run = 0;

    while iterations_run < max_iters {
        iterations_run += 1;
        let mut sums = Array2::<f64>::zeros((m, z.ncols()));
        let mut counts = vec![0usize; m];
        for (i, (k, _)) in assigned.iter().enumerate() {
            let mut row = sums.row_mut(*k);
            row += &z.row(i);
            counts[*k] += 1;
        }
        for k in 0..m {
            if counts[k] > 0 {
                let mean = &sums.row(k) / counts[k] as f64;
                centroids.row_mut(k).assign(&mean);
            } else {
                // re-seed at the point farthest from its own centroid
                let far = (0..n)
                    .max_by(|&a, &b| assigned[a].1.total_cmp(&assigned[b].1).then(b.cmp(&a)))
                    .expect("n >= 1");
                centroids.row_mut(k).assign(&z.row(far));
                assigned[far].1 = 0.0;
            }
        }
        assigned = assign(z, &centroids, exec);
        let next: f64 = assigned.iter().map(|a| a.1).sum();
        let improvement = objective - next;
        objective = next;
        history.push(objective);
        if improvement < tol {
            break;
        }
    }
    Ok(KMeansResult {
        centroids,
        labels: assigned.iter().map(|a| a.0).collect(),
        objective,
        iterations_run,
        history,
    })
}

/// Row-wise argmax; ties go to the smallest index.
pub fn hard_labels(c: &Array2<f64>) -> Vec<usize> {
    c.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Permutation between cluster-head labels (rows) and pseudo-labels (columns).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matching {
    /// `pseudo_of[m] = s` means `w[m][s] = 1`.
    pub pseudo_of: Vec<usize>,
}

impl Matching {
    pub fn identity(m: usize) -> Self {
        Self {
            pseudo_of: (0..m).collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.pseudo_of.len()
    }

    pub fn w(&self, m: usize, s: usize) -> u8 {
        u8::from(self.pseudo_of[m] == s)
    }

    /// Dense 0/1 form.
    pub fn matrix(&self) -> Vec<Vec<u8>> {
        let k = self.size();
        (0..k).map(|m| (0..k).map(|s| self.w(m, s)).collect()).collect()
    }

    /// Cluster-head label matched to pseudo-label `s`.
    pub fn cluster_of(&self, s: usize) -> usize {
        self.pseudo_of
            .iter()
            .position(|&x| x == s)
            .expect("matching is a permutation")
    }
}

/// `overlap[m][s] = |{i : q_i = m ∧ p_i = s}|`.
pub fn overlap(p: &[usize], q: &[usize], m: usize) -> Result<Vec<Vec<i64>>> {
    if p.len() != q.len() {
        return Err(PiciError::Input(format!("label lengths {} and {}", p.len(), q.len())));
    }
    let mut o = vec![vec![0i64; m]; m];
    for (&pi, &qi) in p.iter().zip(q) {
        if pi >= m || qi >= m {
            return Err(PiciError::Input(format!("label outside [0, {m})")));
        }
        o[qi][pi] += 1;
    }
    Ok(o)
}

/// Maximum-overlap permutation between hard labels `q` and pseudo-labels `p`.
pub fn match_clusters(p: &[usize], q: &[usize], m: usize) -> Result<Matching> {
    let o = overlap(p, q, m)?;
    Ok(Matching {
        pseudo_of: max_weight_assignment(&o),
    })
}

/// One-hot targets: sample `i` gets the cluster-head label matched to `p_i`.
pub fn modify_pseudo(p: &[usize], w: &Matching) -> Result<Array2<f64>> {
    let m = w.size();
    let mut out = Array2::zeros((p.len(), m));
    for (i, &pi) in p.iter().enumerate() {
        if pi >= m {
            return Err(PiciError::Input(format!("pseudo-label {pi} outside [0, {m})")));
        }
        out[[i, w.cluster_of(pi)]] = 1.0;
    }
    Ok(out)
}

/// Cross-entropy between one-hot targets and cluster probabilities, averaged
/// over samples and views. Returns the value and gradients for both `C`s.
pub fn cli_loss_with_grad(
    targets_a: &Array2<f64>,
    ca: &Array2<f64>,
    targets_b: &Array2<f64>,
    cb: &Array2<f64>,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(2);
    for (t, c) in [(targets_a, ca), (targets_b, cb)] {
        if t.dim() != c.dim() || c.nrows() == 0 {
            return Err(PiciError::Config(format!(
                "targets {:?} and probabilities {:?} differ",
                t.dim(),
                c.dim()
            )));
        }
        let n = c.nrows() as f64;
        let mut g = Array2::zeros(c.dim());
        for ((idx, &tv), &cv) in t.indexed_iter().zip(c.iter()) {
            if tv != 0.0 {
                value -= 0.5 * tv * cv.max(LOG_FLOOR).ln() / n;
                if cv >= LOG_FLOOR {
                    g[idx] = -0.5 * tv / (cv * n);
                }
            }
        }
        grads.push(g);
    }
    let gb = grads.pop().expect("two views");
    let ga = grads.pop().expect("two views");
    Ok((value, ga, gb))
}

pub fn cli_loss(targets_a: &Array2<f64>, ca: &Array2<f64>, targets_b: &Array2<f64>, cb: &Array2<f64>) -> Result<f64> {
    Ok(cli_loss_with_grad(targets_a, ca, targets_b, cb)?.0)
}

/// Pseudo-label targets for one view: K-means on the (unit-norm) instance
/// embeddings, matched onto the cluster head's hard labels.
pub fn view_targets(z: &Array2<f64>, c: &Array2<f64>, seed: u64, max_iters: usize, exec: Exec) -> Result<Array2<f64>> {
    let m = c.ncols();
    let norms = z.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(LOG_FLOOR));
    let zn = z / &norms.insert_axis(Axis(1));
    let km = kmeans_exec(&zn, m, seed, max_iters, 1e-10, exec)?;
    let q = hard_labels(c);
    let w = match_clusters(&km.labels, &q, m)?;
    modify_pseudo(&km.labels, &w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn kmeans_distinct_points_are_their_own_centroids() {
        let z = array![[0.0, 0.0], [1.0, 0.0], [0.0, 5.0], [3.0, 3.0]];
        let r = kmeans(&z, 4, 1, 50, 1e-12).unwrap();
        assert_eq!(r.objective, 0.0);
        let mut l = r.labels.clone();
        l.sort_unstable();
        assert_eq!(l, vec![0, 1, 2, 3]);
    }

    #[test]
    fn kmeans_identical_points() {
        let z = Array2::from_elem((6, 3), 0.25);
        let r = kmeans(&z, 3, 9, 50, 1e-12).unwrap();
        assert_eq!(r.objective, 0.0);
        assert!(r.labels.iter().all(|&l| l == r.labels[0]));
    }

    #[test]
    fn kmeans_rejects_too_few_points() {
        let z = Array2::zeros((2, 2));
        assert!(kmeans(&z, 3, 0, 10, 0.0).is_err());
    }

    #[test]
    fn kmeans_objective_matches_labels() {
        let mut rng = seed::rng(3);
        let z = Array2::from_shape_simple_fn((40, 3), || rng.gen_range(-1.0..1.0));
        let r = kmeans(&z, 4, 2, 100, 1e-12).unwrap();
        let direct: f64 = r
            .labels
            .iter()
            .enumerate()
            .map(|(i, &k)| sq_dist(z.row(i), r.centroids.row(k)))
            .sum();
        assert_eq!(direct, r.objective);
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn kmeans_exec_modes_agree() {
        let mut rng = seed::rng(4);
        let z = Array2::from_shape_simple_fn((200, 5), || rng.gen_range(-1.0..1.0));
        let a = kmeans_exec(&z, 5, 1, 30, 1e-12, Exec::Sequential).unwrap();
        let b = kmeans_exec(&z, 5, 1, 30, 1e-12, Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hard_label_examples() {
        let c = array![[0.0, 1.0, 0.0], [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], [0.2, 0.5, 0.3]];
        assert_eq!(hard_labels(&c), vec![1, 0, 1]);
    }

    #[test]
    fn matching_examples() {
        let p = vec![0, 1, 2, 2, 1, 0, 3];
        assert_eq!(match_clusters(&p, &p, 4).unwrap(), Matching::identity(4));

        let pi = [2, 0, 3, 1];
        let q: Vec<usize> = p.iter().map(|&s| pi[s]).collect();
        let w = match_clusters(&p, &q, 4).unwrap();
        for s in 0..4 {
            assert_eq!(w.w(pi[s], s), 1);
        }
        let dense = w.matrix();
        for k in 0..4 {
            assert_eq!(dense[k].iter().map(|&v| v as usize).sum::<usize>(), 1);
            assert_eq!(dense.iter().map(|r| r[k] as usize).sum::<usize>(), 1);
        }
    }

    #[test]
    fn modify_pseudo_examples() {
        let p = vec![0, 1, 1, 2];
        let eye = modify_pseudo(&p, &Matching::identity(3)).unwrap();
        assert_eq!(hard_labels(&eye), p);

        let swap = Matching {
            pseudo_of: vec![1, 0],
        };
        let t = modify_pseudo(&[0, 1], &swap).unwrap();
        assert_eq!(t, array![[0.0, 1.0], [1.0, 0.0]]);

        let w = match_clusters(&p, &p, 3).unwrap();
        assert_eq!(hard_labels(&modify_pseudo(&p, &w).unwrap()), p);
    }

    #[test]
    fn cli_loss_examples() {
        let t = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(cli_loss(&t, &t, &t, &t).unwrap(), 0.0);

        let u = Array2::from_elem((2, 2), 0.5);
        assert_abs_diff_eq!(cli_loss(&t, &u, &t, &u).unwrap(), 2f64.ln(), epsilon = 1e-15);

        // pseudo-labels [0, 1]
        let t = array![[1.0, 0.0], [0.0, 1.0]];
        let c = array![[0.9, 0.1], [0.2, 0.8]];
        let want = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert_abs_diff_eq!(cli_loss(&t, &c, &t, &c).unwrap(), want, epsilon = 1e-14);
        assert_abs_diff_eq!(want, 0.16425, epsilon = 1e-5);
        // only hot entries contribute
        let t1 = array![[0.0, 1.0], [0.0, 1.0]];
        let want1 = -(0.1f64.ln() + 0.8f64.ln()) / 2.0;
        assert_abs_diff_eq!(cli_loss(&t1, &c, &t1, &c).unwrap(), want1, epsilon = 1e-14);
    }
}
