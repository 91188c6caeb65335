//! Hungarian algorithm for the square linear assignment problem.

/// Solves `max Σ_r weight[r][assign[r]]` over permutations of an `n × n`
/// integer weight matrix. Returns the row → column assignment.
///
/// Shortest-augmenting-path form with row/column potentials, `O(n³)`.
pub fn max_weight_assignment(weight: &[Vec<i64>]) -> Vec<usize> {
    let n = weight.len();
    if n == 0 {
        return Vec::new();
    }
    assert!(weight.iter().all(|r| r.len() == n), "weight matrix must be square");
    let max = weight.iter().flatten().copied().max().unwrap_or(0);
    // minimize non-negative cost
    let cost = |r: usize, c: usize| max - weight[r][c];

    const INF: i64 = i64::MAX / 4;
    // 1-based internal indexing; column 0 is a virtual root
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        col_owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[col_owner[j] - 1] = j - 1;
    }
    assign
}

pub fn assignment_weight(weight: &[Vec<i64>], assign: &[usize]) -> i64 {
    assign.iter().enumerate().map(|(r, &c)| weight[r][c]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = seed::rng(5);
        for n in 1..=6 {
            let perms = permutations(n);
            for _ in 0..30 {
                let w: Vec<Vec<i64>> = (0..n)
                    .map(|_| (0..n).map(|_| rng.gen_range(-5..20)).collect())
                    .collect();
                let a = max_weight_assignment(&w);
                let mut sorted = a.clone();
                sorted.sort_unstable();
                assert_eq!(sorted, (0..n).collect::<Vec<_>>());
                let best = perms.iter().map(|p| assignment_weight(&w, p)).max().unwrap();
                assert_eq!(assignment_weight(&w, &a), best);
            }
        }
    }

    #[test]
    fn diagonal_is_identity() {
        let w = vec![vec![5, 0, 0], vec![0, 5, 0], vec![0, 0, 5]];
        assert_eq!(max_weight_assignment(&w), vec![0, 1, 2]);
        assert!(max_weight_assignment(&[]).is_empty());
    }
}
