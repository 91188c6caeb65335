//! External clustering metrics computed from a contingency table.

use std::collections::BTreeMap;

use crate::assignment::{assignment_weight, max_weight_assignment};
use crate::error::{PiciError, Result};

/// Counts `table[t][p]` of samples with true label `t` and prediction `p`,
/// after relabeling both label sets densely in sorted order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Contingency {
    pub table: Vec<Vec<u64>>,
    pub row_sums: Vec<u64>,
    pub col_sums: Vec<u64>,
    pub n: u64,
}

fn dense(labels: &[usize]) -> (Vec<usize>, usize) {
    let ids: BTreeMap<usize, usize> = labels
        .iter()
        .copied()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, l)| (l, i))
        .collect();
    (labels.iter().map(|l| ids[l]).collect(), ids.len())
}

impl Contingency {
    pub fn new(truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(PiciError::Input(format!(
                "label vectors have lengths {} and {}",
                truth.len(),
                pred.len()
            )));
        }
        if truth.is_empty() {
            return Err(PiciError::Input("empty label vectors".into()));
        }
        let (t, kt) = dense(truth);
        let (p, kp) = dense(pred);
        let mut table = vec![vec![0u64; kp]; kt];
        for (&a, &b) in t.iter().zip(&p) {
            table[a][b] += 1;
        }
        let row_sums = table.iter().map(|r| r.iter().sum()).collect();
        let col_sums = (0..kp).map(|j| table.iter().map(|r| r[j]).sum()).collect();
        Ok(Self {
            table,
            row_sums,
            col_sums,
            n: truth.len() as u64,
        })
    }

    pub fn n_true(&self) -> usize {
        self.table.len()
    }

    pub fn n_pred(&self) -> usize {
        self.col_sums.len()
    }
}

fn entropy(counts: &[u64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalization of mutual information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NmiNorm {
    /// `I / sqrt(H_true · H_pred)`
    #[default]
    Sqrt,
    /// `I / ((H_true + H_pred) / 2)`
    Arithmetic,
}

impl std::str::FromStr for NmiNorm {
    type Err = PiciError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sqrt" => Ok(Self::Sqrt),
            "arithmetic" => Ok(Self::Arithmetic),
            other => Err(PiciError::Config(format!("unknown NMI normalization {other:?}"))),
        }
    }
}

pub fn nmi(truth: &[usize], pred: &[usize]) -> Result<f64> {
    nmi_with(truth, pred, NmiNorm::Sqrt)
}

pub fn nmi_with(truth: &[usize], pred: &[usize], norm: NmiNorm) -> Result<f64> {
    let c = Contingency::new(truth, pred)?;
    let n = c.n as f64;
    let ht = entropy(&c.row_sums, n);
    let hp = entropy(&c.col_sums, n);
    if ht == 0.0 || hp == 0.0 {
        // identical only when both are single-cluster partitions
        return Ok(if ht == hp { 1.0 } else { 0.0 });
    }
    let mut mi = 0.0;
    for (i, row) in c.table.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0 {
                let nij = nij as f64;
                mi += nij / n * (n * nij / (c.row_sums[i] as f64 * c.col_sums[j] as f64)).ln();
            }
        }
    }
    let denom = match norm {
        NmiNorm::Sqrt => (ht * hp).sqrt(),
        NmiNorm::Arithmetic => 0.5 * (ht + hp),
    };
    Ok((mi / denom).clamp(0.0, 1.0))
}

/// Best-match accuracy over one-to-one cluster → class assignments.
pub fn accuracy(truth: &[usize], pred: &[usize]) -> Result<f64> {
    let c = Contingency::new(truth, pred)?;
    let k = c.n_true().max(c.n_pred());
    // rows: predicted clusters, columns: classes
    let weight: Vec<Vec<i64>> = (0..k)
        .map(|p| {
            (0..k)
                .map(|t| {
                    if t < c.n_true() && p < c.n_pred() {
                        c.table[t][p] as i64
                    } else {
                        0
                    }
                })
                .collect()
        })
        .collect();
    let assign = max_weight_assignment(&weight);
    Ok(assignment_weight(&weight, &assign) as f64 / c.n as f64)
}

fn pairs(x: u64) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

pub fn ari(truth: &[usize], pred: &[usize]) -> Result<f64> {
    if truth.len() < 2 {
        return Err(PiciError::Input("ARI needs at least two samples".into()));
    }
    let c = Contingency::new(truth, pred)?;
    let index: f64 = c.table.iter().flatten().map(|&v| pairs(v)).sum();
    let sum_rows: f64 = c.row_sums.iter().map(|&v| pairs(v)).sum();
    let sum_cols: f64 = c.col_sums.iter().map(|&v| pairs(v)).sum();
    let expected = sum_rows * sum_cols / pairs(c.n);
    let max_index = 0.5 * (sum_rows + sum_cols);
    if max_index == expected {
        // both partitions are all-in-one or all-singletons, hence identical
        return Ok(1.0);
    }
    Ok((index - expected) / (max_index - expected))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub nmi: f64,
    pub acc: f64,
    pub ari: f64,
}

pub fn evaluate(truth: &[usize], pred: &[usize], norm: NmiNorm) -> Result<Scores> {
    Ok(Scores {
        nmi: nmi_with(truth, pred, norm)?,
        acc: accuracy(truth, pred)?,
        ari: if truth.len() >= 2 { ari(truth, pred)? } else { 1.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn contingency_marginals() {
        let c = Contingency::new(&[0, 0, 1, 1], &[5, 7, 7, 7]).unwrap();
        assert_eq!(c.table, vec![vec![1, 1], vec![0, 2]]);
        assert_eq!(c.row_sums, vec![2, 2]);
        assert_eq!(c.col_sums, vec![1, 3]);
        assert_eq!(c.n, 4);
        assert!(Contingency::new(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn nmi_examples() {
        let t = [0, 0, 1, 1, 2, 2];
        assert_abs_diff_eq!(nmi(&t, &t).unwrap(), 1.0, epsilon = 1e-12);
        assert_eq!(nmi(&[0, 0, 1, 1], &[3, 3, 3, 3]).unwrap(), 0.0);
        assert_eq!(nmi(&[1, 1, 1], &[0, 0, 0]).unwrap(), 1.0);
        // true=[0,0,1,1], pred=[0,1,1,1]
        // I = 1/4 ln 2 + 1/4 ln(2/3) + 1/2 ln(4/3); H_t = ln 2; H_p = -(1/4 ln 1/4 + 3/4 ln 3/4)
        let i = 0.25 * 2f64.ln() + 0.25 * (2.0f64 / 3.0).ln() + 0.5 * (4.0f64 / 3.0).ln();
        let hp = -(0.25 * 0.25f64.ln() + 0.75 * 0.75f64.ln());
        let want = i / (2f64.ln() * hp).sqrt();
        assert_abs_diff_eq!(nmi(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap(), want, epsilon = 1e-14);
        let arith = i / (0.5 * (2f64.ln() + hp));
        assert_abs_diff_eq!(
            nmi_with(&[0, 0, 1, 1], &[0, 1, 1, 1], NmiNorm::Arithmetic).unwrap(),
            arith,
            epsilon = 1e-14
        );
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 0, 1, 1, 2], &[2, 2, 0, 0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert_eq!(accuracy(&[4], &[9]).unwrap(), 1.0);
        // more clusters than classes: padded assignment
        assert_eq!(accuracy(&[0, 0, 0, 1], &[0, 1, 2, 3]).unwrap(), 0.5);
        assert!(matches!(accuracy(&[0, 1], &[0]), Err(PiciError::Input(_))));
    }

    #[test]
    fn ari_examples() {
        let t = [0, 0, 1, 1, 2, 2];
        assert_abs_diff_eq!(ari(&t, &t).unwrap(), 1.0, epsilon = 1e-12);
        assert_eq!(ari(&[0, 0, 1, 1, 2, 2], &[0; 6]).unwrap(), 0.0);
        // pairs of true=[0,0,1,1], pred=[0,1,1,1]: index 1, rows 2, cols 3, total 6
        // expected 1, max 2.5 → 0
        assert_abs_diff_eq!(ari(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap(), 0.0, epsilon = 1e-15);
        assert!(matches!(ari(&[0], &[0]), Err(PiciError::Input(_))));
        assert_eq!(ari(&[0, 1, 2], &[5, 6, 7]).unwrap(), 1.0);
    }

    #[test]
    fn norm_parses() {
        assert_eq!("sqrt".parse::<NmiNorm>().unwrap(), NmiNorm::Sqrt);
        assert_eq!("arithmetic".parse::<NmiNorm>().unwrap(), NmiNorm::Arithmetic);
        assert!("geometric".parse::<NmiNorm>().is_err());
    }
}
