//! Training objectives with their analytic input gradients.
//!
//! Every `*_with_grad` function returns the loss value together with the
//! gradient of that value with respect to each of its matrix inputs; the plain
//! variants return the value only.

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::error::{PiciError, Result};
use crate::masking::{MaskPlan, PatchSequence};

const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperatures {
    pub tau_i: f64,
    pub tau_c: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Self {
            tau_i: 0.5,
            tau_c: 1.0,
        }
    }
}

impl Temperatures {
    pub fn new(tau_i: f64, tau_c: f64) -> Result<Self> {
        for t in [tau_i, tau_c] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(PiciError::InvalidTemperature(t));
            }
        }
        Ok(Self { tau_i, tau_c })
    }
}

/// Switches that select between formula variants.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossOptions {
    /// Keep the anchor's similarity with itself in the contrastive denominator.
    pub include_self: bool,
    /// Reconstruction error over every patch instead of only masked ones.
    pub recon_all_patches: bool,
    /// Constant added to cluster-probability columns before the cluster loss.
    pub column_eps: f64,
}

/// Per-batch loss values. `l_picd` is always `l_ins + l_clu`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_pisd: f64,
    pub l_ins: f64,
    pub l_clu: f64,
    pub l_entropy: f64,
    pub l_picd: f64,
    pub l_cli: f64,
}

impl LossBreakdown {
    pub fn new(l_pisd: f64, l_ins: f64, l_clu: f64, l_entropy: f64, l_cli: f64) -> Self {
        Self {
            l_pisd,
            l_ins,
            l_clu,
            l_entropy,
            l_picd: l_ins + l_clu,
            l_cli,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_pisd, self.l_ins, self.l_clu, self.l_entropy, self.l_picd, self.l_cli]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Running mean over batches.
    pub fn mean(rows: &[LossBreakdown]) -> LossBreakdown {
        if rows.is_empty() {
            return LossBreakdown::default();
        }
        let n = rows.len() as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| rows.iter().map(f).sum::<f64>() / n;
        LossBreakdown::new(
            avg(|r| r.l_pisd),
            avg(|r| r.l_ins),
            avg(|r| r.l_clu),
            avg(|r| r.l_entropy),
            avg(|r| r.l_cli),
        )
    }
}

pub fn cosine_sim(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(PiciError::ZeroNorm);
    }
    Ok(u.dot(&v) / (nu * nv))
}

fn normalize_rows(x: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if norms.iter().any(|n| *n == 0.0) {
        return Err(PiciError::ZeroNorm);
    }
    Ok((x / &norms.clone().insert_axis(Axis(1)), norms))
}

/// Gradient through `u = x / ‖x‖` row-wise.
fn normalize_rows_backward(u: &Array2<f64>, norms: &Array1<f64>, gu: &Array2<f64>) -> Array2<f64> {
    let mut gx = gu.clone();
    for r in 0..gx.nrows() {
        let proj = u.row(r).dot(&gu.row(r));
        let mut row = gx.row_mut(r);
        row.scaled_add(-proj, &u.row(r));
        row.mapv_inplace(|v| v / norms[r]);
    }
    gx
}

/// Symmetric InfoNCE over paired rows of `a` and `b` under cosine similarity.
///
/// Row `i` of `a` is positive with row `i` of `b`; the remaining `2n - 2`
/// rows are negatives. Returns the mean of the `2n` anchor losses and the
/// gradients for `a` and `b`.
pub fn paired_info_nce(
    a: &Array2<f64>,
    b: &Array2<f64>,
    tau: f64,
    include_self: bool,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(PiciError::InvalidTemperature(tau));
    }
    if a.dim() != b.dim() || a.nrows() == 0 {
        return Err(PiciError::Config(format!(
            "contrastive views have shapes {:?} and {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let n = a.nrows();
    let (ua, na) = normalize_rows(a)?;
    let (ub, nb) = normalize_rows(b)?;
    let u = ndarray::concatenate(Axis(0), &[ua.view(), ub.view()]).expect("same width");
    let s = u.dot(&u.t()) / tau;

    let two_n = 2 * n;
    let scale = 1.0 / two_n as f64;
    let mut loss = 0.0;
    let mut g = Array2::<f64>::zeros((two_n, two_n));
    for r in 0..two_n {
        let pos = (r + n) % two_n;
        let row = s.row(r);
        let in_denominator = |j: usize| include_self || j != r;
        let m = (0..two_n)
            .filter(|&j| in_denominator(j))
            .fold(f64::NEG_INFINITY, |acc, j| acc.max(row[j]));
        let z: f64 = (0..two_n)
            .filter(|&j| in_denominator(j))
            .map(|j| (row[j] - m).exp())
            .sum();
        loss += m + z.ln() - row[pos];
        let mut grow = g.row_mut(r);
        for j in (0..two_n).filter(|&j| in_denominator(j)) {
            grow[j] = scale * (row[j] - m).exp() / z;
        }
        grow[pos] -= scale;
    }
    let gu = (&g + &g.t()).dot(&u) / tau;
    let gua = gu.slice(ndarray::s![..n, ..]).to_owned();
    let gub = gu.slice(ndarray::s![n.., ..]).to_owned();
    Ok((
        loss * scale,
        normalize_rows_backward(&ua, &na, &gua),
        normalize_rows_backward(&ub, &nb, &gub),
    ))
}

/// Instance-level contrastive loss over the `N` sample pairs.
pub fn instance_loss_with_grad(
    za: &Array2<f64>,
    zb: &Array2<f64>,
    tau_i: f64,
    opts: &LossOptions,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    paired_info_nce(za, zb, tau_i, opts.include_self)
}

pub fn instance_loss(za: &Array2<f64>, zb: &Array2<f64>, tau_i: f64) -> Result<f64> {
    Ok(instance_loss_with_grad(za, zb, tau_i, &LossOptions::default())?.0)
}

fn check_probabilities(c: &Array2<f64>) -> Result<()> {
    if let Some(v) = c.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(PiciError::InvalidProbability(format!("entry {v}")));
    }
    Ok(())
}

fn view_entropy(c: &Array2<f64>) -> (f64, Array2<f64>) {
    let n = c.nrows() as f64;
    let p = c.sum_axis(Axis(0)) / n;
    let mut h = 0.0;
    let mut dp = Array1::zeros(p.len());
    for (i, &pi) in p.iter().enumerate() {
        let clamped = pi.max(LOG_FLOOR);
        h -= pi * clamped.ln();
        dp[i] = -(clamped.ln() + if pi >= LOG_FLOOR { 1.0 } else { 0.0 });
    }
    let grad = Array2::from_shape_fn(c.dim(), |(_, i)| dp[i] / n);
    (h, grad)
}

/// Sum of the entropies of the mean cluster assignment in both views.
pub fn cluster_entropy_with_grad(
    ca: &Array2<f64>,
    cb: &Array2<f64>,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    check_probabilities(ca)?;
    check_probabilities(cb)?;
    if ca.nrows() == 0 || cb.nrows() == 0 {
        return Err(PiciError::InvalidProbability("empty batch".into()));
    }
    let (ha, ga) = view_entropy(ca);
    let (hb, gb) = view_entropy(cb);
    Ok((ha + hb, ga, gb))
}

pub fn cluster_entropy(ca: &Array2<f64>, cb: &Array2<f64>) -> Result<f64> {
    Ok(cluster_entropy_with_grad(ca, cb)?.0)
}

/// Cluster-level contrastive loss over probability columns, minus the
/// assignment entropy. Returns `(l_clu, entropy, grad_a, grad_b)`.
pub fn cluster_loss_with_grad(
    ca: &Array2<f64>,
    cb: &Array2<f64>,
    tau_c: f64,
    opts: &LossOptions,
) -> Result<(f64, f64, Array2<f64>, Array2<f64>)> {
    if ca.dim() != cb.dim() || ca.ncols() < 2 {
        return Err(PiciError::Config(format!(
            "cluster matrices {:?} and {:?} need equal shapes with at least 2 columns",
            ca.dim(),
            cb.dim()
        )));
    }
    check_probabilities(ca)?;
    check_probabilities(cb)?;
    let ya = ca.t().mapv(|v| v + opts.column_eps);
    let yb = cb.t().mapv(|v| v + opts.column_eps);
    for (view, y) in [('a', &ya), ('b', &yb)] {
        if let Some(cluster) = y.rows().into_iter().position(|r| r.iter().all(|v| *v == 0.0)) {
            return Err(PiciError::EmptyCluster { view, cluster });
        }
    }
    let (contrast, gya, gyb) = paired_info_nce(&ya, &yb, tau_c, opts.include_self)?;
    let (h, gha, ghb) = cluster_entropy_with_grad(ca, cb)?;
    Ok((
        contrast - h,
        h,
        gya.reversed_axes() - gha,
        gyb.reversed_axes() - ghb,
    ))
}

pub fn cluster_loss(ca: &Array2<f64>, cb: &Array2<f64>, tau_c: f64) -> Result<f64> {
    Ok(cluster_loss_with_grad(ca, cb, tau_c, &LossOptions::default())?.0)
}

/// Mean squared pixel error over the scored patches.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub value: f64,
    /// Gradient with respect to the prediction, `n_patches × patch_dim`.
    pub grad: Array2<f64>,
    /// Set when nothing was masked, so the masked-only loss is trivially 0.
    pub empty_mask: bool,
}

pub fn reconstruction_loss_with_grad(
    pred: &PatchSequence,
    target: &PatchSequence,
    plan: &MaskPlan,
    all_patches: bool,
) -> Result<Reconstruction> {
    if pred.patches.dim() != target.patches.dim() || pred.grid != target.grid {
        return Err(PiciError::PatchGrid(format!(
            "prediction {:?} and target {:?} differ",
            pred.patches.dim(),
            target.patches.dim()
        )));
    }
    plan.check(pred.n_patches())?;
    let scored: Vec<usize> = if all_patches {
        (0..pred.n_patches()).collect()
    } else {
        plan.masked_idx.clone()
    };
    let mut grad = Array2::zeros(pred.patches.dim());
    if scored.is_empty() {
        return Ok(Reconstruction {
            value: 0.0,
            grad,
            empty_mask: true,
        });
    }
    let denom = (scored.len() * pred.patch_dim()) as f64;
    let mut value = 0.0;
    for &k in &scored {
        let diff = &pred.patches.row(k) - &target.patches.row(k);
        value += diff.dot(&diff);
        grad.row_mut(k).assign(&(diff * (2.0 / denom)));
    }
    Ok(Reconstruction {
        value: value / denom,
        grad,
        empty_mask: false,
    })
}

pub fn reconstruction_loss(pred: &PatchSequence, target: &PatchSequence, plan: &MaskPlan) -> Result<f64> {
    Ok(reconstruction_loss_with_grad(pred, target, plan, false)?.value)
}

/// Average of the two views' reconstruction errors.
pub fn pisd_loss(recon_a: f64, recon_b: f64) -> f64 {
    0.5 * (recon_a + recon_b)
}
