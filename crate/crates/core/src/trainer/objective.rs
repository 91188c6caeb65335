//! Per-batch objective: forward every view of every sample, evaluate the
//! stage's losses, and backpropagate into one parameter-gradient buffer.

use ndarray::{Array2, Axis};

use super::Stage;
use crate::crosslevel::cli_loss_with_grad;
use crate::error::{PiciError, Result};
use crate::losses::{
    cluster_loss_with_grad, instance_loss_with_grad, pisd_loss, reconstruction_loss_with_grad,
    LossBreakdown, LossOptions, Reconstruction, Temperatures,
};
use crate::masking::{MaskPlan, PatchSequence};
use crate::network::{forward_sample, ModelParams, Outputs, SampleForward, Var};
use crate::par::Exec;

/// One augmented, masked view of a sample.
#[derive(Debug, Clone)]
pub struct ViewInput {
    pub seq: PatchSequence,
    pub plan: MaskPlan,
}

/// Paired views of a batch, plus one-hot alignment targets for boosting.
#[derive(Debug, Clone)]
pub struct BatchInput {
    pub a: Vec<ViewInput>,
    pub b: Vec<ViewInput>,
    pub targets: Option<(Array2<f64>, Array2<f64>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectiveSettings {
    pub temperatures: Temperatures,
    pub losses: LossOptions,
}

#[derive(Debug, Clone)]
pub struct BatchResult {
    pub losses: LossBreakdown,
    /// The scalar actually minimized in this stage.
    pub total: f64,
    /// d total / d params, aligned with `ModelParams::tensors`.
    pub grads: Option<Vec<Array2<f64>>>,
}

fn outputs_for(stage: Stage) -> Result<Outputs> {
    match stage {
        Stage::Pretrain => Ok(Outputs::RECONSTRUCTION),
        Stage::Train => Ok(Outputs::ALL),
        Stage::Boost => Ok(Outputs::HEADS),
        Stage::Done => Err(PiciError::Stage("no objective after the last stage".into())),
    }
}

fn stack_rows(fwds: &[(SampleForward, Option<Reconstruction>)], pick: impl Fn(&SampleForward) -> Option<Var>) -> Array2<f64> {
    let rows: Vec<_> = fwds
        .iter()
        .map(|(f, _)| f.tape.value(pick(f).expect("head evaluated")))
        .collect();
    ndarray::concatenate(Axis(0), &rows).expect("equal widths")
}

pub fn batch_objective(
    params: &ModelParams,
    batch: &BatchInput,
    stage: Stage,
    settings: &ObjectiveSettings,
    exec: Exec,
    want_grad: bool,
) -> Result<BatchResult> {
    let outputs = outputs_for(stage)?;
    let n = batch.a.len();
    if n == 0 || batch.b.len() != n {
        return Err(PiciError::Config(format!(
            "batch views have {} and {} samples",
            n,
            batch.b.len()
        )));
    }
    let view = |k: usize| if k < n { &batch.a[k] } else { &batch.b[k - n] };

    let fwds = exec.try_map(2 * n, |k| -> Result<_> {
        let v = view(k);
        let f = forward_sample(params, &v.seq, &v.plan, outputs)?;
        let recon = match f.reconstruction {
            Some(r) => {
                let pred = PatchSequence {
                    patches: f.tape.value(r).to_owned(),
                    ..v.seq.clone()
                };
                Some(reconstruction_loss_with_grad(&pred, &v.seq, &v.plan, settings.losses.recon_all_patches)?)
            }
            None => None,
        };
        Ok((f, recon))
    })?;

    let mut losses = LossBreakdown::default();
    let mut recon_scale = 0.0;
    if outputs.reconstruction {
        let mean = |range: std::ops::Range<usize>| {
            range
                .map(|k| fwds[k].1.as_ref().expect("reconstruction evaluated").value)
                .sum::<f64>()
                / n as f64
        };
        losses.l_pisd = pisd_loss(mean(0..n), mean(n..2 * n));
        recon_scale = 0.5 / n as f64;
    }

    // per-view head gradients: rows of (d/dZ, d/dC)
    let mut head_grads: Option<(Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>)> = None;
    if outputs.heads {
        let (fa, fb) = fwds.split_at(n);
        let za = stack_rows(fa, |f| f.instance);
        let zb = stack_rows(fb, |f| f.instance);
        let ca = stack_rows(fa, |f| f.cluster);
        let cb = stack_rows(fb, |f| f.cluster);
        let t = &settings.temperatures;
        let (l_ins, gza, gzb) = instance_loss_with_grad(&za, &zb, t.tau_i, &settings.losses)?;
        let (l_clu, entropy, mut gca, mut gcb) = cluster_loss_with_grad(&ca, &cb, t.tau_c, &settings.losses)?;
        losses.l_ins = l_ins;
        losses.l_clu = l_clu;
        losses.l_entropy = entropy;
        if stage == Stage::Boost {
            let (ta, tb) = batch
                .targets
                .as_ref()
                .ok_or_else(|| PiciError::Stage("boosting batch without pseudo-label targets".into()))?;
            let (l_cli, ga, gb) = cli_loss_with_grad(ta, &ca, tb, &cb)?;
            losses.l_cli = l_cli;
            gca += &ga;
            gcb += &gb;
        }
        head_grads = Some((gza, gzb, gca, gcb));
    }
    losses.l_picd = losses.l_ins + losses.l_clu;
    let total = match stage {
        Stage::Pretrain => losses.l_pisd,
        Stage::Train => losses.l_pisd + losses.l_picd,
        Stage::Boost => losses.l_picd + losses.l_cli,
        Stage::Done => unreachable!(),
    };

    let grads = if want_grad {
        let per_sample = exec.map(2 * n, |k| {
            let (f, recon) = &fwds[k];
            let mut seeds = Vec::with_capacity(3);
            if let (Some(var), Some(r)) = (f.reconstruction, recon) {
                seeds.push((var, r.grad.mapv(|g| g * recon_scale)));
            }
            if let Some((gza, gzb, gca, gcb)) = &head_grads {
                let (gz, gc, row) = if k < n { (gza, gca, k) } else { (gzb, gcb, k - n) };
                let z = f.instance.expect("instance head evaluated");
                let c = f.cluster.expect("cluster head evaluated");
                seeds.push((z, gz.row(row).to_owned().insert_axis(Axis(0))));
                seeds.push((c, gc.row(row).to_owned().insert_axis(Axis(0))));
            }
            f.tape.backward(&seeds)
        });
        let mut acc = params.zeros_like();
        for sample in per_sample {
            for (pid, g) in sample {
                acc[pid] += &g;
            }
        }
        Some(acc)
    } else {
        None
    };
    Ok(BatchResult { losses, total, grads })
}
