//! Three-stage training: masked reconstruction pre-training, joint
//! reconstruction + dual contrastive training, then contrastive training with
//! cross-level pseudo-label alignment. Plus inference.

pub mod adam;
pub mod objective;

use std::time::Instant;

use ndarray::{Array2, Axis};

use crate::augment::{strong_augment, weak_augment, AugmentPolicy};
use crate::crosslevel::{hard_labels, view_targets};
use crate::data::{batches, Dataset};
use crate::error::{PiciError, Result};
use crate::losses::{LossBreakdown, LossOptions, Temperatures};
use crate::masking::{patchify, sample_mask, MaskPlan, PatchSequence};
use crate::metrics::{evaluate, NmiNorm, Scores};
use crate::network::checkpoint::Checkpoint;
use crate::network::{forward_sample, ModelParams, NetworkConfig, Outputs, ParamGroup};
use crate::par::Exec;
use crate::seed;
pub use adam::{AdamConfig, AdamState};
pub use objective::{batch_objective, BatchInput, BatchResult, ObjectiveSettings, ViewInput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Pretrain,
    Train,
    Boost,
    Done,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Train => "train",
            Stage::Boost => "boost",
            Stage::Done => "done",
        }
    }

    pub fn next(self) -> Stage {
        match self {
            Stage::Pretrain => Stage::Train,
            Stage::Train => Stage::Boost,
            Stage::Boost | Stage::Done => Stage::Done,
        }
    }

    fn seed_tag(self) -> u64 {
        self as u64 + 1
    }

    /// Parameter groups updated by this stage's optimizer step.
    pub fn updates(self, group: ParamGroup) -> bool {
        match self {
            Stage::Pretrain => matches!(group, ParamGroup::Encoder | ParamGroup::Decoder),
            Stage::Train => true,
            Stage::Boost => group != ParamGroup::Decoder,
            Stage::Done => false,
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = PiciError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "train" => Ok(Stage::Train),
            "boost" => Ok(Stage::Boost),
            "done" => Ok(Stage::Done),
            _ => Err(PiciError::Config(format!("unknown stage {s:?}"))),
        }
    }
}

/// Distortion magnitudes of the strong view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrongAugment {
    pub crop_scale_range: (f64, f64),
    pub jitter_strength: f64,
    pub grayscale_prob: f64,
    pub flip_prob: f64,
    pub blur_prob: f64,
}

impl Default for StrongAugment {
    fn default() -> Self {
        let p = AugmentPolicy::strong(1, [0.0; 3], [1.0; 3]);
        Self {
            crop_scale_range: p.crop_scale_range,
            jitter_strength: p.jitter_strength,
            grayscale_prob: p.grayscale_prob,
            flip_prob: p.flip_prob,
            blur_prob: p.blur_prob,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub train_epochs: usize,
    pub boost_epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub temperatures: Temperatures,
    pub mask_ratio: f64,
    pub mask_shared: bool,
    pub losses: LossOptions,
    pub augment: StrongAugment,
    pub kmeans_iters: usize,
    pub nmi_norm: NmiNorm,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 200,
            train_epochs: 800,
            boost_epochs: 50,
            batch_size: 96,
            adam: AdamConfig::default(),
            seed: 0,
            temperatures: Temperatures::default(),
            mask_ratio: 0.5,
            mask_shared: false,
            losses: LossOptions::default(),
            augment: StrongAugment::default(),
            kmeans_iters: 100,
            nmi_norm: NmiNorm::Sqrt,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn epochs(&self, stage: Stage) -> usize {
        match stage {
            Stage::Pretrain => self.pretrain_epochs,
            Stage::Train => self.train_epochs,
            Stage::Boost => self.boost_epochs,
            Stage::Done => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(PiciError::Config(m.into()));
        if self.batch_size == 0 {
            return err("train.batch must be positive");
        }
        if self.batch_size < 2 && self.train_epochs + self.boost_epochs > 0 {
            return err("train.batch must be at least 2 for the contrastive stages");
        }
        if !(self.adam.learning_rate > 0.0 && self.adam.learning_rate.is_finite()) {
            return err("train.lr must be positive");
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return err("Adam betas must lie in [0, 1)");
        }
        if !(self.adam.eps > 0.0) {
            return err("Adam eps must be positive");
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return err("mask.ratio must lie in [0, 1)");
        }
        if !(self.losses.column_eps >= 0.0) {
            return err("train.eps_column must be non-negative");
        }
        Temperatures::new(self.temperatures.tau_i, self.temperatures.tau_c)?;
        Ok(())
    }

    fn objective(&self) -> ObjectiveSettings {
        ObjectiveSettings {
            temperatures: self.temperatures,
            losses: self.losses,
        }
    }
}

/// Everything needed to resume a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: AdamState,
    pub stage: Stage,
    /// Epochs completed within `stage`.
    pub epoch: usize,
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],
}

impl TrainState {
    pub fn new(net: &NetworkConfig, cfg: &TrainConfig, dataset: &Dataset) -> Result<Self> {
        let params = ModelParams::init(net, seed::derive(cfg.seed, &[0xC0FFEE]))?;
        let optimizer = AdamState::new(params.tensors.iter().map(|t| t.dim()));
        let (norm_mean, norm_std) = dataset.channel_stats();
        Ok(Self {
            params,
            optimizer,
            stage: Stage::Pretrain,
            epoch: 0,
            norm_mean,
            norm_std,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_params(&self.params);
        ck.meta.insert("train.stage".into(), self.stage.name().into());
        ck.meta.insert("train.epoch".into(), self.epoch.to_string());
        ck.meta.insert("adam.step".into(), self.optimizer.step.to_string());
        ck.meta.insert("norm.mean".into(), fmt_triplet(&self.norm_mean));
        ck.meta.insert("norm.std".into(), fmt_triplet(&self.norm_std));
        for (spec, (m, v)) in self
            .params
            .specs()
            .iter()
            .zip(self.optimizer.m.iter().zip(&self.optimizer.v))
        {
            ck.arrays.push((format!("adam.m.{}", spec.name), m.clone()));
            ck.arrays.push((format!("adam.v.{}", spec.name), v.clone()));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let params = ck.params()?;
        let meta = |k: &str| {
            ck.meta
                .get(k)
                .ok_or_else(|| PiciError::Checkpoint(format!("missing {k}")))
        };
        let stage: Stage = meta("train.stage")?.parse()?;
        let epoch = meta("train.epoch")?
            .parse()
            .map_err(|_| PiciError::Checkpoint("bad train.epoch".into()))?;
        let step = meta("adam.step")?
            .parse()
            .map_err(|_| PiciError::Checkpoint("bad adam.step".into()))?;
        let mut optimizer = AdamState::new(params.tensors.iter().map(|t| t.dim()));
        optimizer.step = step;
        for (i, spec) in params.specs().iter().enumerate() {
            for (prefix, slot) in [("adam.m.", &mut optimizer.m[i]), ("adam.v.", &mut optimizer.v[i])] {
                let arr = ck
                    .array(&format!("{prefix}{}", spec.name))
                    .ok_or_else(|| PiciError::Checkpoint(format!("missing optimizer state for {}", spec.name)))?;
                if arr.dim() != slot.dim() {
                    return Err(PiciError::Checkpoint(format!("optimizer state shape for {}", spec.name)));
                }
                slot.assign(arr);
            }
        }
        Ok(Self {
            params,
            optimizer,
            stage,
            epoch,
            norm_mean: parse_triplet(meta("norm.mean")?)?,
            norm_std: parse_triplet(meta("norm.std")?)?,
        })
    }
}

pub fn fmt_triplet(v: &[f64; 3]) -> String {
    format!("{:?},{:?},{:?}", v[0], v[1], v[2])
}

pub fn parse_triplet(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| PiciError::Config(format!("bad number triplet {s:?}")))?;
    parts
        .try_into()
        .map_err(|_| PiciError::Config(format!("expected three values in {s:?}")))
}

/// Test-mode outputs for a whole dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: Vec<usize>,
    /// Unit-norm instance embeddings, one row per item.
    pub embeddings: Array2<f64>,
    pub probabilities: Array2<f64>,
}

/// Weak view, no masking, argmax of the cluster head.
pub fn predict_views(params: &ModelParams, views: &[PatchSequence], exec: Exec) -> Result<Prediction> {
    let plan = MaskPlan::unmasked(params.config().n_patches());
    let rows = exec.try_map(views.len(), |i| -> Result<_> {
        let f = forward_sample(params, &views[i], &plan, Outputs::HEADS)?;
        let z = f.tape.value(f.instance.expect("heads")).to_owned();
        let c = f.tape.value(f.cluster.expect("heads")).to_owned();
        Ok((z, c))
    })?;
    if rows.is_empty() {
        return Err(PiciError::EmptyDataset("nothing to predict".into()));
    }
    let z: Vec<_> = rows.iter().map(|r| r.0.view()).collect();
    let c: Vec<_> = rows.iter().map(|r| r.1.view()).collect();
    let probabilities = ndarray::concatenate(Axis(0), &c).expect("equal widths");
    Ok(Prediction {
        labels: hard_labels(&probabilities),
        embeddings: ndarray::concatenate(Axis(0), &z).expect("equal widths"),
        probabilities,
    })
}

pub fn weak_views(dataset: &Dataset, net: &NetworkConfig, mean: [f64; 3], std: [f64; 3], exec: Exec) -> Result<Vec<PatchSequence>> {
    let policy = AugmentPolicy::weak(net.image_size, mean, std);
    exec.try_map(dataset.len(), |i| patchify(&weak_augment(&dataset.items[i].image, &policy)?, net.patch_size))
}

/// Inference over a dataset with the given normalization constants.
pub fn predict(params: &ModelParams, dataset: &Dataset, mean: [f64; 3], std: [f64; 3], exec: Exec) -> Result<Prediction> {
    let views = weak_views(dataset, params.config(), mean, std, exec)?;
    predict_views(params, &views, exec)
}

/// Summary of one completed epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub scores: Scores,
    pub wall_seconds: f64,
}

/// Hooks called by [`Trainer::run`].
pub trait RunObserver {
    fn epoch_end(&mut self, record: &EpochRecord, state: &TrainState) -> Result<()>;

    /// Called once per finished stage, after `state` has moved to the next one.
    fn stage_end(&mut self, finished: Stage, state: &TrainState) -> Result<()>;
}

/// Observer that keeps the epoch records in memory.
#[derive(Debug, Default)]
pub struct Recorder {
    pub records: Vec<EpochRecord>,
    pub finished: Vec<Stage>,
}

impl RunObserver for Recorder {
    fn epoch_end(&mut self, record: &EpochRecord, _: &TrainState) -> Result<()> {
        self.records.push(*record);
        Ok(())
    }

    fn stage_end(&mut self, finished: Stage, _: &TrainState) -> Result<()> {
        self.finished.push(finished);
        Ok(())
    }
}

/// Training driver bound to one dataset.
pub struct Trainer<'d> {
    pub config: TrainConfig,
    net: NetworkConfig,
    dataset: &'d Dataset,
    weak: Vec<PatchSequence>,
    strong: AugmentPolicy,
}

impl<'d> Trainer<'d> {
    pub fn new(config: TrainConfig, state: &TrainState, dataset: &'d Dataset) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(PiciError::EmptyDataset(dataset.name.clone()));
        }
        let net = state.params.config().clone();
        let a = config.augment;
        let strong = AugmentPolicy {
            crop_scale_range: a.crop_scale_range,
            jitter_strength: a.jitter_strength,
            grayscale_prob: a.grayscale_prob,
            flip_prob: a.flip_prob,
            blur_prob: a.blur_prob,
            ..AugmentPolicy::strong(net.image_size, state.norm_mean, state.norm_std)
        };
        strong.validate()?;
        let weak = weak_views(dataset, &net, state.norm_mean, state.norm_std, config.exec)?;
        Ok(Self {
            config,
            net,
            dataset,
            weak,
            strong,
        })
    }

    fn view_seed(&self, stage: Stage, epoch: usize, item: usize, tag: u64) -> u64 {
        seed::derive(self.config.seed, &[stage.seed_tag(), epoch as u64, item as u64, tag])
    }

    /// Both views of `item` for a given stage and epoch. Pure in its arguments.
    pub fn views(&self, stage: Stage, epoch: usize, item: usize) -> Result<(ViewInput, ViewInput)> {
        let n = self.net.n_patches();
        let ratio = self.config.mask_ratio;
        let plan_a = sample_mask(n, ratio, self.view_seed(stage, epoch, item, 10))?;
        let plan_b = if self.config.mask_shared {
            plan_a.clone()
        } else {
            sample_mask(n, ratio, self.view_seed(stage, epoch, item, 11))?
        };
        let strong = strong_augment(&self.dataset.items[item].image, &self.strong, self.view_seed(stage, epoch, item, 1))?;
        Ok((
            ViewInput {
                seq: self.weak[item].clone(),
                plan: plan_a,
            },
            ViewInput {
                seq: patchify(&strong, self.net.patch_size)?,
                plan: plan_b,
            },
        ))
    }

    pub fn batch_input(&self, stage: Stage, epoch: usize, items: &[usize]) -> Result<BatchInput> {
        let views = self
            .config
            .exec
            .try_map(items.len(), |k| self.views(stage, epoch, items[k]))?;
        let (a, b) = views.into_iter().unzip();
        Ok(BatchInput { a, b, targets: None })
    }

    /// One-hot alignment targets for every item and both views, computed
    /// with the current parameters on this epoch's views.
    pub fn pseudo_targets(&self, params: &ModelParams, epoch: usize) -> Result<(Array2<f64>, Array2<f64>)> {
        let exec = self.config.exec;
        let n = self.dataset.len();
        let outs = exec.try_map(n, |i| -> Result<_> {
            let (va, vb) = self.views(Stage::Boost, epoch, i)?;
            let mut rows = Vec::with_capacity(2);
            for v in [va, vb] {
                let f = forward_sample(params, &v.seq, &v.plan, Outputs::HEADS)?;
                rows.push((
                    f.tape.value(f.instance.expect("heads")).to_owned(),
                    f.tape.value(f.cluster.expect("heads")).to_owned(),
                ));
            }
            Ok(rows)
        })?;
        let mut targets = Vec::with_capacity(2);
        for view in 0..2 {
            let z: Vec<_> = outs.iter().map(|r| r[view].0.view()).collect();
            let c: Vec<_> = outs.iter().map(|r| r[view].1.view()).collect();
            let z = ndarray::concatenate(Axis(0), &z).expect("equal widths");
            let c = ndarray::concatenate(Axis(0), &c).expect("equal widths");
            let km_seed = seed::derive(self.config.seed, &[Stage::Boost.seed_tag(), epoch as u64, 0x4B4D, view as u64]);
            targets.push(view_targets(&z, &c, km_seed, self.config.kmeans_iters, exec)?);
        }
        let tb = targets.pop().expect("two views");
        let ta = targets.pop().expect("two views");
        Ok((ta, tb))
    }

    fn run_epoch(&self, state: &mut TrainState, stage: Stage) -> Result<LossBreakdown> {
        if state.stage != stage {
            return Err(PiciError::Stage(format!(
                "cannot run a {} epoch while in stage {}",
                stage.name(),
                state.stage.name()
            )));
        }
        let epoch = state.epoch + 1;
        let targets = if stage == Stage::Boost {
            Some(self.pseudo_targets(&state.params, epoch)?)
        } else {
            None
        };
        let order = batches(
            self.dataset.len(),
            self.config.batch_size,
            seed::derive(self.config.seed, &[stage.seed_tag(), epoch as u64, 0xBA7C]),
            stage == Stage::Pretrain,
        );
        if order.is_empty() {
            return Err(PiciError::Config(format!(
                "dataset of {} items yields no full batch of {}",
                self.dataset.len(),
                self.config.batch_size
            )));
        }
        let settings = self.config.objective();
        let mut rows = Vec::with_capacity(order.len());
        for (bi, items) in order.iter().enumerate() {
            let mut input = self.batch_input(stage, epoch, items)?;
            if let Some((ta, tb)) = &targets {
                input.targets = Some((ta.select(Axis(0), items), tb.select(Axis(0), items)));
            }
            let result = batch_objective(&state.params, &input, stage, &settings, self.config.exec, true)?;
            let grads = result.grads.expect("gradients requested");
            let finite = result.losses.is_finite() && grads.iter().all(|g| g.iter().all(|v| v.is_finite()));
            if !finite {
                return Err(PiciError::Divergence {
                    stage: stage.name(),
                    epoch,
                    batch: bi,
                });
            }
            let params = &state.params;
            let update: Vec<bool> = (0..params.tensors.len())
                .map(|i| stage.updates(params.group(i)))
                .collect();
            state
                .optimizer
                .step(&self.config.adam, &mut state.params.tensors, &grads, |i| update[i]);
            rows.push(result.losses);
        }
        state.epoch = epoch;
        Ok(LossBreakdown::mean(&rows))
    }

    /// One epoch of masked reconstruction; updates encoder and decoder.
    pub fn pretrain_epoch(&self, state: &mut TrainState) -> Result<LossBreakdown> {
        self.run_epoch(state, Stage::Pretrain)
    }

    /// One epoch of reconstruction plus both contrastive losses; updates everything.
    pub fn train_epoch(&self, state: &mut TrainState) -> Result<LossBreakdown> {
        self.run_epoch(state, Stage::Train)
    }

    /// One epoch of contrastive plus alignment losses; the decoder is frozen.
    pub fn boost_epoch(&self, state: &mut TrainState) -> Result<LossBreakdown> {
        self.run_epoch(state, Stage::Boost)
    }

    pub fn predict(&self, params: &ModelParams) -> Result<Prediction> {
        predict_views(params, &self.weak, self.config.exec)
    }

    pub fn evaluate(&self, params: &ModelParams) -> Result<Scores> {
        let pred = self.predict(params)?;
        evaluate(&self.dataset.labels(), &pred.labels, self.config.nmi_norm)
    }

    /// Runs epochs until `last` has finished (or everything, for `Stage::Done`).
    pub fn run(&self, state: &mut TrainState, last: Stage, observer: &mut dyn RunObserver) -> Result<()> {
        while state.stage != Stage::Done && state.stage <= last {
            let stage = state.stage;
            if state.epoch < self.config.epochs(stage) {
                let start = Instant::now();
                let losses = self.run_epoch(state, stage)?;
                let scores = self.evaluate(&state.params)?;
                let record = EpochRecord {
                    stage,
                    epoch: state.epoch,
                    losses,
                    scores,
                    wall_seconds: start.elapsed().as_secs_f64(),
                };
                log::info!(
                    "{} epoch {}: pisd {:.5} ins {:.5} clu {:.5} cli {:.5} | nmi {:.4} acc {:.4} ari {:.4}",
                    stage.name(),
                    record.epoch,
                    losses.l_pisd,
                    losses.l_ins,
                    losses.l_clu,
                    losses.l_cli,
                    scores.nmi,
                    scores.acc,
                    scores.ari
                );
                observer.epoch_end(&record, state)?;
            }
            if state.epoch >= self.config.epochs(stage) {
                state.stage = stage.next();
                state.epoch = 0;
                observer.stage_end(stage, state)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;

    fn small_setup() -> (Dataset, NetworkConfig, TrainConfig) {
        let ds = synth_blobs(3, 4, 16, 1).unwrap();
        let net = NetworkConfig {
            embed_dim: 8,
            n_layers: 1,
            n_heads: 2,
            decoder_dim: 8,
            decoder_layers: 1,
            decoder_heads: 2,
            patch_size: 8,
            image_size: 16,
            instance_dim: 4,
            n_clusters: 3,
        };
        let cfg = TrainConfig {
            pretrain_epochs: 1,
            train_epochs: 1,
            boost_epochs: 1,
            batch_size: 4,
            adam: AdamConfig {
                learning_rate: 1e-3,
                ..Default::default()
            },
            ..Default::default()
        };
        (ds, net, cfg)
    }

    #[test]
    fn stage_order_and_update_sets() {
        assert!(Stage::Pretrain < Stage::Train && Stage::Train < Stage::Boost && Stage::Boost < Stage::Done);
        assert!(!Stage::Pretrain.updates(ParamGroup::ClusterHead));
        assert!(!Stage::Boost.updates(ParamGroup::Decoder));
        assert!(Stage::Boost.updates(ParamGroup::Encoder));
        assert!(Stage::Train.updates(ParamGroup::Decoder));
        assert_eq!("boost".parse::<Stage>().unwrap(), Stage::Boost);
    }

    #[test]
    fn published_defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.pretrain_epochs, c.train_epochs, c.boost_epochs), (200, 800, 50));
        assert_eq!(c.batch_size, 96);
        assert_eq!(c.adam.learning_rate, 1e-4);
        assert_eq!((c.temperatures.tau_i, c.temperatures.tau_c), (0.5, 1.0));
        assert_eq!(c.mask_ratio, 0.5);
        c.validate().unwrap();
    }

    #[test]
    fn wrong_stage_is_rejected() {
        let (ds, net, cfg) = small_setup();
        let mut state = TrainState::new(&net, &cfg, &ds).unwrap();
        let trainer = Trainer::new(cfg, &state, &ds).unwrap();
        assert!(matches!(trainer.boost_epoch(&mut state), Err(PiciError::Stage(_))));
        trainer.pretrain_epoch(&mut state).unwrap();
        assert_eq!(state.epoch, 1);
    }

    #[test]
    fn run_walks_every_stage() {
        let (ds, net, cfg) = small_setup();
        let mut state = TrainState::new(&net, &cfg, &ds).unwrap();
        let trainer = Trainer::new(cfg, &state, &ds).unwrap();
        let mut rec = Recorder::default();
        trainer.run(&mut state, Stage::Done, &mut rec).unwrap();
        assert_eq!(state.stage, Stage::Done);
        let stages: Vec<_> = rec.records.iter().map(|r| (r.stage, r.epoch)).collect();
        assert_eq!(stages, vec![(Stage::Pretrain, 1), (Stage::Train, 1), (Stage::Boost, 1)]);
        assert_eq!(rec.finished, vec![Stage::Pretrain, Stage::Train, Stage::Boost]);
        for r in &rec.records {
            assert_eq!(r.losses.l_picd, r.losses.l_ins + r.losses.l_clu);
        }
    }

    #[test]
    fn checkpoint_restores_state() {
        let (ds, net, cfg) = small_setup();
        let mut state = TrainState::new(&net, &cfg, &ds).unwrap();
        let trainer = Trainer::new(cfg, &state, &ds).unwrap();
        trainer.pretrain_epoch(&mut state).unwrap();
        let ck = Checkpoint::from_bytes(&state.to_checkpoint().to_bytes()).unwrap();
        let back = TrainState::from_checkpoint(&ck).unwrap();
        assert_eq!(back.params.tensors, state.params.tensors);
        assert_eq!(back.optimizer, state.optimizer);
        assert_eq!((back.stage, back.epoch), (state.stage, state.epoch));
        assert_eq!(back.norm_mean, state.norm_mean);
        assert_eq!(back.norm_std, state.norm_std);
    }

    #[test]
    fn prediction_uses_unmasked_weak_views() {
        let (ds, net, cfg) = small_setup();
        let state = TrainState::new(&net, &cfg, &ds).unwrap();
        let trainer = Trainer::new(cfg, &state, &ds).unwrap();
        let a = trainer.predict(&state.params).unwrap();
        let b = predict(&state.params, &ds, state.norm_mean, state.norm_std, Exec::Sequential).unwrap();
        assert_eq!(a, b);
        assert!(a.labels.iter().all(|&l| l < 3));
        assert_eq!(a.embeddings.dim(), (12, 4));
    }

    #[test]
    fn triplets_roundtrip() {
        let v = [0.1, 1.0 / 3.0, 2.5e-7];
        assert_eq!(parse_triplet(&fmt_triplet(&v)).unwrap(), v);
        assert!(parse_triplet("1,2").is_err());
    }
}
