//! Transformer encoder over visible patches, masked-patch decoder, and the
//! instance / cluster projection heads.

pub mod checkpoint;
pub mod tape;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{PiciError, Result};
use crate::masking::{MaskPlan, PatchSequence};
use crate::seed;
pub use tape::{Tape, Var};

const MLP_RATIO: usize = 4;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkConfig {
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub decoder_dim: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub instance_dim: usize,
    pub n_clusters: usize,
}

impl NetworkConfig {
    fn with_encoder(embed_dim: usize, n_layers: usize, n_heads: usize) -> Self {
        Self {
            embed_dim,
            n_layers,
            n_heads,
            decoder_dim: 512,
            decoder_layers: 8,
            decoder_heads: 16,
            patch_size: 16,
            image_size: 224,
            instance_dim: 128,
            n_clusters: 4,
        }
    }

    pub fn vit_tiny() -> Self {
        Self::with_encoder(192, 4, 12)
    }

    pub fn vit_small() -> Self {
        Self::with_encoder(384, 6, 12)
    }

    pub fn vit_base() -> Self {
        Self::with_encoder(768, 12, 12)
    }

    /// Desk-scale preset used by tests and the toy end-to-end run.
    pub fn tiny() -> Self {
        Self {
            embed_dim: 32,
            n_layers: 2,
            n_heads: 4,
            decoder_dim: 32,
            decoder_layers: 2,
            decoder_heads: 4,
            patch_size: 8,
            image_size: 32,
            instance_dim: 128,
            n_clusters: 3,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "vit-tiny" => Some(Self::vit_tiny()),
            "vit-small" => Some(Self::vit_small()),
            "vit-base" => Some(Self::vit_base()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn channels(&self) -> usize {
        3
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(PiciError::Config(m));
        let positive = [
            ("model.dim", self.embed_dim),
            ("model.layers", self.n_layers),
            ("model.heads", self.n_heads),
            ("model.decoder_dim", self.decoder_dim),
            ("model.decoder_heads", self.decoder_heads),
            ("model.patch_size", self.patch_size),
            ("model.image_size", self.image_size),
            ("model.instance_dim", self.instance_dim),
        ];
        for (k, v) in positive {
            if v == 0 {
                return err(format!("{k} must be positive"));
            }
        }
        if self.embed_dim % self.n_heads != 0 {
            return err(format!(
                "model.dim {} not divisible by model.heads {}",
                self.embed_dim, self.n_heads
            ));
        }
        if self.decoder_dim % self.decoder_heads != 0 {
            return err(format!(
                "model.decoder_dim {} not divisible by model.decoder_heads {}",
                self.decoder_dim, self.decoder_heads
            ));
        }
        if self.n_clusters < 2 {
            return err("model.clusters must be at least 2".into());
        }
        if self.image_size % self.patch_size != 0 {
            return err(format!(
                "model.image_size {} not divisible by model.patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        Ok(())
    }
}

/// Which sub-network a parameter belongs to; stages update subsets of groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Decoder,
    InstanceHead,
    ClusterHead,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Weight,
    Zeros,
    Ones,
    Token,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: (usize, usize),
    pub group: ParamGroup,
    init: Init,
}

#[derive(Debug, Clone)]
struct BlockIds {
    ln1: (usize, usize),
    qkv: (usize, usize),
    proj: (usize, usize),
    ln2: (usize, usize),
    fc1: (usize, usize),
    fc2: (usize, usize),
}

#[derive(Debug, Clone)]
struct HeadIds {
    fc1: (usize, usize),
    fc2: (usize, usize),
}

#[derive(Debug, Clone)]
struct Layout {
    patch: (usize, usize),
    cls_token: usize,
    enc_pos: usize,
    enc_blocks: Vec<BlockIds>,
    enc_norm: (usize, usize),
    dec_embed: (usize, usize),
    mask_token: usize,
    dec_pos: usize,
    dec_blocks: Vec<BlockIds>,
    dec_norm: (usize, usize),
    pred: (usize, usize),
    instance: HeadIds,
    cluster: HeadIds,
}

struct LayoutBuilder {
    specs: Vec<ParamSpec>,
    group: ParamGroup,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: (usize, usize), init: Init) -> usize {
        self.specs.push(ParamSpec {
            name,
            shape,
            group: self.group,
            init,
        });
        self.specs.len() - 1
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> (usize, usize) {
        (
            self.add(format!("{prefix}.weight"), (fan_in, fan_out), Init::Weight),
            self.add(format!("{prefix}.bias"), (1, fan_out), Init::Zeros),
        )
    }

    fn norm(&mut self, prefix: &str, dim: usize) -> (usize, usize) {
        (
            self.add(format!("{prefix}.scale"), (1, dim), Init::Ones),
            self.add(format!("{prefix}.shift"), (1, dim), Init::Zeros),
        )
    }

    fn block(&mut self, prefix: &str, dim: usize) -> BlockIds {
        BlockIds {
            ln1: self.norm(&format!("{prefix}.norm1"), dim),
            qkv: self.linear(&format!("{prefix}.attn.qkv"), dim, 3 * dim),
            proj: self.linear(&format!("{prefix}.attn.proj"), dim, dim),
            ln2: self.norm(&format!("{prefix}.norm2"), dim),
            fc1: self.linear(&format!("{prefix}.mlp.fc1"), dim, MLP_RATIO * dim),
            fc2: self.linear(&format!("{prefix}.mlp.fc2"), MLP_RATIO * dim, dim),
        }
    }
}

fn build_layout(cfg: &NetworkConfig) -> (Vec<ParamSpec>, Layout) {
    let (d, dd) = (cfg.embed_dim, cfg.decoder_dim);
    let n = cfg.n_patches();
    let mut b = LayoutBuilder {
        specs: Vec::new(),
        group: ParamGroup::Encoder,
    };
    let patch = b.linear("encoder.patch_embed", cfg.patch_dim(), d);
    let cls_token = b.add("encoder.cls_token".into(), (1, d), Init::Token);
    let enc_pos = b.add("encoder.pos_embed".into(), (n + 1, d), Init::Weight);
    let enc_blocks = (0..cfg.n_layers)
        .map(|i| b.block(&format!("encoder.blocks.{i}"), d))
        .collect();
    let enc_norm = b.norm("encoder.norm", d);

    b.group = ParamGroup::Decoder;
    let dec_embed = b.linear("decoder.embed", d, dd);
    let mask_token = b.add("decoder.mask_token".into(), (1, dd), Init::Token);
    let dec_pos = b.add("decoder.pos_embed".into(), (n + 1, dd), Init::Weight);
    let dec_blocks = (0..cfg.decoder_layers)
        .map(|i| b.block(&format!("decoder.blocks.{i}"), dd))
        .collect();
    let dec_norm = b.norm("decoder.norm", dd);
    let pred = b.linear("decoder.pred", dd, cfg.patch_dim());

    b.group = ParamGroup::InstanceHead;
    let instance = HeadIds {
        fc1: b.linear("instance_head.fc1", d, d),
        fc2: b.linear("instance_head.fc2", d, cfg.instance_dim),
    };
    b.group = ParamGroup::ClusterHead;
    let cluster = HeadIds {
        fc1: b.linear("cluster_head.fc1", d, d),
        fc2: b.linear("cluster_head.fc2", d, cfg.n_clusters),
    };
    let layout = Layout {
        patch,
        cls_token,
        enc_pos,
        enc_blocks,
        enc_norm,
        dec_embed,
        mask_token,
        dec_pos,
        dec_blocks,
        dec_norm,
        pred,
        instance,
        cluster,
    };
    (b.specs, layout)
}

fn truncated_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 {
            return v * std;
        }
    }
}

/// All learnable arrays, stored flat in layout order.
#[derive(Debug, Clone)]
pub struct ModelParams {
    config: NetworkConfig,
    specs: Vec<ParamSpec>,
    layout: Layout,
    pub tensors: Vec<Array2<f64>>,
}

impl ModelParams {
    pub fn init(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = build_layout(config);
        let mut rng = seed::rng(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let tensors = specs
            .iter()
            .map(|s| match s.init {
                Init::Zeros => Array2::zeros(s.shape),
                Init::Ones => Array2::ones(s.shape),
                Init::Weight => Array2::from_shape_simple_fn(s.shape, || {
                    truncated_normal(&mut rng, INIT_STD)
                }),
                Init::Token => Array2::from_shape_simple_fn(s.shape, || normal.sample(&mut rng)),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            specs,
            layout,
            tensors,
        })
    }

    /// Rebuilds parameters from named arrays, e.g. a checkpoint.
    pub fn from_named(config: &NetworkConfig, arrays: &[(String, Array2<f64>)]) -> Result<Self> {
        let mut params = Self::init(config, 0)?;
        for (spec, slot) in params.specs.iter().zip(params.tensors.iter_mut()) {
            let (_, arr) = arrays
                .iter()
                .find(|(n, _)| *n == spec.name)
                .ok_or_else(|| PiciError::Checkpoint(format!("missing array {}", spec.name)))?;
            if arr.dim() != spec.shape {
                return Err(PiciError::Checkpoint(format!(
                    "array {} has shape {:?}, expected {:?}",
                    spec.name,
                    arr.dim(),
                    spec.shape
                )));
            }
            if arr.iter().any(|v| !v.is_finite()) {
                return Err(PiciError::Checkpoint(format!("array {} is not finite", spec.name)));
            }
            *slot = arr.clone();
        }
        Ok(params)
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.specs.iter().map(|s| s.name.as_str()).zip(&self.tensors)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn group(&self, pid: usize) -> ParamGroup {
        self.specs[pid].group
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<Array2<f64>> {
        self.tensors.iter().map(|t| Array2::zeros(t.dim())).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Which heads to evaluate in a sample forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Outputs {
    pub reconstruction: bool,
    pub heads: bool,
}

impl Outputs {
    pub const ALL: Outputs = Outputs {
        reconstruction: true,
        heads: true,
    };
    pub const RECONSTRUCTION: Outputs = Outputs {
        reconstruction: true,
        heads: false,
    };
    pub const HEADS: Outputs = Outputs {
        reconstruction: false,
        heads: true,
    };
}

/// One recorded forward pass of a single view of a single sample.
pub struct SampleForward<'p> {
    pub tape: Tape<'p>,
    /// Final class-token state, `1 × embed_dim`.
    pub class_token: Var,
    /// Final visible-token states, `|visible| × embed_dim`.
    pub visible_tokens: Var,
    /// Full-grid pixel prediction, `n_patches × patch_dim`.
    pub reconstruction: Option<Var>,
    /// Unit-norm instance embedding, `1 × instance_dim`.
    pub instance: Option<Var>,
    /// Cluster probabilities, `1 × n_clusters`.
    pub cluster: Option<Var>,
    /// Attention probability matrices of every head of every block.
    pub attention: Vec<Var>,
}

fn linear(t: &mut Tape, x: Var, ids: (usize, usize)) -> Var {
    let w = t.param(ids.0);
    let b = t.param(ids.1);
    let y = t.matmul(x, w);
    t.add_row(y, b)
}

fn norm(t: &mut Tape, x: Var, ids: (usize, usize)) -> Var {
    let g = t.param(ids.0);
    let b = t.param(ids.1);
    t.layer_norm(x, g, b)
}

/// Pre-norm block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
fn block(t: &mut Tape, x: Var, ids: &BlockIds, dim: usize, heads: usize, attn_out: &mut Vec<Var>) -> Var {
    let hd = dim / heads;
    let h = norm(t, x, ids.ln1);
    let qkv = linear(t, h, ids.qkv);
    let scale = 1.0 / (hd as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for i in 0..heads {
        let q = t.slice_cols(qkv, i * hd, hd);
        let k = t.slice_cols(qkv, dim + i * hd, hd);
        let v = t.slice_cols(qkv, 2 * dim + i * hd, hd);
        let scores = t.matmul_t(q, k);
        let scores = t.scale(scores, scale);
        let attn = t.softmax_rows(scores);
        attn_out.push(attn);
        outs.push(t.matmul(attn, v));
    }
    let merged = if heads == 1 { outs[0] } else { t.concat_cols(&outs) };
    let projected = linear(t, merged, ids.proj);
    let x = t.add(x, projected);

    let h = norm(t, x, ids.ln2);
    let h = linear(t, h, ids.fc1);
    let h = t.gelu(h);
    let h = linear(t, h, ids.fc2);
    t.add(x, h)
}

fn two_layer(t: &mut Tape, x: Var, ids: &HeadIds) -> Var {
    let h = linear(t, x, ids.fc1);
    let h = t.gelu(h);
    linear(t, h, ids.fc2)
}

fn check_inputs(cfg: &NetworkConfig, seq: &PatchSequence, plan: &MaskPlan) -> Result<()> {
    let side = cfg.grid_side();
    if seq.grid != (side, side) || seq.patch_dim() != cfg.patch_dim() {
        return Err(PiciError::Config(format!(
            "patch sequence {:?} x {} does not match model grid {side}x{side} x {}",
            seq.grid,
            seq.patch_dim(),
            cfg.patch_dim()
        )));
    }
    plan.check(cfg.n_patches())
}

/// Runs the encoder on the visible patches and records the pass on a fresh tape.
pub fn forward_encoder<'p>(
    params: &'p ModelParams,
    seq: &PatchSequence,
    plan: &MaskPlan,
) -> Result<SampleForward<'p>> {
    let cfg = &params.config;
    check_inputs(cfg, seq, plan)?;
    let l = &params.layout;
    let mut t = Tape::new(&params.tensors);

    let mut visible = Array2::zeros((plan.visible_idx.len(), cfg.patch_dim()));
    for (r, &k) in plan.visible_idx.iter().enumerate() {
        visible.row_mut(r).assign(&seq.patches.row(k));
    }
    let x = t.constant(visible);
    let pos = t.param(l.enc_pos);
    let cls = t.param(l.cls_token);

    let mut attention = Vec::new();
    let tokens = if plan.visible_idx.is_empty() {
        let cls_pos = t.gather_rows(&[(pos, 0)]);
        t.add(cls, cls_pos)
    } else {
        let embedded = linear(&mut t, x, l.patch);
        let mut rows = vec![(cls, 0)];
        rows.extend((0..plan.visible_idx.len()).map(|r| (embedded, r)));
        let seq_tokens = t.gather_rows(&rows);
        let pos_rows: Vec<_> = std::iter::once((pos, 0))
            .chain(plan.visible_idx.iter().map(|&k| (pos, k + 1)))
            .collect();
        let pos_sel = t.gather_rows(&pos_rows);
        t.add(seq_tokens, pos_sel)
    };
    let mut h = tokens;
    for ids in &l.enc_blocks {
        h = block(&mut t, h, ids, cfg.embed_dim, cfg.n_heads, &mut attention);
    }
    let h = norm(&mut t, h, l.enc_norm);
    let class_token = t.gather_rows(&[(h, 0)]);
    let visible_rows: Vec<_> = (1..=plan.visible_idx.len()).map(|r| (h, r)).collect();
    let visible_tokens = if visible_rows.is_empty() {
        t.constant(Array2::zeros((0, cfg.embed_dim)))
    } else {
        t.gather_rows(&visible_rows)
    };
    Ok(SampleForward {
        tape: t,
        class_token,
        visible_tokens,
        reconstruction: None,
        instance: None,
        cluster: None,
        attention,
    })
}

impl<'p> SampleForward<'p> {
    /// Decoder: mask tokens at hidden positions, full-grid position
    /// embeddings, decoder blocks, per-token pixel prediction.
    pub fn decode(&mut self, params: &'p ModelParams, plan: &MaskPlan) -> Var {
        let cfg = &params.config;
        let l = &params.layout;
        let t = &mut self.tape;
        let n = cfg.n_patches();
        let mut rows = Vec::with_capacity(n + 1);
        rows.push((self.class_token, 0));
        rows.extend((0..plan.visible_idx.len()).map(|r| (self.visible_tokens, r)));
        let enc = t.gather_rows(&rows);
        let projected = linear(t, enc, l.dec_embed);

        let mask = t.param(l.mask_token);
        let mut slot = vec![(mask, 0); n + 1];
        slot[0] = (projected, 0);
        for (r, &k) in plan.visible_idx.iter().enumerate() {
            slot[k + 1] = (projected, r + 1);
        }
        let full = t.gather_rows(&slot);
        let pos = t.param(l.dec_pos);
        let mut h = t.add(full, pos);
        for ids in &l.dec_blocks {
            h = block(t, h, ids, cfg.decoder_dim, cfg.decoder_heads, &mut self.attention);
        }
        let h = norm(t, h, l.dec_norm);
        let patch_rows: Vec<_> = (1..=n).map(|r| (h, r)).collect();
        let h = t.gather_rows(&patch_rows);
        let pred = linear(t, h, l.pred);
        self.reconstruction = Some(pred);
        pred
    }

    /// Instance head followed by row normalization.
    pub fn project_instance(&mut self, params: &'p ModelParams) -> Var {
        let z = instance_head(&mut self.tape, self.class_token, &params.layout);
        self.instance = Some(z);
        z
    }

    /// Cluster head followed by a softmax.
    pub fn project_cluster(&mut self, params: &'p ModelParams) -> Var {
        let c = cluster_head(&mut self.tape, self.class_token, &params.layout);
        self.cluster = Some(c);
        c
    }
}

fn instance_head(t: &mut Tape, h: Var, l: &Layout) -> Var {
    let z = two_layer(t, h, &l.instance);
    t.l2_normalize_rows(z)
}

fn cluster_head(t: &mut Tape, h: Var, l: &Layout) -> Var {
    let logits = two_layer(t, h, &l.cluster);
    t.softmax_rows(logits)
}

/// Full forward pass of one view with the requested outputs.
pub fn forward_sample<'p>(
    params: &'p ModelParams,
    seq: &PatchSequence,
    plan: &MaskPlan,
    outputs: Outputs,
) -> Result<SampleForward<'p>> {
    let mut f = forward_encoder(params, seq, plan)?;
    if outputs.reconstruction {
        f.decode(params, plan);
    }
    if outputs.heads {
        f.project_instance(params);
        f.project_cluster(params);
    }
    Ok(f)
}

/// Encoder output: final class token and visible-token states.
pub fn encode(seq: &PatchSequence, plan: &MaskPlan, params: &ModelParams) -> Result<(Array1<f64>, Array2<f64>)> {
    let f = forward_encoder(params, seq, plan)?;
    let cls = f.tape.value(f.class_token).row(0).to_owned();
    let vis = f.tape.value(f.visible_tokens).to_owned();
    Ok((cls, vis))
}

/// Reconstructs every patch of the grid from encoder states.
pub fn decode(
    visible_tokens: &Array2<f64>,
    class_token: &Array1<f64>,
    plan: &MaskPlan,
    params: &ModelParams,
) -> Result<PatchSequence> {
    let cfg = &params.config;
    plan.check(cfg.n_patches())?;
    if visible_tokens.nrows() != plan.visible_idx.len()
        || visible_tokens.ncols() != cfg.embed_dim
        || class_token.len() != cfg.embed_dim
    {
        return Err(PiciError::Config(format!(
            "decoder input {}x{} inconsistent with {} visible patches of width {}",
            visible_tokens.nrows(),
            visible_tokens.ncols(),
            plan.visible_idx.len(),
            cfg.embed_dim
        )));
    }
    let mut t = Tape::new(&params.tensors);
    let class = t.constant(class_token.clone().insert_axis(ndarray::Axis(0)));
    let visible = t.constant(visible_tokens.clone());
    let mut f = SampleForward {
        tape: t,
        class_token: class,
        visible_tokens: visible,
        reconstruction: None,
        instance: None,
        cluster: None,
        attention: Vec::new(),
    };
    let pred = f.decode(params, plan);
    let side = cfg.grid_side();
    Ok(PatchSequence {
        patches: f.tape.value(pred).to_owned(),
        patch_size: cfg.patch_size,
        channels: cfg.channels(),
        grid: (side, side),
    })
}

fn check_features(h: &Array2<f64>, params: &ModelParams) -> Result<()> {
    if h.ncols() != params.config.embed_dim {
        return Err(PiciError::Config(format!(
            "features have width {}, model expects {}",
            h.ncols(),
            params.config.embed_dim
        )));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(PiciError::Config("non-finite features".into()));
    }
    Ok(())
}

/// Instance projection of a batch of class tokens; rows have unit norm.
pub fn project_instance(h: &Array2<f64>, params: &ModelParams) -> Result<Array2<f64>> {
    check_features(h, params)?;
    let mut t = Tape::new(&params.tensors);
    let x = t.constant(h.clone());
    let z = instance_head(&mut t, x, &params.layout);
    Ok(t.value(z).to_owned())
}

/// Cluster projection of a batch of class tokens; rows lie on the simplex.
pub fn project_cluster(h: &Array2<f64>, params: &ModelParams) -> Result<Array2<f64>> {
    check_features(h, params)?;
    let mut t = Tape::new(&params.tensors);
    let x = t.constant(h.clone());
    let c = cluster_head(&mut t, x, &params.layout);
    Ok(t.value(c).to_owned())
}
