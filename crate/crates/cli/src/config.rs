//! Run configuration: flat `key = value` text with dotted section keys.
//!
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are
//! errors, so a typo never silently falls back to a default.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use pici::data::{load_image_folder, synth_blobs, Dataset};
use pici::losses::Temperatures;
use pici::metrics::NmiNorm;
use pici::network::NetworkConfig;
use pici::par::Exec;
use pici::trainer::TrainConfig;

/// A configuration problem tied to one key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.key.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.key, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(key: &str, message: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError {
        key: key.into(),
        message: message.into(),
    })
}

/// Where the images come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSpec {
    Folder(PathBuf),
    Synth {
        classes: usize,
        per_class: usize,
        image_size: usize,
        seed: u64,
    },
}

impl DataSpec {
    /// A directory path, or `synth:CLASSES,PER_CLASS,SIZE,SEED`.
    pub fn parse(s: &str) -> Result<Self, ConfigError> {
        match s.strip_prefix("synth:") {
            Some(rest) => Self::parse_synth("data.synth", rest),
            None if s.is_empty() => err("data.path", "empty path"),
            None => Ok(DataSpec::Folder(PathBuf::from(s))),
        }
    }

    fn parse_synth(key: &str, s: &str) -> Result<Self, ConfigError> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return err(key, format!("expected CLASSES,PER_CLASS,SIZE,SEED, got {s:?}"));
        }
        let num = |p: &str| p.parse::<u64>().map_err(|_| ConfigError {
            key: key.into(),
            message: format!("{p:?} is not a non-negative integer"),
        });
        Ok(DataSpec::Synth {
            classes: num(parts[0])? as usize,
            per_class: num(parts[1])? as usize,
            image_size: num(parts[2])? as usize,
            seed: num(parts[3])?,
        })
    }

    pub fn load(&self) -> pici::Result<Dataset> {
        match self {
            DataSpec::Folder(root) => {
                let report = load_image_folder(root)?;
                if report.skipped > 0 {
                    log::warn!("{} unreadable files skipped under {}", report.skipped, root.display());
                }
                Ok(report.dataset)
            }
            DataSpec::Synth {
                classes,
                per_class,
                image_size,
                seed,
            } => synth_blobs(*classes, *per_class, *image_size, *seed),
        }
    }
}

impl std::fmt::Display for DataSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DataSpec::Folder(p) => write!(f, "{}", p.display()),
            DataSpec::Synth {
                classes,
                per_class,
                image_size,
                seed,
            } => write!(f, "synth:{classes},{per_class},{image_size},{seed}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: NetworkConfig,
    pub train: TrainConfig,
    pub data: DataSpec,
    pub out_dir: PathBuf,
    /// Extra checkpoint every this many epochs within a stage; 0 disables.
    pub checkpoint_every: usize,
    /// Record measured epoch times; when false the column holds 0 so that
    /// metrics.csv is reproducible byte for byte.
    pub wall_clock: bool,
}

/// Splits config text into key/value pairs, rejecting duplicates.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return err("", format!("line {}: expected key = value", i + 1));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return err("", format!("line {}: empty key", i + 1));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return err(k, "given more than once");
        }
    }
    Ok(out)
}

struct Fields(BTreeMap<String, String>);

impl Fields {
    fn take<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<(), ConfigError> {
        if let Some(v) = self.0.remove(key) {
            *slot = v.parse().map_err(|_| ConfigError {
                key: key.into(),
                message: format!("cannot parse {v:?}"),
            })?;
        }
        Ok(())
    }
}

impl RunConfig {
    /// Defaults with the given data source: ViT-Small sized model and the
    /// published training schedule.
    pub fn with_data(data: DataSpec) -> Self {
        Self {
            model: NetworkConfig::vit_small(),
            train: TrainConfig::default(),
            data,
            out_dir: PathBuf::from("pici-out"),
            checkpoint_every: 50,
            wall_clock: true,
        }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut f = Fields(parse_pairs(text)?);

        let data = match (f.0.remove("data.path"), f.0.remove("data.synth")) {
            (Some(_), Some(_)) => return err("data.synth", "give either data.path or data.synth, not both"),
            (Some(p), None) if p.is_empty() => return err("data.path", "empty path"),
            (Some(p), None) => DataSpec::Folder(PathBuf::from(p)),
            (None, Some(s)) => DataSpec::parse_synth("data.synth", &s)?,
            (None, None) => return err("data.path", "no data source (data.path or data.synth)"),
        };
        let mut c = Self::with_data(data);

        if let Some(name) = f.0.remove("model.preset") {
            c.model = NetworkConfig::preset(&name).ok_or_else(|| ConfigError {
                key: "model.preset".into(),
                message: format!("unknown preset {name:?} (tiny, vit-tiny, vit-small, vit-base)"),
            })?;
        }
        let m = &mut c.model;
        f.take("model.dim", &mut m.embed_dim)?;
        f.take("model.layers", &mut m.n_layers)?;
        f.take("model.heads", &mut m.n_heads)?;
        f.take("model.decoder_dim", &mut m.decoder_dim)?;
        f.take("model.decoder_layers", &mut m.decoder_layers)?;
        f.take("model.decoder_heads", &mut m.decoder_heads)?;
        f.take("model.patch_size", &mut m.patch_size)?;
        f.take("model.image_size", &mut m.image_size)?;
        f.take("model.instance_dim", &mut m.instance_dim)?;
        f.take("model.clusters", &mut m.n_clusters)?;

        let t = &mut c.train;
        f.take("mask.ratio", &mut t.mask_ratio)?;
        f.take("mask.shared", &mut t.mask_shared)?;
        f.take("losses.tau_i", &mut t.temperatures.tau_i)?;
        f.take("losses.tau_c", &mut t.temperatures.tau_c)?;
        f.take("losses.include_self", &mut t.losses.include_self)?;
        f.take("losses.recon_all_patches", &mut t.losses.recon_all_patches)?;
        f.take("train.e1", &mut t.pretrain_epochs)?;
        f.take("train.e2", &mut t.train_epochs)?;
        f.take("train.e3", &mut t.boost_epochs)?;
        f.take("train.batch", &mut t.batch_size)?;
        f.take("train.lr", &mut t.adam.learning_rate)?;
        f.take("train.beta1", &mut t.adam.beta1)?;
        f.take("train.beta2", &mut t.adam.beta2)?;
        f.take("train.adam_eps", &mut t.adam.eps)?;
        f.take("train.seed", &mut t.seed)?;
        f.take("train.kmeans_iters", &mut t.kmeans_iters)?;
        let mut eps_column = t.losses.column_eps > 0.0;
        f.take("train.eps_column", &mut eps_column)?;
        t.losses.column_eps = if eps_column { 1e-8 } else { 0.0 };
        let mut parallel = t.exec == Exec::Parallel;
        f.take("train.parallel", &mut parallel)?;
        t.exec = if parallel { Exec::Parallel } else { Exec::Sequential };

        let a = &mut t.augment;
        f.take("augment.crop_min", &mut a.crop_scale_range.0)?;
        f.take("augment.crop_max", &mut a.crop_scale_range.1)?;
        f.take("augment.jitter", &mut a.jitter_strength)?;
        f.take("augment.grayscale", &mut a.grayscale_prob)?;
        f.take("augment.flip", &mut a.flip_prob)?;
        f.take("augment.blur", &mut a.blur_prob)?;

        let mut norm = String::from("sqrt");
        f.take("metrics.nmi_norm", &mut norm)?;
        t.nmi_norm = norm.parse::<NmiNorm>().map_err(|_| ConfigError {
            key: "metrics.nmi_norm".into(),
            message: format!("expected sqrt or arithmetic, got {norm:?}"),
        })?;

        f.take("out.dir", &mut c.out_dir)?;
        f.take("out.wall_clock", &mut c.wall_clock)?;
        f.take("out.checkpoint_every", &mut c.checkpoint_every)?;

        if let Some(k) = f.0.keys().next() {
            return err(k, "unknown key");
        }
        c.validate()?;
        Ok(c)
    }

    /// Checks every value against the preconditions of the stages it feeds.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.model;
        let positive = [
            ("model.dim", m.embed_dim),
            ("model.layers", m.n_layers),
            ("model.heads", m.n_heads),
            ("model.decoder_dim", m.decoder_dim),
            ("model.decoder_layers", m.decoder_layers),
            ("model.decoder_heads", m.decoder_heads),
            ("model.patch_size", m.patch_size),
            ("model.image_size", m.image_size),
            ("model.instance_dim", m.instance_dim),
        ];
        for (k, v) in positive {
            if v == 0 {
                return err(k, "must be positive");
            }
        }
        if m.n_clusters < 2 {
            return err("model.clusters", "need at least two clusters");
        }
        if m.embed_dim % m.n_heads != 0 {
            return err("model.heads", format!("must divide model.dim = {}", m.embed_dim));
        }
        if m.decoder_dim % m.decoder_heads != 0 {
            return err("model.decoder_heads", format!("must divide model.decoder_dim = {}", m.decoder_dim));
        }
        if m.image_size % m.patch_size != 0 {
            return err("model.patch_size", format!("must divide model.image_size = {}", m.image_size));
        }
        if let Err(e) = m.validate() {
            return err("model", e.to_string());
        }
        let t = &self.train;
        if !(0.0..1.0).contains(&t.mask_ratio) {
            return err("mask.ratio", "must lie in [0, 1)");
        }
        if Temperatures::new(t.temperatures.tau_i, 1.0).is_err() {
            return err("losses.tau_i", "must be positive and finite");
        }
        if Temperatures::new(1.0, t.temperatures.tau_c).is_err() {
            return err("losses.tau_c", "must be positive and finite");
        }
        if t.batch_size == 0 {
            return err("train.batch", "must be positive");
        }
        if t.batch_size < 2 && t.train_epochs + t.boost_epochs > 0 {
            return err("train.batch", "must be at least 2 when train.e2 or train.e3 is non-zero");
        }
        if !(t.adam.learning_rate > 0.0 && t.adam.learning_rate.is_finite()) {
            return err("train.lr", "must be positive and finite");
        }
        if !(0.0..1.0).contains(&t.adam.beta1) {
            return err("train.beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&t.adam.beta2) {
            return err("train.beta2", "must lie in [0, 1)");
        }
        if !(t.adam.eps > 0.0) {
            return err("train.adam_eps", "must be positive");
        }
        let a = &t.augment;
        let (lo, hi) = a.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return err("augment.crop_min", "need 0 < crop_min <= crop_max <= 1");
        }
        for (k, p) in [
            ("augment.jitter", a.jitter_strength),
            ("augment.grayscale", a.grayscale_prob),
            ("augment.flip", a.flip_prob),
            ("augment.blur", a.blur_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return err(k, "must lie in [0, 1]");
            }
        }
        if let DataSpec::Synth {
            classes,
            per_class,
            image_size,
            ..
        } = self.data
        {
            if classes == 0 || per_class == 0 || image_size == 0 {
                return err("data.synth", "classes, per-class count and size must be positive");
            }
        }
        if let Err(e) = t.validate() {
            return err("train", e.to_string());
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order. Parsing the
    /// result gives back an equal configuration.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let a = &t.augment;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("model.dim", m.embed_dim.to_string());
        put("model.layers", m.n_layers.to_string());
        put("model.heads", m.n_heads.to_string());
        put("model.decoder_dim", m.decoder_dim.to_string());
        put("model.decoder_layers", m.decoder_layers.to_string());
        put("model.decoder_heads", m.decoder_heads.to_string());
        put("model.patch_size", m.patch_size.to_string());
        put("model.image_size", m.image_size.to_string());
        put("model.instance_dim", m.instance_dim.to_string());
        put("model.clusters", m.n_clusters.to_string());
        put("mask.ratio", format!("{:?}", t.mask_ratio));
        put("mask.shared", t.mask_shared.to_string());
        put("losses.tau_i", format!("{:?}", t.temperatures.tau_i));
        put("losses.tau_c", format!("{:?}", t.temperatures.tau_c));
        put("losses.include_self", t.losses.include_self.to_string());
        put("losses.recon_all_patches", t.losses.recon_all_patches.to_string());
        put("train.e1", t.pretrain_epochs.to_string());
        put("train.e2", t.train_epochs.to_string());
        put("train.e3", t.boost_epochs.to_string());
        put("train.batch", t.batch_size.to_string());
        put("train.lr", format!("{:?}", t.adam.learning_rate));
        put("train.beta1", format!("{:?}", t.adam.beta1));
        put("train.beta2", format!("{:?}", t.adam.beta2));
        put("train.adam_eps", format!("{:?}", t.adam.eps));
        put("train.seed", t.seed.to_string());
        put("train.kmeans_iters", t.kmeans_iters.to_string());
        put("train.eps_column", (t.losses.column_eps > 0.0).to_string());
        put("train.parallel", (t.exec == Exec::Parallel).to_string());
        put("augment.crop_min", format!("{:?}", a.crop_scale_range.0));
        put("augment.crop_max", format!("{:?}", a.crop_scale_range.1));
        put("augment.jitter", format!("{:?}", a.jitter_strength));
        put("augment.grayscale", format!("{:?}", a.grayscale_prob));
        put("augment.flip", format!("{:?}", a.flip_prob));
        put("augment.blur", format!("{:?}", a.blur_prob));
        let norm = match t.nmi_norm {
            NmiNorm::Sqrt => "sqrt",
            NmiNorm::Arithmetic => "arithmetic",
        };
        put("metrics.nmi_norm", norm.into());
        match &self.data {
            DataSpec::Folder(p) => put("data.path", p.display().to_string()),
            DataSpec::Synth {
                classes,
                per_class,
                image_size,
                seed,
            } => put("data.synth", format!("{classes},{per_class},{image_size},{seed}")),
        }
        put("out.dir", self.out_dir.display().to_string());
        put("out.wall_clock", self.wall_clock.to_string());
        put("out.checkpoint_every", self.checkpoint_every.to_string());
        s
    }
}
