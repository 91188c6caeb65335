//! The `run`, `eval` and `export-embeddings` subcommands.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use pici::data::Dataset;
use pici::metrics::{evaluate, NmiNorm};
use pici::network::checkpoint::Checkpoint;
use pici::network::ModelParams;
use pici::par::Exec;
use pici::trainer::{parse_triplet, predict, EpochRecord, RunObserver, Stage, TrainState, Trainer};
use pici::PiciError;

use crate::config::{ConfigError, DataSpec, RunConfig};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SNAPSHOT_FILE: &str = "config.resolved";
pub const LOCK_FILE: &str = "run.lock";
pub const METRICS_HEADER: [&str; 12] = [
    "stage", "epoch", "l_pisd", "l_ins", "l_clu", "l_entropy", "l_picd", "l_cli", "nmi", "acc", "ari", "wall_seconds",
];

/// A failed command: process exit code plus a message for stderr.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<PiciError> for CliError {
    fn from(e: PiciError) -> Self {
        let code = match e {
            PiciError::Divergence { .. } | PiciError::EmptyCluster { .. } | PiciError::ZeroNorm => 3,
            PiciError::Io(_) => 1,
            _ => 2,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::usage(format!("invalid configuration: {e}"))
    }
}

fn io_err(what: &str, path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError {
        code: 1,
        message: format!("{what} {}: {e}", path.display()),
    }
}

/// Which part of the schedule `run` executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum StageArg {
    All,
    Pretrain,
    Train,
    Boost,
}

impl StageArg {
    fn first(self) -> Stage {
        match self {
            StageArg::All | StageArg::Pretrain => Stage::Pretrain,
            StageArg::Train => Stage::Train,
            StageArg::Boost => Stage::Boost,
        }
    }

    fn last(self) -> Stage {
        match self {
            StageArg::All => Stage::Boost,
            other => other.first(),
        }
    }
}

/// File name of the checkpoint written when `stage` finishes.
pub fn stage_checkpoint(stage: Stage) -> String {
    format!("stage_{}.pici", stage.name())
}

/// Exclusive ownership of an output directory for the lifetime of a run.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::usage(format!(
                "{} is in use by another run (remove {} if that run is gone)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(io_err("cannot create", &path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn stage_of_row(name: &str) -> Option<Stage> {
    name.parse().ok()
}

/// Rewrites metrics.csv so that it holds the header plus only the rows of
/// stages before `first`. Rows of re-run stages are never duplicated.
fn reset_metrics(path: &Path, first: Stage) -> Result<(), CliError> {
    let mut kept = Vec::new();
    if first != Stage::Pretrain && path.exists() {
        let mut rd = csv::Reader::from_path(path).map_err(|e| io_err("cannot read", path, e))?;
        for row in rd.records() {
            let row = row.map_err(|e| io_err("cannot read", path, e))?;
            if row.get(0).and_then(stage_of_row).is_some_and(|s| s < first) {
                kept.push(row);
            }
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err("cannot write", path, e))?;
    w.write_record(METRICS_HEADER).map_err(|e| io_err("cannot write", path, e))?;
    for row in &kept {
        w.write_record(row).map_err(|e| io_err("cannot write", path, e))?;
    }
    w.flush().map_err(|e| io_err("cannot write", path, e))
}

/// Appends metric rows and writes checkpoints as training proceeds.
struct Artifacts<'a> {
    dir: &'a Path,
    checkpoint_every: usize,
    wall_clock: bool,
    rows: usize,
    checkpoints: Vec<PathBuf>,
}

impl Artifacts<'_> {
    fn save(&mut self, state: &TrainState, name: &str) -> pici::Result<()> {
        let path = self.dir.join(name);
        state.to_checkpoint().save(&path)?;
        self.checkpoints.push(path);
        Ok(())
    }
}

impl RunObserver for Artifacts<'_> {
    fn epoch_end(&mut self, r: &EpochRecord, state: &TrainState) -> pici::Result<()> {
        let l = &r.losses;
        let s = &r.scores;
        let wall = if self.wall_clock { r.wall_seconds } else { 0.0 };
        let line = format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.stage.name(),
            r.epoch,
            l.l_pisd,
            l.l_ins,
            l.l_clu,
            l.l_entropy,
            l.l_picd,
            l.l_cli,
            s.nmi,
            s.acc,
            s.ari,
            wall
        );
        let mut f = OpenOptions::new().append(true).open(self.dir.join(METRICS_FILE))?;
        f.write_all(line.as_bytes())?;
        self.rows += 1;
        if self.checkpoint_every > 0 && r.epoch % self.checkpoint_every == 0 {
            self.save(state, &format!("epoch_{}_{:04}.pici", r.stage.name(), r.epoch))?;
        }
        Ok(())
    }

    fn stage_end(&mut self, finished: Stage, state: &TrainState) -> pici::Result<()> {
        log::info!("{} finished", finished.name());
        self.save(state, &stage_checkpoint(finished))
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub config: PathBuf,
    pub stage: Option<StageArg>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Validate, print the run header and stop before touching out.dir.
    pub dry_run: bool,
}

/// What a completed `run` produced.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub metric_rows: usize,
    pub checkpoints: Vec<PathBuf>,
}

pub fn load_config(opts: &RunOptions) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(&opts.config)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", opts.config.display())))?;
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(seed) = opts.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &opts.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run_header(cfg: &RunConfig, stage: StageArg, dataset: &Dataset) -> String {
    let m = &cfg.model;
    let t = &cfg.train;
    let exec = if t.exec.is_parallel() {
        format!("parallel on {} threads", rayon::current_num_threads())
    } else {
        "sequential".to_string()
    };
    format!(
        "pici run: stage {:?}, out {}\n\
         data: {} ({} items, {} classes)\n\
         model: dim={} layers={} heads={} decoder={}/{}/{} patch={} image={} instance_dim={} clusters={}\n\
         schedule: e1={} e2={} e3={} batch={} lr={:?} seed={}\n\
         objective: tau_i={:?} tau_c={:?} mask_ratio={:?} mask_shared={} include_self={}\n\
         exec: {}\n",
        stage,
        cfg.out_dir.display(),
        cfg.data,
        dataset.len(),
        dataset.n_classes,
        m.embed_dim,
        m.n_layers,
        m.n_heads,
        m.decoder_dim,
        m.decoder_layers,
        m.decoder_heads,
        m.patch_size,
        m.image_size,
        m.instance_dim,
        m.n_clusters,
        t.pretrain_epochs,
        t.train_epochs,
        t.boost_epochs,
        t.batch_size,
        t.adam.learning_rate,
        t.seed,
        t.temperatures.tau_i,
        t.temperatures.tau_c,
        t.mask_ratio,
        t.mask_shared,
        t.losses.include_self,
        exec
    )
}

pub fn cmd_run(opts: &RunOptions, out: &mut dyn Write) -> Result<RunSummary, CliError> {
    let cfg = load_config(opts)?;
    let stage = opts.stage.unwrap_or(StageArg::All);
    let dir = cfg.out_dir.clone();
    let first = stage.first();
    let resume_from = match first {
        Stage::Pretrain => None,
        Stage::Train => Some(Stage::Pretrain),
        _ => Some(Stage::Train),
    };
    if let Some(prev) = resume_from {
        let path = dir.join(stage_checkpoint(prev));
        if !path.exists() {
            return Err(CliError::usage(format!(
                "--stage {} needs {} (run --stage {} first)",
                first.name(),
                path.display(),
                prev.name()
            )));
        }
    }
    let dataset = cfg.data.load()?;
    let header = run_header(&cfg, stage, &dataset);
    out.write_all(header.as_bytes()).map_err(|e| io_err("cannot write", Path::new("stdout"), e))?;
    if opts.dry_run {
        return Ok(RunSummary {
            out_dir: dir,
            metric_rows: 0,
            checkpoints: Vec::new(),
        });
    }

    fs::create_dir_all(&dir).map_err(|e| io_err("cannot create", &dir, e))?;
    let _lock = DirLock::acquire(&dir)?;
    let mut state = match resume_from {
        None => TrainState::new(&cfg.model, &cfg.train, &dataset)?,
        Some(prev) => {
            let path = dir.join(stage_checkpoint(prev));
            let st = TrainState::from_checkpoint(&Checkpoint::load(&path)?)?;
            if st.params.config() != &cfg.model {
                return Err(CliError::usage(format!(
                    "model section of the config does not match {}",
                    path.display()
                )));
            }
            if st.stage != first || st.epoch != 0 {
                return Err(CliError::usage(format!(
                    "{} holds stage {} epoch {}, expected the start of {}",
                    path.display(),
                    st.stage.name(),
                    st.epoch,
                    first.name()
                )));
            }
            st
        }
    };
    let snapshot = dir.join(SNAPSHOT_FILE);
    fs::write(&snapshot, cfg.to_text()).map_err(|e| io_err("cannot write", &snapshot, e))?;
    reset_metrics(&dir.join(METRICS_FILE), first)?;

    let trainer = Trainer::new(cfg.train.clone(), &state, &dataset)?;
    let mut artifacts = Artifacts {
        dir: &dir,
        checkpoint_every: cfg.checkpoint_every,
        wall_clock: cfg.wall_clock,
        rows: 0,
        checkpoints: Vec::new(),
    };
    trainer.run(&mut state, stage.last(), &mut artifacts)?;

    let scores = trainer.evaluate(&state.params)?;
    writeln!(
        out,
        "done: {} epochs logged, nmi {:.4} acc {:.4} ari {:.4}",
        artifacts.rows, scores.nmi, scores.acc, scores.ari
    )
    .map_err(|e| io_err("cannot write", Path::new("stdout"), e))?;
    Ok(RunSummary {
        out_dir: dir.clone(),
        metric_rows: artifacts.rows,
        checkpoints: artifacts.checkpoints,
    })
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub checkpoint: PathBuf,
    pub data: DataSpec,
    pub out: PathBuf,
    /// Optional run config whose model section must match the checkpoint.
    pub config: Option<PathBuf>,
    pub nmi_norm: NmiNorm,
    pub exec: Exec,
}

struct Loaded {
    params: ModelParams,
    dataset: Dataset,
    mean: [f64; 3],
    std: [f64; 3],
}

fn load_for_inference(opts: &EvalOptions) -> Result<Loaded, CliError> {
    if !opts.checkpoint.exists() {
        return Err(CliError::usage(format!("no checkpoint at {}", opts.checkpoint.display())));
    }
    let ck = Checkpoint::load(&opts.checkpoint)?;
    let params = ck.params()?;
    if let Some(path) = &opts.config {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg = RunConfig::parse(&text)?;
        if &cfg.model != params.config() {
            return Err(CliError::usage(format!(
                "model section of {} does not match {}",
                path.display(),
                opts.checkpoint.display()
            )));
        }
    }
    let triplet = |k: &str| -> Result<[f64; 3], CliError> {
        let v = ck
            .meta
            .get(k)
            .ok_or_else(|| CliError::usage(format!("{} lacks {k}", opts.checkpoint.display())))?;
        Ok(parse_triplet(v)?)
    };
    let (mean, std) = (triplet("norm.mean")?, triplet("norm.std")?);
    let dataset = opts.data.load()?;
    if dataset.n_classes != params.config().n_clusters {
        log::warn!(
            "dataset has {} classes but the model has {} clusters",
            dataset.n_classes,
            params.config().n_clusters
        );
    }
    fs::create_dir_all(&opts.out).map_err(|e| io_err("cannot create", &opts.out, e))?;
    Ok(Loaded {
        params,
        dataset,
        mean,
        std,
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>, CliError> {
    csv::Writer::from_path(path).map_err(|e| io_err("cannot write", path, e))
}

/// Writes eval.csv (nmi, acc, ari, n_samples) and labels.csv (id, true, pred).
pub fn cmd_eval(opts: &EvalOptions) -> Result<pici::metrics::Scores, CliError> {
    let l = load_for_inference(opts)?;
    let pred = predict(&l.params, &l.dataset, l.mean, l.std, opts.exec)?;
    let truth = l.dataset.labels();
    let scores = evaluate(&truth, &pred.labels, opts.nmi_norm)?;

    let path = opts.out.join("eval.csv");
    let mut w = csv_writer(&path)?;
    let res = (|| {
        w.write_record(["nmi", "acc", "ari", "n_samples"])?;
        w.write_record([
            scores.nmi.to_string(),
            scores.acc.to_string(),
            scores.ari.to_string(),
            truth.len().to_string(),
        ])?;
        w.flush()
    })();
    res.map_err(|e| io_err("cannot write", &path, e))?;

    let path = opts.out.join("labels.csv");
    let mut w = csv_writer(&path)?;
    let res = (|| -> csv::Result<()> {
        w.write_record(["id", "true", "pred"])?;
        for (item, p) in l.dataset.items.iter().zip(&pred.labels) {
            w.write_record([item.id.clone(), item.label.to_string(), p.to_string()])?;
        }
        w.flush()?;
        Ok(())
    })();
    res.map_err(|e| io_err("cannot write", &path, e))?;
    Ok(scores)
}

/// Writes embeddings.csv: id, true_label, pred_label, z_0 .. z_{d-1}.
pub fn cmd_export_embeddings(opts: &EvalOptions) -> Result<usize, CliError> {
    let l = load_for_inference(opts)?;
    let pred = predict(&l.params, &l.dataset, l.mean, l.std, opts.exec)?;
    let d = pred.embeddings.ncols();
    let path = opts.out.join("embeddings.csv");
    let mut w = csv_writer(&path)?;
    let res = (|| -> csv::Result<()> {
        let mut header = vec!["id".to_string(), "true_label".into(), "pred_label".into()];
        header.extend((0..d).map(|j| format!("z_{j}")));
        w.write_record(&header)?;
        for (i, item) in l.dataset.items.iter().enumerate() {
            let mut row = vec![item.id.clone(), item.label.to_string(), pred.labels[i].to_string()];
            row.extend(pred.embeddings.row(i).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    })();
    res.map_err(|e| io_err("cannot write", &path, e))?;
    Ok(l.dataset.len())
}
