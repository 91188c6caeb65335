use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pici::metrics::NmiNorm;
use pici::par::Exec;
use pici_cli::{cmd_eval, cmd_export_embeddings, cmd_run, CliError, DataSpec, EvalOptions, RunOptions, StageArg};

#[derive(Parser)]
#[command(name = "pici", version, about = "Masked ViT image clustering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train through the requested stages, writing checkpoints and metrics.csv.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
        /// Output directory; overrides out.dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Validate the configuration, print the run header and exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Cluster a dataset with a checkpoint and score it against the labels.
    Eval(InferArgs),
    /// Write the instance embeddings of every item.
    ExportEmbeddings(InferArgs),
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image folder, or synth:CLASSES,PER_CLASS,SIZE,SEED.
    #[arg(long)]
    data: String,
    #[arg(long)]
    out: PathBuf,
    /// Run config whose model section must match the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "sqrt")]
    nmi_norm: String,
}

impl InferArgs {
    fn options(self) -> Result<EvalOptions, CliError> {
        Ok(EvalOptions {
            checkpoint: self.checkpoint,
            data: DataSpec::parse(&self.data).map_err(|e| CliError::usage(format!("--data: {e}")))?,
            out: self.out,
            config: self.config,
            nmi_norm: self
                .nmi_norm
                .parse::<NmiNorm>()
                .map_err(|e| CliError::usage(format!("--nmi-norm: {e}")))?,
            exec: Exec::Parallel,
        })
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("PICI_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("PICI_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::usage(format!("cannot size the thread pool: {e}")))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Run {
            config,
            stage,
            out,
            seed,
            dry_run,
        } => {
            let opts = RunOptions {
                config,
                stage: Some(stage),
                out,
                seed,
                dry_run,
            };
            cmd_run(&opts, &mut std::io::stdout().lock())?;
        }
        Command::Eval(args) => {
            let s = cmd_eval(&args.options()?)?;
            println!("nmi {:.4} acc {:.4} ari {:.4}", s.nmi, s.acc, s.ari);
        }
        Command::ExportEmbeddings(args) => {
            let n = cmd_export_embeddings(&args.options()?)?;
            println!("wrote {n} embeddings");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
