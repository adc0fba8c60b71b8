//! The `binomark` command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
//! numerical error (including a failed gradient check and degenerate scores).

mod commands;
mod config;

pub use config::{sub_seed, GradcheckConfig, RunConfig};

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "binomark", version, about = "Binoculars watermark laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Top-level seed; every other seed is derived from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Base checkpoint written by `pretrain`.
    #[arg(long)]
    base: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InputArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// One document per line.
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    human: Option<PathBuf>,
    #[arg(long, conflicts_with = "generate")]
    machine: Option<PathBuf>,
    /// Generate machine text from prefixes of the human documents.
    #[arg(long)]
    generate: bool,
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[command(flatten)]
    common: Common,
    /// Scatter CSV written by `eval`.
    #[arg(long)]
    scatter: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    /// Adds an operation whose gradient rule has a flipped sign.
    #[arg(long, hide = true)]
    inject_sign_flip: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the base model on a corpus with plain next-token cross-entropy.
    Pretrain(PretrainArgs),
    /// Train the performer/observer adapters on a frozen base.
    Train(TrainArgs),
    /// Sample continuations of prompts from the performer.
    Generate(InputArgs),
    /// Binoculars score of each input document.
    Score(InputArgs),
    /// Detection report for human vs machine documents.
    Eval(EvalArgs),
    /// Decision thresholds from a scatter CSV.
    Calibrate(CalibrateArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
}

fn load(common: &Common) -> crate::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn set(slot: &mut Option<PathBuf>, v: Option<PathBuf>) {
    if v.is_some() {
        *slot = v;
    }
}

fn dispatch(command: Command) -> crate::Result<i32> {
    match command {
        Command::Pretrain(a) => {
            let mut cfg = load(&a.common)?;
            set(&mut cfg.corpus, a.corpus);
            commands::pretrain(cfg)
        }
        Command::Train(a) => {
            let mut cfg = load(&a.common)?;
            set(&mut cfg.corpus, a.corpus);
            set(&mut cfg.base_checkpoint, a.base);
            commands::train(cfg)
        }
        Command::Generate(a) => {
            let mut cfg = load(&a.common)?;
            set(&mut cfg.checkpoint, a.checkpoint);
            set(&mut cfg.input, a.input);
            commands::generate(cfg)
        }
        Command::Score(a) => {
            let mut cfg = load(&a.common)?;
            set(&mut cfg.checkpoint, a.checkpoint);
            set(&mut cfg.input, a.input);
            commands::score(cfg)
        }
        Command::Eval(a) => {
            let mut cfg = load(&a.common)?;
            set(&mut cfg.checkpoint, a.checkpoint);
            set(&mut cfg.human, a.human);
            set(&mut cfg.corpus, a.corpus);
            if a.machine.is_some() {
                cfg.machine = a.machine;
                cfg.generate_machine = false;
            }
            if a.generate {
                cfg.generate_machine = true;
            }
            commands::eval(cfg)
        }
        Command::Calibrate(a) => {
            let mut cfg = load(&a.common)?;
            set(&mut cfg.scatter, a.scatter);
            commands::calibrate(cfg)
        }
        Command::Gradcheck(a) => {
            let cfg = load(&a.common)?;
            commands::gradcheck(cfg, a.inject_sign_flip)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn main() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .try_init();
    run(std::env::args_os())
}
