//! homogcl: catalyst-layer homogenization pipeline.
//!
//! Usage: homogcl <stage> --config <path> [--out <dir>] [--threads N]
//! with stages cell | tensors | macro | tdl | channel-validate |
//! micro-study. Exit codes: 0 ok, 2 configuration error, 3 solver
//! divergence, 4 io error.

mod config;
mod error;
mod stages;

use clap::{Parser, ValueEnum};
use error::CliError;
use stages::{Pipeline, Stage};
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    Cell,
    Tensors,
    Macro,
    Tdl,
    ChannelValidate,
    MicroStudy,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Cell => Stage::Cell,
            StageArg::Tensors => Stage::Tensors,
            StageArg::Macro => Stage::Macro,
            StageArg::Tdl => Stage::Tdl,
            StageArg::ChannelValidate => Stage::ChannelValidate,
            StageArg::MicroStudy => Stage::MicroStudy,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "homogcl",
    about = "Periodic homogenization pipeline for catalyst-layer transport"
)]
struct Args {
    /// Pipeline stage to run.
    #[arg(value_enum)]
    stage: StageArg,

    /// Configuration file (TOML).
    #[arg(long)]
    config: PathBuf,

    /// Output directory; overrides [output].dir from the configuration.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Worker threads; overrides the HOMOGCL_THREADS environment variable.
    #[arg(long)]
    threads: Option<usize>,

    /// Fail instead of recomputing missing upstream artifacts.
    #[arg(long)]
    no_auto: bool,
}

fn thread_count(args: &Args) -> Result<Option<usize>, CliError> {
    if let Some(t) = args.threads {
        return Ok(Some(t));
    }
    match std::env::var("HOMOGCL_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .map(Some)
            .map_err(|_| CliError::Config(format!("HOMOGCL_THREADS=`{v}` is not a thread count"))),
        Err(_) => Ok(None),
    }
}

fn run(args: &Args) -> Result<(), CliError> {
    let cfg = config::parse_config(&args.config)?;
    // Echo the resolved configuration, defaults included.
    println!("resolved configuration:");
    for line in cfg.to_toml()?.lines() {
        println!("  {line}");
    }

    let config_dir = args
        .config
        .parent()
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from("."));
    let out_dir = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.output.dir));

    let pipeline = Pipeline {
        cfg: &cfg,
        config_dir,
        out_dir,
        auto_compute: !args.no_auto,
    };
    let stage = Stage::from(args.stage);

    match thread_count(args)? {
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| CliError::Config(e.to_string()))?;
            pool.install(|| pipeline.run(stage))
        }
        None => pipeline.run(stage),
    }
}

fn main() {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => {}
        Err(e) => {
            // Machine-readable error record on stderr.
            eprintln!(
                "{}",
                serde_json::json!({
                    "error": e.to_string(),
                    "kind": e.kind(),
                    "exit_code": e.exit_code(),
                })
            );
            std::process::exit(e.exit_code());
        }
    }
}
