//! `lcle`: simulate, register, fuse, stitch, match and evaluate Lissajous
//! endomicroscopy sequences.

mod commands;
mod config;
mod seqio;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Bad flags, config keys or values. Exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Inputs that could not be processed. Exit code 3.
#[derive(Debug)]
pub struct DataError(pub String);

impl std::fmt::Display for DataError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for DataError {}

#[derive(Debug, Parser)]
#[command(
    name = "lcle",
    version,
    about = "Lissajous endomicroscopy simulation, restoration and dataset tools"
)]
pub struct Cli {
    /// Root for every relative path.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,

    /// Config file of `section.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Config override, repeatable (`--set scanner.fx=1151`).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = parse_key_value)]
    overrides: Vec<(String, String)>,

    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    workers: Option<u16>,

    #[command(subcommand)]
    command: Command,
}

fn parse_key_value(s: &str) -> Result<(String, String), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected KEY=VALUE, got '{s}'"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate an LQ sequence, its ground truth and overlapping HQ frames.
    Simulate(SimulateArgs),
    /// Fuse every frame with its registered temporal neighbours.
    Augment(SeqInOut),
    /// Write displacement records between each frame and its past window.
    Register(RegisterArgs),
    /// Stitch dense frames into a mosaic.
    Stitch(StitchArgs),
    /// Locate sequence frames in a mosaic.
    Match(MatchArgs),
    /// Build a paired LQ/HQ training dataset.
    BuildDataset(BuildDatasetArgs),
    /// Restore a sparse sequence with the recurrent fusion filter.
    Restore(SeqInOut),
    /// Score restored frames against references.
    Evaluate(EvaluateArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Augment(_) => "augment",
            Command::Register(_) => "register",
            Command::Stitch(_) => "stitch",
            Command::Match(_) => "match",
            Command::BuildDataset(_) => "build-dataset",
            Command::Restore(_) => "restore",
            Command::Evaluate(_) => "evaluate",
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Number of LQ frames (default: dataset.lq_frames).
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub frames: Option<u64>,
    /// Ground-truth texture (graymap); the bundled 128x128 texture by default.
    #[arg(long, conflicts_with = "procedural")]
    pub texture: Option<PathBuf>,
    /// Use a procedural texture instead of the bundled one.
    #[arg(long)]
    pub procedural: bool,
    #[arg(long, default_value = "sim")]
    pub out: PathBuf,
}

/// A sequence directory holds `lq/<t>.pgm` and `mask/<t>.pgm`.
#[derive(Debug, Args)]
pub struct SeqInOut {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "displacements.jsonl")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StitchArgs {
    /// Directory of dense frames `<t>.pgm`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "mosaic")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory of `stitch`.
    #[arg(long)]
    pub mosaic: PathBuf,
    #[arg(long, default_value = "matches.jsonl")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildDatasetArgs {
    /// Directory of texture graymaps, one per synthetic clip (cycled).
    #[arg(long, conflicts_with = "real")]
    pub textures: Option<PathBuf>,
    /// Root of pre-acquired clips `<clip>/{lq,mask,hq}/<t>.pgm`.
    #[arg(long)]
    pub real: Option<PathBuf>,
    #[arg(long, default_value = "dataset")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Restored frames `<t>.pgm`.
    #[arg(long)]
    pub pred: PathBuf,
    /// Reference frames with the same file names.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value = "evaluation.json")]
    pub out: PathBuf,
}

pub fn resolve(workdir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        workdir.join(p)
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        2
    } else if err.downcast_ref::<DataError>().is_some()
        || err.downcast_ref::<lcle::Error>().is_some()
        || err.downcast_ref::<std::io::Error>().is_some()
    {
        3
    } else {
        4
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
