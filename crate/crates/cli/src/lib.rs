//! The `ptychonet` command-line tool.
//!
//! Verbs: `simulate`, `reconstruct`, `gradcheck`, `sweep`, `render`, `info`.
//! Datasets live on disk as a JSON manifest plus raw little-endian `f32`
//! planes (see [`store`]); configs are JSON files whose schemas `info
//! --schema` prints.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod config;
pub mod gradcheck;
pub mod render;
pub mod store;

#[derive(Debug, Parser)]
#[command(name = "ptychonet", version, about = "Gradient-descent reconstruction for Fourier ptychography, single-pixel imaging and SIM")]
pub struct Cli {
    /// JSON config for the verb (simulate, reconstruct and sweep).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (or file, for `render --fuse-color`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Reproducible outputs: fixed reduction order, timings omitted from files.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Worker threads for data-parallel work (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset from a config or a shipped preset.
    Simulate {
        /// One of the shipped presets, used instead of `--config`.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Recover an object from a dataset.
    Reconstruct {
        /// Dataset directory (or its manifest.json).
        #[arg(long)]
        data: PathBuf,
        /// Write a checkpoint every this many epochs.
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
        /// Continue from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = ModelArg::All)]
        model: ModelArg,
        #[arg(long, value_enum, default_value_t = LossArg::All)]
        loss: LossArg,
        /// Side of the random test problems.
        #[arg(long, default_value_t = 8)]
        size: usize,
        /// Scale every analytic gradient by 1.01 (negative control).
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Run a Cartesian sweep of reconstructions.
    Sweep {
        #[arg(long)]
        data: PathBuf,
    },
    /// Render stored arrays as PNG views.
    Render {
        /// A reconstruction output directory or an array descriptor (.json).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Combine three single-wavelength results (run directories or gray PNGs) into one RGB PNG.
        #[arg(long, num_args = 3, value_names = ["RED", "GREEN", "BLUE"])]
        fuse_color: Option<Vec<PathBuf>>,
    },
    /// Describe a dataset, run, checkpoint or config schema.
    Info {
        path: Option<PathBuf>,
        /// Print (or with `--out`, write) the JSON schema of a config kind, or `all`.
        #[arg(long)]
        schema: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    All,
    Intensity,
    Exitwave,
    Spi,
    Sim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    All,
    L1,
    L2,
}

/// Runs one invocation and returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already configured: {e}");
        }
    }
    let opts = commands::Globals {
        config: cli.config,
        out: cli.out,
        seed: cli.seed,
        deterministic: cli.deterministic,
    };
    match cli.command {
        Command::Simulate { preset } => commands::simulate(&opts, preset.as_deref()).map(|_| 0),
        Command::Reconstruct { data, checkpoint_every, resume } => {
            commands::reconstruct(&opts, &data, checkpoint_every, resume.as_deref()).map(|_| 0)
        }
        Command::Gradcheck { model, loss, size, corrupt } => {
            let rows = gradcheck::run(model, loss, size, opts.seed.unwrap_or(0), corrupt)?;
            print!("{}", gradcheck::table(&rows));
            if let Some(out) = &opts.out {
                gradcheck::write_csv(out, &rows)?;
            }
            Ok(if rows.iter().all(|r| r.pass) { 0 } else { 1 })
        }
        Command::Sweep { data } => commands::sweep(&opts, &data).map(|_| 0),
        Command::Render { input, fuse_color } => commands::render(&opts, input.as_deref(), fuse_color.as_deref()).map(|_| 0),
        Command::Info { path, schema } => commands::info(&opts, path.as_deref(), schema.as_deref()).map(|_| 0),
    }
}
