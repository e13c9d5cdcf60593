//! `sparsedit` command-line driver.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;
pub use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "sparsedit", version, about = "Train, sample and analyse SparseDiT models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's top-level `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `[output] dir`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on the synthetic dataset; writes model.ckpt and metrics.csv.
    Train(Common),
    /// Draw samples with DDPM or DDIM; writes samples.ckpt, PGM previews and grid_trace.csv.
    Sample(Common),
    /// Schedule-averaged FLOPs; writes flops.csv.
    Flops(Common),
    /// Convert a dense checkpoint into the configured sparse model.
    ImportCkpt {
        #[arg(long)]
        dense: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer attention-map variance; writes attn_profile.csv and .svg.
    AttnProfile(Common),
    /// Replace the first k attention maps by uniform ones; writes ablation.csv and .svg.
    AblateUniformAttn(Common),
}

fn load(c: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(d) = &c.out_dir {
        cfg.output.dir = d.clone();
    }
    Ok(cfg)
}

/// Parses `argv` (program name first) and runs the subcommand, returning
/// its report text.
pub fn dispatch<I, T>(argv: I) -> Result<String, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            return Ok(e.to_string())
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            return Err(CliError::new("usage", first.trim_start_matches("error: ").to_string()));
        }
    };
    match cli.command {
        Command::Train(c) => commands::train(&load(&c)?),
        Command::Sample(c) => commands::sample(&load(&c)?),
        Command::Flops(c) => commands::flops(&load(&c)?),
        Command::ImportCkpt { dense, config, out } => commands::import_ckpt(&RunConfig::load(&config)?, &dense, &out),
        Command::AttnProfile(c) => commands::attn_profile(&load(&c)?),
        Command::AblateUniformAttn(c) => commands::ablate(&load(&c)?),
    }
}

/// Runs `dispatch`, printing the report or the one-line error, and returns
/// the process exit code.
pub fn run<I, T>(argv: I, out: &mut impl Write, err: &mut impl Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match dispatch(argv) {
        Ok(text) => {
            let _ = out.write_all(text.as_bytes());
            0
        }
        Err(e) => {
            let _ = writeln!(err, "{}", e.to_line());
            e.exit_code()
        }
    }
}
