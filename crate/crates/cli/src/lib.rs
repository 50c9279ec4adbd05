//! Command-line workflows over the `thpn` library: synthesize data,
//! self-train, evaluate, sweep, and the multi-seed open-set comparison.
//!
//! Every command that produces files writes them into one output directory
//! together with a [`manifest::RunManifest`].

use std::fs;
use std::path::PathBuf;

pub mod args;
pub mod data;
mod error;
pub mod eval;
pub mod manifest;
pub mod openset;
pub mod report;
pub mod selftrain;
pub mod sweep;
pub mod synth;

pub use error::CliError;

use args::{Cli, Command, OutArgs};

/// Root for output directories when `--out` is not given.
pub const OUT_ROOT_ENV: &str = "THPN_OUT_ROOT";
pub const DEFAULT_OUT_ROOT: &str = "runs";

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let name = cli.command.name();
    match &cli.command {
        Command::Synth(a) => synth::cmd_synth(a, &out_dir(&a.out, name)?).map(drop),
        Command::Selftrain(a) => selftrain::cmd_selftrain(a, &out_dir(&a.out, name)?).map(drop),
        Command::Eval(a) => eval::cmd_eval(a, &out_dir(&a.out, name)?).map(drop),
        Command::Sweep(a) => sweep::cmd_sweep(a, &out_dir(&a.out, name)?).map(drop),
        Command::Report(a) => report::cmd_report(a),
        Command::Openset(a) => openset::cmd_openset(a, &out_dir(&a.out, name)?).map(drop),
    }
}

/// Resolve and create the output directory of a command.
pub fn out_dir(out: &OutArgs, command: &str) -> Result<PathBuf, CliError> {
    let dir = match &out.out {
        Some(p) => p.clone(),
        None => std::env::var_os(OUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT))
            .join(command),
    };
    fs::create_dir_all(&dir).map_err(|e| CliError::runtime(dir.display(), e))?;
    Ok(dir)
}
