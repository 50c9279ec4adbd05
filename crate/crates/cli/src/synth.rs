use std::fs;
use std::path::Path;
use std::time::Instant;

use thpn::dataset::{synthesize, SynthConfig};

use crate::args::SynthArgs;
use crate::data::write_synthetic;
use crate::error::{CliError, Context};
use crate::manifest::{ComponentSeeds, RunManifest};

/// Read a synthetic config; absent fields take defaults.
pub fn load_synth_config(path: Option<&Path>) -> Result<SynthConfig, CliError> {
    let cfg = match path {
        None => SynthConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::runtime(p.display(), e))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
    };
    cfg.validate().context("synthetic config")?;
    Ok(cfg)
}

pub fn cmd_synth(args: &SynthArgs, out: &Path) -> Result<RunManifest, CliError> {
    let started = Instant::now();
    let cfg = load_synth_config(args.config.as_deref())?;
    let seeds = ComponentSeeds::derive(args.seed);
    let data = synthesize(&cfg, seeds.data).context("synthesizing scenes")?;
    let files = write_synthetic(&data, out)?;

    let mut m = RunManifest::new("synth").with_seed(args.seed);
    m.config = serde_json::to_value(&cfg).map_err(|e| CliError::runtime("config", e))?;
    if let Some(p) = &args.config {
        m.input("config", p);
    }
    m.outputs = files;
    m.seconds = started.elapsed().as_secs_f64();
    m.save(out)?;
    log::info!(
        "wrote {} train / {} val scenes to {}",
        data.train.scenes.len(),
        data.val.scenes.len(),
        out.display()
    );
    Ok(m)
}
