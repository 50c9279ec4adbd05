use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thpn::self_training::RoundRecord;
use thpn::toy_model::{mix_seed, StepSummary};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Per-component seeds split off the single command-line seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentSeeds {
    pub data: u64,
    pub init: u64,
    pub train: u64,
}

impl ComponentSeeds {
    pub fn derive(seed: u64) -> Self {
        ComponentSeeds {
            data: mix_seed(&[seed, 0]),
            init: mix_seed(&[seed, 1]),
            train: mix_seed(&[seed, 2]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub num_original: usize,
    pub num_pseudo: usize,
    pub final_loss: Option<StepSummary>,
    pub seconds: f64,
}

impl From<&RoundRecord> for RoundSummary {
    fn from(r: &RoundRecord) -> Self {
        RoundSummary {
            round: r.round,
            epochs: r.epochs,
            learning_rate: r.learning_rate,
            num_original: r.num_original,
            num_pseudo: r.num_pseudo,
            final_loss: r.losses.last().copied(),
            seconds: r.seconds,
        }
    }
}

/// One grid point of a sweep that did not finish.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFailure {
    pub lambda_cls: f64,
    pub p_percent: f64,
    pub seed: u64,
    pub error: String,
}

/// Written next to the outputs of every command. The config snapshot holds
/// every resolved setting, so the run can be repeated from this file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    pub seeds: Option<ComponentSeeds>,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, PathBuf>,
    pub seconds: f64,
    #[serde(default)]
    pub total_epochs: Option<usize>,
    #[serde(default)]
    pub rounds: Vec<RoundSummary>,
    #[serde(default)]
    pub failures: Vec<GridFailure>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            argv: std::env::args().collect(),
            seed: None,
            seeds: None,
            config: serde_json::Value::Null,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            seconds: 0.0,
            total_epochs: None,
            rounds: Vec::new(),
            failures: Vec::new(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self.seeds = Some(ComponentSeeds::derive(seed));
        self
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.into(), path.to_path_buf());
    }

    pub fn output(&mut self, name: &str, path: &Path) {
        self.outputs.insert(name.into(), path.to_path_buf());
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::runtime("serializing manifest", e))?;
        fs::write(&path, text).map_err(|e| CliError::runtime(path.display(), e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::runtime(path.display(), e))?;
        serde_json::from_str(&text).map_err(|e| CliError::runtime(path.display(), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_differ_per_component_and_are_stable() {
        let s = ComponentSeeds::derive(7);
        assert_eq!(s, ComponentSeeds::derive(7));
        assert_ne!(s.data, s.init);
        assert_ne!(s.init, s.train);
        assert_ne!(s, ComponentSeeds::derive(8));
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("selftrain").with_seed(3);
        m.total_epochs = Some(28);
        m.input("data", Path::new("/tmp/data"));
        m.config = serde_json::json!({"rounds": 3});
        let p = m.save(dir.path()).unwrap();
        assert_eq!(RunManifest::load(&p).unwrap(), m);
    }
}
