use std::fs;
use std::path::{Path, PathBuf};

use acan::data::{generate_dataset, read_dataset, SynthConfig, SynthDataset};
use acan::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Where the clips come from: a directory in the on-disk layout, or the
/// generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory; when set, `synth` and `seed` are ignored.
    pub dir: Option<PathBuf>,
    pub synth: SynthConfig,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            synth: SynthConfig::default(),
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn load(&self) -> Result<SynthDataset, CliError> {
        match &self.dir {
            Some(dir) => Ok(read_dataset(dir)?.0),
            None => Ok(generate_dataset(&self.synth, self.seed)?),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            train: TrainConfig::default(),
            output: PathBuf::from("runs/acan"),
        }
    }
}

impl RunConfig {
    /// Any failure to read or parse the file is a usage error naming it.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}
