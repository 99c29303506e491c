use std::path::{Path, PathBuf};

use mcbmt::data::{write_atomic, SyntheticTaskSpec};
use mcbmt::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticTaskSpec),
    Files {
        train_src: PathBuf,
        train_tgt: PathBuf,
        train_features: Option<PathBuf>,
        val_src: PathBuf,
        val_tgt: PathBuf,
        val_features: Option<PathBuf>,
        min_count: usize,
    },
}

/// Everything needed to repeat a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub data: DataSource,
    /// SHA-256 over git-style blob hashes of every input.
    pub input_hash: String,
    pub out_dir: PathBuf,
}

fn blob_hash(bytes: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().into()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl DataSource {
    pub fn content_hash(&self) -> CliResult<String> {
        let mut outer = Sha256::new();
        match self {
            DataSource::Synthetic(spec) => {
                let json = serde_json::to_vec(spec).map_err(|e| CliError::data(e.to_string()))?;
                outer.update(blob_hash(&json));
            }
            DataSource::Files {
                train_src,
                train_tgt,
                train_features,
                val_src,
                val_tgt,
                val_features,
                ..
            } => {
                let paths = [Some(train_src), Some(train_tgt), train_features.as_ref(), Some(val_src), Some(val_tgt), val_features.as_ref()];
                for p in paths.into_iter().flatten() {
                    let bytes = std::fs::read(p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
                    outer.update(blob_hash(&bytes));
                }
            }
        }
        Ok(hex(&outer.finalize()))
    }
}

impl RunManifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let mut json = serde_json::to_string_pretty(self).map_err(|e| CliError::data(e.to_string()))?;
        json.push('\n');
        write_atomic(path, json.as_bytes()).map_err(CliError::from)
    }
}
