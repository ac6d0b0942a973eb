//! Run manifest: everything needed to replay a run.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use super::{io_error, CliError};
use crate::data::SequenceDataset;
use crate::layers::ModelConfig;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetFingerprint {
    pub name: String,
    pub rows: usize,
    pub seq_len: usize,
    pub features: usize,
    pub permutation_seed: Option<u64>,
    /// SHA-256 over the inputs, labels and ids as little-endian bytes.
    pub sha256: String,
}

impl DatasetFingerprint {
    pub fn of(ds: &SequenceDataset) -> Self {
        let mut h = Sha256::new();
        for v in &ds.inputs.data {
            h.update(v.to_le_bytes());
        }
        for l in &ds.labels {
            h.update(l.to_le_bytes());
        }
        for id in &ds.ids {
            h.update(id.to_le_bytes());
        }
        Self {
            name: ds.meta.name.clone(),
            rows: ds.len(),
            seq_len: ds.seq_len(),
            features: ds.features(),
            permutation_seed: ds.meta.permutation_seed,
            sha256: hex::encode(h.finalize()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub code_version: String,
    pub config_hash: String,
    pub root_seed: u64,
    pub config: RunConfig,
    pub model: ModelConfig,
    pub train_data: DatasetFingerprint,
    pub val_data: Option<DatasetFingerprint>,
    pub test_data: Option<DatasetFingerprint>,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| io_error(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read manifest {}: {e}", path.display())))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("manifest: {e}")))?;
        if m.manifest_version != MANIFEST_VERSION {
            return Err(CliError::Config(format!("unsupported manifest version {}", m.manifest_version)));
        }
        Ok(m)
    }
}
