//! Sequence datasets: MNIST IDX ingestion, permutation, synthetic long-range
//! tasks, splits, and the on-disk container encoding.

pub mod idx;
pub mod tasks;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{Container, ContainerError};
use crate::tensor::Tensor3;
use crate::train::IGNORE_INDEX;

pub use idx::{load_mnist_idx, parse_idx_images, parse_idx_labels, write_idx_images, write_idx_labels};
pub use tasks::{gen_adding_task, gen_copy_task, CopyTaskSpec, ADDING_BINS};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("file truncated: {0}")]
    TruncatedFile(String),
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("invalid sequence length: {0}")]
    InvalidLength(String),
    #[error("dataset invariant violated: {0}")]
    Invalid(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

pub const DATASET_KIND: &str = "sequence_dataset";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub num_classes: usize,
    /// Seed of the applied permutation, if any.
    pub permutation_seed: Option<u64>,
    /// `permutation[i]` is the source index of output position `i`.
    pub permutation: Option<Vec<usize>>,
    /// Free-form generation parameters.
    #[serde(default)]
    pub params: serde_json::Value,
}

/// `count` sequences of shared length `L`, with `label_len` targets per sequence
/// (`1` for one label per sequence, `L` for per-step targets).
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDataset {
    pub inputs: Tensor3,
    pub labels: Vec<i64>,
    pub label_len: usize,
    /// Stable id per sequence; keys the samplers so results ignore batch order.
    pub ids: Vec<u64>,
    pub meta: DatasetMeta,
}

impl SequenceDataset {
    pub fn len(&self) -> usize {
        self.inputs.batch
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn seq_len(&self) -> usize {
        self.inputs.time
    }

    pub fn features(&self) -> usize {
        self.inputs.chan
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.len();
        if self.labels.len() != n * self.label_len {
            return Err(DataError::Invalid(format!(
                "{} labels for {} sequences x {} targets",
                self.labels.len(),
                n,
                self.label_len
            )));
        }
        if self.ids.len() != n {
            return Err(DataError::Invalid("one id per sequence required".into()));
        }
        if self.label_len != 1 && self.label_len != self.seq_len() {
            return Err(DataError::Invalid(format!("label_len {} must be 1 or L", self.label_len)));
        }
        let k = self.meta.num_classes as i64;
        for &l in &self.labels {
            let ignorable = self.label_len > 1 && l == IGNORE_INDEX;
            if !ignorable && !(0..k).contains(&l) {
                return Err(DataError::Invalid(format!("label {l} outside [0, {k})")));
            }
        }
        if !self.inputs.all_finite() {
            return Err(DataError::Invalid("non-finite input".into()));
        }
        Ok(())
    }

    /// New dataset with the given rows, in order.
    pub fn subset(&self, rows: &[usize]) -> SequenceDataset {
        let (l, f) = (self.seq_len(), self.features());
        let mut data = Vec::with_capacity(rows.len() * l * f);
        let mut labels = Vec::with_capacity(rows.len() * self.label_len);
        let mut ids = Vec::with_capacity(rows.len());
        for &r in rows {
            data.extend_from_slice(&self.inputs.data[r * l * f..(r + 1) * l * f]);
            labels.extend_from_slice(&self.labels[r * self.label_len..(r + 1) * self.label_len]);
            ids.push(self.ids[r]);
        }
        SequenceDataset {
            inputs: Tensor3::from_vec(rows.len(), l, f, data),
            labels,
            label_len: self.label_len,
            ids,
            meta: self.meta.clone(),
        }
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(
            DATASET_KIND,
            serde_json::json!({
                "meta": self.meta,
                "label_len": self.label_len,
            }),
        );
        let (n, l, f) = self.inputs.shape();
        c.push("inputs", vec![n, l, f], &self.inputs.data);
        let labels: Vec<f64> = self.labels.iter().map(|&v| v as f64).collect();
        c.push("labels", vec![n, self.label_len], &labels);
        let ids: Vec<f64> = self.ids.iter().map(|&v| v as f64).collect();
        c.push("ids", vec![n], &ids);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, DataError> {
        c.expect_kind(DATASET_KIND)?;
        let meta: DatasetMeta = serde_json::from_value(c.meta["meta"].clone())
            .map_err(|e| ContainerError::BadHeader(format!("dataset meta: {e}")))?;
        let label_len = c.meta["label_len"]
            .as_u64()
            .ok_or_else(|| ContainerError::BadHeader("label_len".into()))? as usize;
        let shape = c.entry("inputs")?.shape.clone();
        if shape.len() != 3 {
            return Err(DataError::Invalid("inputs must be rank 3".into()));
        }
        let (n, l, f) = (shape[0], shape[1], shape[2]);
        let inputs = Tensor3::from_vec(n, l, f, c.get("inputs")?);
        let labels = c.get_len("labels", n * label_len)?.into_iter().map(|v| v as i64).collect();
        let ids = c.get_len("ids", n)?.into_iter().map(|v| v as u64).collect();
        let ds = SequenceDataset {
            inputs,
            labels,
            label_len,
            ids,
            meta,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        Ok(self.to_container().write(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        if !path.exists() {
            return Err(DataError::Io {
                path: path.display().to_string(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
            });
        }
        Self::from_container(&Container::read(path)?)
    }
}

/// Fixed permutation of `0..len` drawn from `seed`; `None` is the identity.
pub fn permutation_for(len: usize, seed: Option<u64>) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..len).collect();
    if let Some(s) = seed {
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
    }
    perm
}

fn apply_time_permutation(ds: &SequenceDataset, perm: &[usize]) -> Tensor3 {
    let (n, l, f) = ds.inputs.shape();
    let mut out = Tensor3::zeros(n, l, f);
    for b in 0..n {
        for (t, &src) in perm.iter().enumerate() {
            for c in 0..f {
                out.set(b, t, c, ds.inputs.get(b, src, c));
            }
        }
    }
    out
}

/// Applies one permutation of the time axis to every sequence and records it.
///
/// `seed = None` keeps the data unchanged and records the identity.
pub fn permute(ds: &SequenceDataset, seed: Option<u64>) -> SequenceDataset {
    let perm = permutation_for(ds.seq_len(), seed);
    let mut out = ds.clone();
    out.inputs = apply_time_permutation(ds, &perm);
    out.meta.permutation_seed = seed;
    out.meta.permutation = Some(perm);
    out
}

/// Undoes the recorded permutation.
pub fn inverse_permute(ds: &SequenceDataset) -> SequenceDataset {
    let Some(perm) = &ds.meta.permutation else {
        return ds.clone();
    };
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    let mut out = ds.clone();
    out.inputs = apply_time_permutation(ds, &inv);
    out.meta.permutation_seed = None;
    out.meta.permutation = None;
    out
}

/// Seed-stable disjoint split into sets of the given sizes (remaining rows are dropped).
pub fn split(ds: &SequenceDataset, sizes: &[usize], seed: u64) -> Result<Vec<SequenceDataset>, DataError> {
    let total: usize = sizes.iter().sum();
    if total > ds.len() {
        return Err(DataError::Invalid(format!("split sizes sum to {total} > {} rows", ds.len())));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut start = 0;
    Ok(sizes
        .iter()
        .map(|&s| {
            let rows = &order[start..start + s];
            start += s;
            ds.subset(rows)
        })
        .collect())
}
