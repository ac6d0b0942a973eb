//! Run configuration: one JSON document, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CliError;
use crate::data::CopyTaskSpec;
use crate::layers::norm::NormKind;
use crate::layers::{Mode, ModelConfig, ParamSharing, Readout};
use crate::ssm::Squash;
use crate::train::trainer::EvalConfig;
use crate::train::{AdamConfig, TrainConfig};

/// Environment variable prefixed to relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "S6_OUTPUT_ROOT";

fn default_true() -> bool {
    true
}

fn default_threads() -> usize {
    1
}

/// Architecture; input width and class count come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub num_blocks: usize,
    pub num_neurons: usize,
    pub state_dim: usize,
    #[serde(default)]
    pub param_sharing: ParamSharing,
    #[serde(default)]
    pub norm: NormKind,
    #[serde(default = "default_true")]
    pub residual: bool,
    #[serde(default = "default_true")]
    pub encoder_norm: bool,
    #[serde(default)]
    pub readout: Readout,
    #[serde(default)]
    pub squash: Squash,
    #[serde(default = "default_encoder_std")]
    pub encoder_init_std: f64,
}

fn default_encoder_std() -> f64 {
    1.0
}

impl ModelSection {
    pub fn model_config(&self, input_dim: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            num_blocks: self.num_blocks,
            num_neurons: self.num_neurons,
            state_dim: self.state_dim,
            num_classes,
            param_sharing: self.param_sharing,
            norm: self.norm,
            residual: self.residual,
            encoder_norm: self.encoder_norm,
            readout: self.readout,
            squash: self.squash,
            encoder_init_std: self.encoder_init_std,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_scale")]
    pub ssm_lr_scale: f64,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub warmup_steps: u64,
    #[serde(default)]
    pub min_lr_ratio: f64,
    /// `train_sample` (spikes) or `train_expected` (probabilities).
    #[serde(default = "default_train_mode")]
    pub mode: Mode,
    /// Training rows used to re-estimate norm statistics after each epoch; 0 disables.
    #[serde(default)]
    pub recalibrate_rows: usize,
}

fn default_train_mode() -> Mode {
    Mode::TrainSample
}

fn default_scale() -> f64 {
    1.0
}

fn default_permutation_seed() -> Option<u64> {
    Some(42)
}

/// Where sequences come from. Validation rows are carved from the training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSection {
    /// IDX files; permuted sequential unless `permutation_seed` is null.
    Mnist {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default = "default_permutation_seed")]
        permutation_seed: Option<u64>,
        #[serde(default)]
        train_count: Option<usize>,
        #[serde(default)]
        val_count: usize,
        #[serde(default)]
        test_count: Option<usize>,
        #[serde(default)]
        split_seed: u64,
    },
    Adding {
        len: usize,
        train_count: usize,
        #[serde(default)]
        val_count: usize,
        test_count: usize,
        seed: u64,
    },
    Copy {
        len: usize,
        lag: usize,
        #[serde(default)]
        spec: CopyTaskSpec,
        train_count: usize,
        #[serde(default)]
        val_count: usize,
        test_count: usize,
        seed: u64,
    },
    /// Dataset containers written by `gen-data`.
    Files {
        train: PathBuf,
        #[serde(default)]
        val: Option<PathBuf>,
        #[serde(default)]
        test: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub training: TrainingSection,
    pub data: DataSection,
    #[serde(default)]
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
    /// Worker threads for batch-parallel work.
    #[serde(default = "default_threads")]
    pub threads: usize,
}

/// Inclusive ranges enforced on every run.
pub const RANGE_BLOCKS: (usize, usize) = (2, 6);
pub const RANGE_NEURONS: (usize, usize) = (64, 400);
pub const RANGE_STATE: (usize, usize) = (4, 64);
pub const RANGE_LR: (f64, f64) = (1e-4, 1e-1);
pub const RANGE_BATCH: (usize, usize) = (8, 256);

fn check_range<T: PartialOrd + std::fmt::Display>(name: &str, v: T, (lo, hi): (T, T)) -> Result<(), CliError> {
    if v < lo || v > hi {
        return Err(CliError::Config(format!("{name} = {v} outside [{lo}, {hi}]")));
    }
    Ok(())
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        check_range("model.num_blocks", self.model.num_blocks, RANGE_BLOCKS)?;
        check_range("model.num_neurons", self.model.num_neurons, RANGE_NEURONS)?;
        check_range("model.state_dim", self.model.state_dim, RANGE_STATE)?;
        check_range("training.lr", self.training.lr, RANGE_LR)?;
        check_range("training.batch_size", self.training.batch_size, RANGE_BATCH)?;
        if self.training.epochs == 0 {
            return Err(CliError::Config("training.epochs must be positive".into()));
        }
        if self.threads == 0 {
            return Err(CliError::Config("threads must be positive".into()));
        }
        if self.eval.repeats == 0 || self.eval.batch_size == 0 {
            return Err(CliError::Config("eval.repeats and eval.batch_size must be positive".into()));
        }
        if let Some(c) = self.training.grad_clip {
            if !(c > 0.0) {
                return Err(CliError::Config("training.grad_clip must be positive".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.training.min_lr_ratio) || self.training.weight_decay < 0.0 {
            return Err(CliError::Config("min_lr_ratio must be in [0, 1] and weight_decay non-negative".into()));
        }
        if !matches!(self.training.mode, Mode::TrainSample | Mode::TrainExpected) {
            return Err(CliError::Config("training.mode must be train_sample or train_expected".into()));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: t.seed,
            optimizer: AdamConfig {
                weight_decay: t.weight_decay,
                ssm_lr_scale: t.ssm_lr_scale,
                grad_clip: t.grad_clip,
                warmup_steps: t.warmup_steps,
                min_lr_ratio: t.min_lr_ratio,
                ..AdamConfig::with_lr(t.lr)
            },
            mode: t.mode,
            recalibrate_rows: t.recalibrate_rows,
            eval: self.eval.clone(),
        }
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// `output_dir`, prefixed by `$S6_OUTPUT_ROOT` when relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        resolve_output(&self.output_dir, std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).as_deref())
    }
}

pub fn resolve_output(dir: &Path, root: Option<&Path>) -> PathBuf {
    match root {
        Some(r) if dir.is_relative() => r.join(dir),
        _ => dir.to_path_buf(),
    }
}

/// Applies one `dotted.key=value` override. Values parse as JSON, falling back to a string.
pub fn apply_override(doc: &mut serde_json::Value, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not key=value")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!("override key `{key}` is malformed")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{}` is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("loop returns on the last key part")
}

/// Parses a config document after applying overrides, then validates it.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut doc: serde_json::Value =
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("config is not valid JSON: {e}")))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| CliError::Config(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text, overrides)
}
