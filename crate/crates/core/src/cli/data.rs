//! Loads the splits named by a run config.

use std::path::Path;

use super::config::DataSection;
use super::CliError;
use crate::data::{gen_adding_task, gen_copy_task, load_mnist_idx, permute, split, SequenceDataset};
use crate::train::derive_seed;

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: SequenceDataset,
    pub val: Option<SequenceDataset>,
    pub test: Option<SequenceDataset>,
}

impl Splits {
    pub fn get(&self, name: &str) -> Result<&SequenceDataset, CliError> {
        match name {
            "train" => Ok(&self.train),
            "val" => self.val.as_ref().ok_or_else(|| CliError::Config("config defines no validation split".into())),
            "test" => self.test.as_ref().ok_or_else(|| CliError::Config("config defines no test split".into())),
            other => Err(CliError::Config(format!("unknown split `{other}`; expected train, val or test"))),
        }
    }
}

fn require(path: &Path) -> Result<(), CliError> {
    if !path.exists() {
        return Err(CliError::Data(format!("data file not found: {}", path.display())));
    }
    Ok(())
}

fn head(ds: SequenceDataset, count: Option<usize>) -> SequenceDataset {
    match count {
        Some(c) if c < ds.len() => ds.subset(&(0..c).collect::<Vec<_>>()),
        _ => ds,
    }
}

fn non_empty(ds: SequenceDataset) -> Option<SequenceDataset> {
    (!ds.is_empty()).then_some(ds)
}

/// Carves `val_count` seed-stable rows out of `train`.
fn carve(train: SequenceDataset, val_count: usize, seed: u64) -> Result<(SequenceDataset, Option<SequenceDataset>), CliError> {
    if val_count == 0 {
        return Ok((train, None));
    }
    if val_count >= train.len() {
        return Err(CliError::Config(format!("val_count {val_count} leaves no training rows out of {}", train.len())));
    }
    let rest = train.len() - val_count;
    let mut parts = split(&train, &[rest, val_count], seed)?;
    let val = parts.pop().expect("two parts");
    Ok((parts.pop().expect("two parts"), Some(val)))
}

/// Split seeds for the synthetic generators: train, val, test.
const SPLIT_STREAM: u64 = 16;

pub fn load_splits(section: &DataSection) -> Result<Splits, CliError> {
    let splits = match section {
        DataSection::Mnist {
            train_images,
            train_labels,
            test_images,
            test_labels,
            permutation_seed,
            train_count,
            val_count,
            test_count,
            split_seed,
        } => {
            for p in [train_images, train_labels, test_images, test_labels] {
                require(p)?;
            }
            let train = head(load_mnist_idx(train_images, train_labels)?, *train_count);
            let test = head(load_mnist_idx(test_images, test_labels)?, *test_count);
            let (train, val) = carve(train, *val_count, *split_seed)?;
            Splits {
                train: permute(&train, *permutation_seed),
                val: val.map(|v| permute(&v, *permutation_seed)),
                test: non_empty(permute(&test, *permutation_seed)),
            }
        }
        DataSection::Adding {
            len,
            train_count,
            val_count,
            test_count,
            seed,
        } => {
            let gen = |count, i| gen_adding_task(count, *len, derive_seed(*seed, SPLIT_STREAM, i));
            Splits {
                train: gen(*train_count, 0)?,
                val: non_empty(gen(*val_count, 1)?),
                test: non_empty(gen(*test_count, 2)?),
            }
        }
        DataSection::Copy {
            len,
            lag,
            spec,
            train_count,
            val_count,
            test_count,
            seed,
        } => {
            let gen = |count, i| gen_copy_task(count, *len, *lag, *spec, derive_seed(*seed, SPLIT_STREAM, i));
            Splits {
                train: gen(*train_count, 0)?,
                val: non_empty(gen(*val_count, 1)?),
                test: non_empty(gen(*test_count, 2)?),
            }
        }
        DataSection::Files { train, val, test } => {
            let load = |p: &Path| -> Result<SequenceDataset, CliError> {
                require(p)?;
                Ok(SequenceDataset::load(p)?)
            };
            Splits {
                train: load(train)?,
                val: val.as_deref().map(load).transpose()?,
                test: test.as_deref().map(load).transpose()?,
            }
        }
    };
    if splits.train.is_empty() {
        return Err(CliError::Data("training split is empty".into()));
    }
    Ok(splits)
}
