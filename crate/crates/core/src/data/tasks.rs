//! Synthetic long-range tasks.
//!
//! Adding problem: two features per step, a value `U[0, 1)` and a marker.
//! Exactly two markers are set, one in each half of the sequence. The label
//! is the sum of the two marked values binned into [`ADDING_BINS`] equal bins
//! over `[0, 2)`.
//!
//! Copy memory: `payload` tokens drawn uniformly from `alphabet` symbols
//! occupy steps `0..payload`, one-hot encoded over `alphabet` features; every
//! other step is blank (all zeros). Steps `lag..lag + payload` must reproduce
//! the payload in order; all other steps carry the ignore label.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, DatasetMeta, SequenceDataset};
use crate::tensor::Tensor3;
use crate::train::IGNORE_INDEX;

pub const ADDING_BINS: usize = 10;
const MIN_LEN: usize = 8;

fn check_len(len: usize) -> Result<(), DataError> {
    if len < MIN_LEN {
        return Err(DataError::InvalidLength(format!("L = {len} < {MIN_LEN}")));
    }
    Ok(())
}

pub fn adding_bin(sum: f64) -> i64 {
    ((sum / (2.0 / ADDING_BINS as f64)).floor() as i64).clamp(0, ADDING_BINS as i64 - 1)
}

pub fn gen_adding_task(count: usize, len: usize, seed: u64) -> Result<SequenceDataset, DataError> {
    check_len(len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Tensor3::zeros(count, len, 2);
    let mut labels = Vec::with_capacity(count);
    let half = len / 2;
    for b in 0..count {
        for t in 0..len {
            inputs.set(b, t, 0, rng.gen::<f64>());
        }
        let first = rng.gen_range(0..half);
        let second = rng.gen_range(half..len);
        inputs.set(b, first, 1, 1.0);
        inputs.set(b, second, 1, 1.0);
        labels.push(adding_bin(inputs.get(b, first, 0) + inputs.get(b, second, 0)));
    }
    Ok(SequenceDataset {
        inputs,
        labels,
        label_len: 1,
        ids: (0..count as u64).collect(),
        meta: DatasetMeta {
            name: "adding".into(),
            num_classes: ADDING_BINS,
            permutation_seed: None,
            permutation: None,
            params: serde_json::json!({ "count": count, "len": len, "seed": seed }),
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CopyTaskSpec {
    pub alphabet: usize,
    pub payload: usize,
}

impl Default for CopyTaskSpec {
    fn default() -> Self {
        Self {
            alphabet: 8,
            payload: 10,
        }
    }
}

pub fn gen_copy_task(count: usize, len: usize, lag: usize, spec: CopyTaskSpec, seed: u64) -> Result<SequenceDataset, DataError> {
    check_len(len)?;
    if lag >= len {
        return Err(DataError::InvalidLength(format!("lag {lag} >= L = {len}")));
    }
    if spec.payload == 0 || spec.payload > lag || lag + spec.payload > len {
        return Err(DataError::InvalidLength(format!(
            "payload {} must satisfy 0 < payload <= lag and lag + payload <= L",
            spec.payload
        )));
    }
    if spec.alphabet < 2 {
        return Err(DataError::Invalid("alphabet needs at least 2 symbols".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Tensor3::zeros(count, len, spec.alphabet);
    let mut labels = vec![IGNORE_INDEX; count * len];
    for b in 0..count {
        for t in 0..spec.payload {
            let tok = rng.gen_range(0..spec.alphabet);
            inputs.set(b, t, tok, 1.0);
            labels[b * len + lag + t] = tok as i64;
        }
    }
    Ok(SequenceDataset {
        inputs,
        labels,
        label_len: len,
        ids: (0..count as u64).collect(),
        meta: DatasetMeta {
            name: "copy".into(),
            num_classes: spec.alphabet,
            permutation_seed: None,
            permutation: None,
            params: serde_json::json!({
                "count": count, "len": len, "lag": lag,
                "alphabet": spec.alphabet, "payload": spec.payload, "seed": seed,
            }),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adding_label_from_marked_values() {
        let ds = gen_adding_task(50, 32, 3).unwrap();
        ds.validate().unwrap();
        for b in 0..50 {
            let marked: Vec<usize> = (0..32).filter(|&t| ds.inputs.get(b, t, 1) == 1.0).collect();
            assert_eq!(marked.len(), 2);
            assert!(marked[0] < 16 && marked[1] >= 16);
            let sum = ds.inputs.get(b, marked[0], 0) + ds.inputs.get(b, marked[1], 0);
            assert_eq!(ds.labels[b], (sum / 0.2).floor() as i64);
        }
    }

    #[test]
    fn adding_bins_by_hand() {
        assert_eq!(adding_bin(0.0), 0);
        assert_eq!(adding_bin(0.3 + 0.25), 2);
        assert_eq!(adding_bin(1.99), 9);
        assert_eq!(adding_bin(2.0), 9);
    }

    #[test]
    fn copy_targets_are_shifted_inputs() {
        let spec = CopyTaskSpec { alphabet: 4, payload: 5 };
        let ds = gen_copy_task(10, 40, 20, spec, 9).unwrap();
        ds.validate().unwrap();
        for b in 0..10 {
            for t in 0..40 {
                let target = ds.labels[b * 40 + t];
                if (20..25).contains(&t) {
                    let src = t - 20;
                    let hot: Vec<usize> = (0..4).filter(|&c| ds.inputs.get(b, src, c) == 1.0).collect();
                    assert_eq!(hot, vec![target as usize]);
                } else {
                    assert_eq!(target, IGNORE_INDEX);
                }
                if t >= 5 {
                    assert!((0..4).all(|c| ds.inputs.get(b, t, c) == 0.0));
                }
            }
        }
    }

    #[test]
    fn regeneration_is_bit_identical() {
        assert_eq!(gen_adding_task(5, 16, 1).unwrap(), gen_adding_task(5, 16, 1).unwrap());
        let spec = CopyTaskSpec::default();
        assert_eq!(gen_copy_task(3, 64, 30, spec, 2).unwrap(), gen_copy_task(3, 64, 30, spec, 2).unwrap());
        assert_ne!(gen_adding_task(5, 16, 1).unwrap(), gen_adding_task(5, 16, 2).unwrap());
    }

    #[test]
    fn invalid_lengths() {
        assert!(matches!(gen_adding_task(1, 7, 0), Err(DataError::InvalidLength(_))));
        assert!(matches!(gen_copy_task(1, 16, 16, CopyTaskSpec::default(), 0), Err(DataError::InvalidLength(_))));
        assert!(matches!(gen_copy_task(1, 16, 12, CopyTaskSpec { alphabet: 3, payload: 5 }, 0), Err(DataError::InvalidLength(_))));
        assert_eq!(gen_adding_task(0, 8, 0).unwrap().len(), 0);
    }
}
