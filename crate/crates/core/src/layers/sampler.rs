//! Stochastic spike generation.
//!
//! Each element draws `z ~ U(0, 1]` from a counter-based hash of
//! `(seed, site, example, t, neuron)` and spikes iff `z ≤ p`, so
//! `P(S = 1) = p`. Keying on the example id instead of the batch row keeps
//! results independent of batch composition and order.

use super::LayerError;
use crate::tensor::Tensor3;

/// Randomness coordinates for one sampler invocation.
#[derive(Clone, Debug)]
pub struct SampleKey<'a> {
    pub seed: u64,
    pub site: u32,
    /// Stable id of each batch row (usually the dataset index).
    pub example_ids: &'a [u64],
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    // SplitMix64 finalizer.
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// Uniform draw in `(0, 1]` for one element.
#[inline]
pub fn uniform_at(seed: u64, site: u32, example: u64, t: usize, neuron: usize) -> f64 {
    let mut h = mix64(seed.wrapping_add(GOLDEN));
    h = mix64(h ^ (site as u64).wrapping_mul(GOLDEN));
    h = mix64(h ^ example.wrapping_add(GOLDEN));
    h = mix64(h ^ (t as u64).wrapping_mul(0xd6e8_feb8_6659_fd93));
    h = mix64(h ^ (neuron as u64).wrapping_add(0x2545_f491_4f6c_dd1d));
    ((h >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Bernoulli spikes with per-element probability `p`.
pub fn spike_sample(p: &Tensor3, key: &SampleKey<'_>) -> Result<Tensor3, LayerError> {
    if key.example_ids.len() != p.batch {
        return Err(LayerError::shape("spike_sample", p.batch, key.example_ids.len()));
    }
    let mut out = Tensor3::zeros(p.batch, p.time, p.chan);
    for b in 0..p.batch {
        let example = key.example_ids[b];
        for t in 0..p.time {
            for c in 0..p.chan {
                let i = p.idx(b, t, c);
                let prob = p.data[i];
                if !(0.0..=1.0).contains(&prob) {
                    return Err(LayerError::ProbabilityOutOfRange { index: i, value: prob });
                }
                if prob == 0.0 {
                    continue;
                }
                if uniform_at(key.seed, key.site, example, t, c) <= prob {
                    out.data[i] = 1.0;
                }
            }
        }
    }
    Ok(out)
}
