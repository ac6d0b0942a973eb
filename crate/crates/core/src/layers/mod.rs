//! Spiking building blocks: sampler, neuron mixer, encoder/decoder,
//! normalization, the LIF baseline, and the stacked S6 encoder block.

pub mod block;
pub mod decoder;
pub mod encoder;
pub mod lif;
pub mod mixer;
pub mod norm;
pub mod params;
pub mod sampler;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ssm::SsmError;

pub use block::{sample_or_expect, s6_block_forward, ssm_conv_forward, BlockActivity, BlockContext, BlockOutput, SsmLayerCache};
pub use decoder::{decode_sequence, DecoderWeights, Readout};
pub use encoder::{encode_affine, encode_input, EncoderWeights};
pub use lif::{lif_step, LifParams};
pub use mixer::{gelu, gelu_grad, mixer_forward, mixer_preactivation_gather, MixerWeights};
pub use norm::{NormCache, NormKind, NormParams, NormSite, NormStats, NormUse};
pub use params::{BlockParams, Model, ModelBuffers, ModelConfig, ModelParams};
pub use sampler::{spike_sample, uniform_at, SampleKey};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayerError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("probability {value} out of [0, 1] at flat index {index}")]
    ProbabilityOutOfRange { index: usize, value: f64 },
    #[error("empty time axis")]
    EmptyTime,
    #[error(transparent)]
    Ssm(#[from] SsmError),
}

impl LayerError {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        LayerError::ShapeMismatch {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}

/// How SSM parameters are shared inside one layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSharing {
    /// One `(A, B, C, Δ)` for all neurons of the layer.
    #[default]
    PerLayer,
    /// Every neuron owns its parameters.
    PerNeuron,
}

/// Per-layer shape and wiring.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct S6LayerConfig {
    pub num_neurons: usize,
    pub state_dim: usize,
    pub param_sharing: ParamSharing,
    pub norm: NormKind,
    pub residual: bool,
}

/// Forward-pass behaviour of the samplers and normalization layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Bernoulli spikes, batch statistics.
    TrainSample,
    /// Bernoulli spikes, running statistics.
    EvalSample,
    /// Probabilities propagate in place of spikes, running statistics.
    EvalExpected,
    /// Probabilities propagate in place of spikes, batch statistics.
    /// This is the function whose gradient a training step follows.
    TrainExpected,
}

impl Mode {
    pub fn samples(self) -> bool {
        matches!(self, Mode::TrainSample | Mode::EvalSample)
    }

    pub fn norm_use(self) -> NormUse {
        match self {
            Mode::TrainSample | Mode::TrainExpected => NormUse::Batch,
            Mode::EvalSample | Mode::EvalExpected => NormUse::Running,
        }
    }
}

/// Sampler site numbering: encoder = 0, block `k` neurons = `2k+1`, block `k` output = `2k+2`.
pub fn sampler_site_encoder() -> u32 {
    0
}

pub fn sampler_site_neurons(block: usize) -> u32 {
    2 * block as u32 + 1
}

pub fn sampler_site_output(block: usize) -> u32 {
    2 * block as u32 + 2
}
