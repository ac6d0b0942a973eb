//! Reverse-mode training: tape, adjoints, loss, optimizer, training loop,
//! evaluation and checkpoints.

pub mod adjoint;
pub mod checkpoint;
pub mod loss;
pub mod optim;
pub mod tape;
pub mod trainer;

use thiserror::Error;

use crate::layers::LayerError;
use crate::ssm::SsmError;

pub use adjoint::{backward_conv, backward_discretize, kernel_backward, ssm_param_grad, surrogate_spike_grad};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use loss::{softmax_cross_entropy, LossOutput, IGNORE_INDEX};
pub use optim::{cosine_lr, AdamConfig, OptimizerState};
pub use tape::{forward_model, ForwardPass, Tape};
pub use trainer::{
    evaluate, fit, loss_and_grad, recalibrate_running_stats, train_step, train_step_in, Batch, ClassMetrics, EpochReport, EvalConfig, EvalMetrics, StepReport,
    TrainConfig,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Ssm(#[from] SsmError),
    #[error("non-finite loss; first non-finite value produced by `{layer}`")]
    NonFiniteLoss { layer: String },
    #[error("dataset incompatible with model: {0}")]
    Incompatible(String),
}

/// Child seed for `(root, stream, index)`; all randomness in a run derives from one root.
pub fn derive_seed(root: u64, stream: u64, index: u64) -> u64 {
    let mut z = root ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = splitmix(z);
    splitmix(z ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed streams.
pub const STREAM_INIT: u64 = 1;
pub const STREAM_SHUFFLE: u64 = 2;
pub const STREAM_SAMPLER: u64 = 3;
pub const STREAM_EVAL: u64 = 4;
pub const STREAM_RECALIBRATE: u64 = 5;
