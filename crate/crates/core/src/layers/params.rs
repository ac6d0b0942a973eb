//! Model configuration, trainable leaves, and non-trained buffers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::decoder::{DecoderWeights, Readout};
use super::encoder::EncoderWeights;
use super::mixer::MixerWeights;
use super::norm::{NormKind, NormParams, NormSite, NormStats};
use super::{ParamSharing, S6LayerConfig};
use crate::linalg::Matrix;
use crate::ssm::{ContinuousSsm, Squash};

fn default_true() -> bool {
    true
}

fn default_one() -> usize {
    1
}

fn default_encoder_std() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_one")]
    pub input_dim: usize,
    /// `M`, number of stacked S6 encoder blocks.
    pub num_blocks: usize,
    /// `N`, neurons per layer.
    pub num_neurons: usize,
    /// `n`, hidden-state dimension per neuron.
    pub state_dim: usize,
    pub num_classes: usize,
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

impl ModelConfig {
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            input_dim: 1,
            num_blocks: 1,
            num_neurons: 4,
            state_dim: 4,
            num_classes,
            param_sharing: ParamSharing::PerNeuron,
            norm: NormKind::Batch,
            residual: true,
            encoder_norm: true,
            readout: Readout::MeanPool,
            squash: Squash::Clamp,
            encoder_init_std: 1.0,
        }
    }

    pub fn layer(&self) -> S6LayerConfig {
        S6LayerConfig {
            num_neurons: self.num_neurons,
            state_dim: self.state_dim,
            param_sharing: self.param_sharing,
            norm: self.norm,
            residual: self.residual,
        }
    }

    pub fn ssm_per_layer(&self) -> usize {
        match self.param_sharing {
            ParamSharing::PerLayer => 1,
            ParamSharing::PerNeuron => self.num_neurons,
        }
    }

    pub fn validate_shapes(&self) -> Result<(), String> {
        if self.input_dim == 0 || self.num_blocks == 0 || self.num_neurons == 0 || self.state_dim == 0 {
            return Err("input_dim, num_blocks, num_neurons and state_dim must be positive".into());
        }
        if self.num_classes < 2 {
            return Err("num_classes must be at least 2".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    /// One entry when shared per layer, `N` entries when per neuron.
    pub ssm: Vec<ContinuousSsm>,
    pub mixer: MixerWeights,
    pub norm: NormParams,
}

impl BlockParams {
    /// SSM index driving neuron `c`.
    #[inline]
    pub fn ssm_index(&self, c: usize) -> usize {
        if self.ssm.len() == 1 {
            0
        } else {
            c
        }
    }
}

/// Every trainable leaf of the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: EncoderWeights,
    pub encoder_norm: Option<NormParams>,
    pub blocks: Vec<BlockParams>,
    pub decoder: DecoderWeights,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.num_neurons;
        let encoder = EncoderWeights {
            w: Matrix::gaussian(cfg.input_dim, n, cfg.encoder_init_std, &mut rng),
            bias: vec![0.0; n],
        };
        let encoder_norm = cfg.encoder_norm.then(|| NormParams::new(n));
        let mix_std = 1.0 / (n as f64).sqrt();
        let blocks = (0..cfg.num_blocks)
            .map(|_| BlockParams {
                ssm: (0..cfg.ssm_per_layer())
                    .map(|_| ContinuousSsm::init_hippo(cfg.state_dim, &mut rng))
                    .collect(),
                mixer: MixerWeights {
                    w: Matrix::gaussian(n, n, mix_std, &mut rng),
                },
                norm: NormParams::new(n),
            })
            .collect();
        let decoder = DecoderWeights {
            w: Matrix::gaussian(n, cfg.num_classes, mix_std, &mut rng),
            bias: vec![0.0; cfg.num_classes],
        };
        Self {
            encoder,
            encoder_norm,
            blocks,
            decoder,
        }
    }

    /// Same structure, every value zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, leaf) in z.leaves_mut() {
            leaf.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    /// Leaves in a fixed order with dotted names.
    pub fn leaves(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("encoder.w".into(), &self.encoder.w.data[..]),
            ("encoder.bias".into(), &self.encoder.bias[..]),
        ];
        if let Some(norm) = &self.encoder_norm {
            out.push(("encoder_norm.gamma".into(), &norm.gamma[..]));
            out.push(("encoder_norm.beta".into(), &norm.beta[..]));
        }
        for (k, block) in self.blocks.iter().enumerate() {
            for (j, s) in block.ssm.iter().enumerate() {
                out.push((format!("blocks.{k}.ssm.{j}.a"), s.a.as_slice()));
                out.push((format!("blocks.{k}.ssm.{j}.b"), s.b.as_slice()));
                out.push((format!("blocks.{k}.ssm.{j}.c"), s.c.as_slice()));
                out.push((format!("blocks.{k}.ssm.{j}.log_delta"), std::slice::from_ref(&s.log_delta)));
            }
            out.push((format!("blocks.{k}.mixer.w"), &block.mixer.w.data[..]));
            out.push((format!("blocks.{k}.norm.gamma"), &block.norm.gamma[..]));
            out.push((format!("blocks.{k}.norm.beta"), &block.norm.beta[..]));
        }
        out.push(("decoder.w".into(), &self.decoder.w.data[..]));
        out.push(("decoder.bias".into(), &self.decoder.bias[..]));
        out
    }

    /// Mutable leaves, same order as [`leaves`](Self::leaves).
    pub fn leaves_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let ModelParams {
            encoder,
            encoder_norm,
            blocks,
            decoder,
        } = self;
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("encoder.w".into(), &mut encoder.w.data[..]),
            ("encoder.bias".into(), &mut encoder.bias[..]),
        ];
        if let Some(norm) = encoder_norm {
            let NormParams { gamma, beta } = norm;
            out.push(("encoder_norm.gamma".into(), &mut gamma[..]));
            out.push(("encoder_norm.beta".into(), &mut beta[..]));
        }
        for (k, block) in blocks.iter_mut().enumerate() {
            let BlockParams { ssm, mixer, norm } = block;
            for (j, s) in ssm.iter_mut().enumerate() {
                let ContinuousSsm { a, b, c, log_delta } = s;
                out.push((format!("blocks.{k}.ssm.{j}.a"), a.as_mut_slice()));
                out.push((format!("blocks.{k}.ssm.{j}.b"), b.as_mut_slice()));
                out.push((format!("blocks.{k}.ssm.{j}.c"), c.as_mut_slice()));
                out.push((format!("blocks.{k}.ssm.{j}.log_delta"), std::slice::from_mut(log_delta)));
            }
            out.push((format!("blocks.{k}.mixer.w"), &mut mixer.w.data[..]));
            let NormParams { gamma, beta } = norm;
            out.push((format!("blocks.{k}.norm.gamma"), &mut gamma[..]));
            out.push((format!("blocks.{k}.norm.beta"), &mut beta[..]));
        }
        out.push(("decoder.w".into(), &mut decoder.w.data[..]));
        out.push(("decoder.bias".into(), &mut decoder.bias[..]));
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.leaves().iter().map(|(_, l)| l.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.leaves().iter().all(|(_, l)| l.iter().all(|v| v.is_finite()))
    }

    /// Dot product over every leaf (for directional-derivative checks).
    pub fn dot(&self, other: &ModelParams) -> f64 {
        self.leaves()
            .iter()
            .zip(other.leaves())
            .map(|((_, a), (_, b))| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
            .sum()
    }
}

/// Running normalization statistics, one entry per norm site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBuffers {
    pub encoder_stats: NormStats,
    pub block_stats: Vec<NormStats>,
}

impl ModelBuffers {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            encoder_stats: NormStats::new(cfg.num_neurons),
            block_stats: (0..cfg.num_blocks).map(|_| NormStats::new(cfg.num_neurons)).collect(),
        }
    }

    pub fn leaves(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("encoder_stats.mean".into(), &self.encoder_stats.mean[..]),
            ("encoder_stats.var".into(), &self.encoder_stats.var[..]),
        ];
        for (k, s) in self.block_stats.iter().enumerate() {
            out.push((format!("block_stats.{k}.mean"), &s.mean[..]));
            out.push((format!("block_stats.{k}.var"), &s.var[..]));
        }
        out
    }

    pub fn stats_mut(&mut self, site: NormSite) -> &mut NormStats {
        match site {
            NormSite::Encoder => &mut self.encoder_stats,
            NormSite::Block(k) => &mut self.block_stats[k],
        }
    }

    pub fn leaves_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let ModelBuffers {
            encoder_stats,
            block_stats,
        } = self;
        let NormStats { mean, var } = encoder_stats;
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("encoder_stats.mean".into(), &mut mean[..]),
            ("encoder_stats.var".into(), &mut var[..]),
        ];
        for (k, s) in block_stats.iter_mut().enumerate() {
            let NormStats { mean, var } = s;
            out.push((format!("block_stats.{k}.mean"), &mut mean[..]));
            out.push((format!("block_stats.{k}.var"), &mut var[..]));
        }
        out
    }
}

/// Configuration, trainable parameters and buffers together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub buffers: ModelBuffers,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let params = ModelParams::init(&config, seed);
        let buffers = ModelBuffers::new(&config);
        Self {
            config,
            params,
            buffers,
        }
    }
}
