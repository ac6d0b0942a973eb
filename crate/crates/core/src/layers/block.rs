//! One S6 encoder block:
//! conv per neuron → σ → sampler → mixer → residual add → norm → σ → sampler.
//!
//! The last block of a stack skips the final sampler and hands probabilities
//! to the decoder.

use rayon::prelude::*;
use realfft::num_complex::Complex64;

use super::mixer::mixer_forward;
use super::norm::{norm_forward, NormCache, NormStats};
use super::params::BlockParams;
use super::sampler::{spike_sample, SampleKey};
use super::{sampler_site_neurons, sampler_site_output, LayerError, Mode, S6LayerConfig};
use crate::ssm::{build_kernel, causal_conv_direct, discretize, ContinuousSsm, ConvPlan, DiscreteSsm, Kernel, Squash};
use crate::tensor::Tensor3;

/// Forward values of the per-neuron convolution needed by its adjoint.
#[derive(Clone, Debug)]
pub struct SsmLayerCache {
    pub discrete: Vec<DiscreteSsm>,
    pub kernels: Vec<Kernel>,
    /// Kernel spectra on the FFT path, empty on the direct path.
    pub kernel_spectra: Vec<Vec<Complex64>>,
    pub plan: ConvPlan,
}

impl SsmLayerCache {
    /// Which SSM drives channel `c`.
    #[inline]
    pub fn ssm_index(&self, c: usize) -> usize {
        if self.kernels.len() == 1 {
            0
        } else {
            c
        }
    }
}

/// Runs every channel of `x` through its SSM kernel. Returns pre-σ outputs.
pub fn ssm_conv_forward(
    x: &Tensor3,
    ssm: &[ContinuousSsm],
    plan: &ConvPlan,
) -> Result<(Tensor3, SsmLayerCache), LayerError> {
    let (batch, len, chan) = x.shape();
    if ssm.len() != 1 && ssm.len() != chan {
        return Err(LayerError::shape("ssm_conv", chan, ssm.len()));
    }
    if plan.len() != len {
        return Err(LayerError::shape("ssm_conv plan length", len, plan.len()));
    }
    if len == 0 {
        return Err(LayerError::EmptyTime);
    }
    let discrete = ssm.iter().map(discretize).collect::<Result<Vec<_>, _>>()?;
    let kernels = discrete
        .iter()
        .map(|d| build_kernel(d, len))
        .collect::<Result<Vec<_>, _>>()?;
    let kernel_spectra: Vec<Vec<Complex64>> = if plan.uses_fft() {
        kernels.iter().map(|k| plan.spectrum(&k.weights)).collect()
    } else {
        Vec::new()
    };
    let cache = SsmLayerCache {
        discrete,
        kernels,
        kernel_spectra,
        plan: plan.clone(),
    };
    let series: Vec<Vec<f64>> = (0..batch * chan)
        .into_par_iter()
        .map(|bc| {
            let (b, c) = (bc / chan, bc % chan);
            let mut xs = vec![0.0; len];
            x.gather_series(b, c, &mut xs);
            let mut ys = vec![0.0; len];
            let j = cache.ssm_index(c);
            if xs.iter().any(|v| *v != 0.0) {
                if plan.uses_fft() {
                    plan.causal_conv_with_spectrum(&cache.kernel_spectra[j], &xs, &mut ys);
                } else {
                    causal_conv_direct(&cache.kernels[j].weights, &xs, &mut ys);
                }
            }
            ys
        })
        .collect();
    let mut y = Tensor3::zeros(batch, len, chan);
    for (bc, ys) in series.iter().enumerate() {
        y.scatter_series(bc / chan, bc % chan, ys);
    }
    Ok((y, cache))
}

/// Bernoulli sampling in the sampling modes, identity in the expected modes.
pub fn sample_or_expect(p: &Tensor3, mode: Mode, key: &SampleKey<'_>) -> Result<Tensor3, LayerError> {
    if mode.samples() {
        spike_sample(p, key)
    } else {
        Ok(p.clone())
    }
}

/// Fraction of active units per spiking site (mean probability in the expected modes).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockActivity {
    pub neuron_rate: f64,
    pub output_rate: Option<f64>,
}

/// Every intermediate of one block, in pipeline order.
#[derive(Clone, Debug)]
pub struct BlockOutput {
    pub conv_out: Tensor3,
    pub conv_cache: SsmLayerCache,
    pub neuron_probs: Tensor3,
    pub neuron_spikes: Tensor3,
    pub mixer_pre: Tensor3,
    pub mixer_out: Tensor3,
    /// Mixer output plus the block input (when residual), before the norm.
    pub summed: Tensor3,
    pub norm_out: Tensor3,
    pub norm_cache: NormCache,
    pub probs: Tensor3,
    /// `None` for the last block of the stack.
    pub spikes: Option<Tensor3>,
    pub activity: BlockActivity,
}

/// Call-site data shared by a block forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BlockContext<'a> {
    pub index: usize,
    pub is_last: bool,
    pub mode: Mode,
    pub seed: u64,
    pub example_ids: &'a [u64],
    pub squash: Squash,
    pub plan: &'a ConvPlan,
}

pub fn s6_block_forward(
    input: &Tensor3,
    params: &BlockParams,
    stats: &NormStats,
    cfg: &S6LayerConfig,
    ctx: &BlockContext<'_>,
) -> Result<BlockOutput, LayerError> {
    if input.chan != cfg.num_neurons {
        return Err(LayerError::shape("s6_block input", cfg.num_neurons, input.chan));
    }
    let (conv_out, conv_cache) = ssm_conv_forward(input, &params.ssm, ctx.plan)?;
    let neuron_probs = conv_out.map(|v| ctx.squash.apply(v));
    let neuron_spikes = sample_or_expect(
        &neuron_probs,
        ctx.mode,
        &SampleKey {
            seed: ctx.seed,
            site: sampler_site_neurons(ctx.index),
            example_ids: ctx.example_ids,
        },
    )?;
    let (mixer_pre, mixer_out) = mixer_forward(&neuron_spikes, &params.mixer)?;
    let mut summed = mixer_out.clone();
    if cfg.residual {
        summed.add_assign(input);
    }
    let (norm_out, norm_cache) = norm_forward(&summed, cfg.norm, &params.norm, stats, ctx.mode.norm_use())?;
    let probs = norm_out.map(|v| ctx.squash.apply(v));
    let spikes = if ctx.is_last {
        None
    } else {
        Some(sample_or_expect(
            &probs,
            ctx.mode,
            &SampleKey {
                seed: ctx.seed,
                site: sampler_site_output(ctx.index),
                example_ids: ctx.example_ids,
            },
        )?)
    };
    let activity = BlockActivity {
        neuron_rate: neuron_spikes.mean(),
        output_rate: spikes.as_ref().map(Tensor3::mean),
    };
    Ok(BlockOutput {
        conv_out,
        conv_cache,
        neuron_probs,
        neuron_spikes,
        mixer_pre,
        mixer_out,
        summed,
        norm_out,
        norm_cache,
        probs,
        spikes,
        activity,
    })
}
