//! Batch and layer normalization over `(batch, time, channel)` tensors.
//!
//! Batch norm pools statistics over every `(batch, time)` row per channel;
//! layer norm pools over channels per row. Both carry a per-channel affine
//! `γ, β`.

use serde::{Deserialize, Serialize};

use super::LayerError;
use crate::tensor::Tensor3;

pub const NORM_EPS: f64 = 1e-5;
pub const RUNNING_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    Batch,
    Layer,
}

/// Which statistics a batch-norm layer normalizes with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormUse {
    Batch,
    Running,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl NormParams {
    pub fn new(chan: usize) -> Self {
        Self {
            gamma: vec![1.0; chan],
            beta: vec![0.0; chan],
        }
    }
}

/// Which normalization layer a statistic belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormSite {
    Encoder,
    Block(usize),
}

/// Running batch-norm statistics (buffers, not trained).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl NormStats {
    pub fn new(chan: usize) -> Self {
        Self {
            mean: vec![0.0; chan],
            var: vec![1.0; chan],
        }
    }

    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        for (m, b) in self.mean.iter_mut().zip(batch_mean) {
            *m = (1.0 - RUNNING_MOMENTUM) * *m + RUNNING_MOMENTUM * b;
        }
        for (v, b) in self.var.iter_mut().zip(batch_var) {
            *v = (1.0 - RUNNING_MOMENTUM) * *v + RUNNING_MOMENTUM * b;
        }
    }
}

/// Values saved by the forward pass.
#[derive(Clone, Debug)]
pub struct NormCache {
    pub kind: NormKind,
    pub usage: NormUse,
    /// Normalized input before the affine map.
    pub xhat: Tensor3,
    /// `1/sqrt(var + eps)`, per channel (batch) or per row (layer).
    pub inv_std: Vec<f64>,
    /// Batch statistics, for the running-average update (batch norm only).
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

pub fn norm_forward(
    x: &Tensor3,
    kind: NormKind,
    params: &NormParams,
    stats: &NormStats,
    usage: NormUse,
) -> Result<(Tensor3, NormCache), LayerError> {
    let c = x.chan;
    if params.gamma.len() != c || params.beta.len() != c {
        return Err(LayerError::shape("norm", c, params.gamma.len()));
    }
    let rows = x.rows();
    let mut xhat = Tensor3::zeros(x.batch, x.time, c);
    let mut batch_mean = Vec::new();
    let mut batch_var = Vec::new();
    let inv_std: Vec<f64>;
    match kind {
        NormKind::Batch => {
            let (mean, var) = match usage {
                NormUse::Batch => {
                    let mut mean = vec![0.0; c];
                    for row in x.data.chunks(c) {
                        for (m, v) in mean.iter_mut().zip(row) {
                            *m += v;
                        }
                    }
                    mean.iter_mut().for_each(|m| *m /= rows as f64);
                    let mut var = vec![0.0; c];
                    for row in x.data.chunks(c) {
                        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                            *s += (v - m) * (v - m);
                        }
                    }
                    var.iter_mut().for_each(|s| *s /= rows as f64);
                    batch_mean = mean.clone();
                    batch_var = var.clone();
                    (mean, var)
                }
                NormUse::Running => (stats.mean.clone(), stats.var.clone()),
            };
            inv_std = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
            for (row_in, row_out) in x.data.chunks(c).zip(xhat.data.chunks_mut(c)) {
                for j in 0..c {
                    row_out[j] = (row_in[j] - mean[j]) * inv_std[j];
                }
            }
        }
        NormKind::Layer => {
            let mut per_row = Vec::with_capacity(rows);
            for (row_in, row_out) in x.data.chunks(c).zip(xhat.data.chunks_mut(c)) {
                let mean = row_in.iter().sum::<f64>() / c as f64;
                let var = row_in.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + NORM_EPS).sqrt();
                for (o, v) in row_out.iter_mut().zip(row_in) {
                    *o = (v - mean) * is;
                }
                per_row.push(is);
            }
            inv_std = per_row;
        }
    }
    let mut out = xhat.clone();
    for row in out.data.chunks_mut(c) {
        for j in 0..c {
            row[j] = params.gamma[j] * row[j] + params.beta[j];
        }
    }
    Ok((
        out,
        NormCache {
            kind,
            usage,
            xhat,
            inv_std,
            batch_mean,
            batch_var,
        },
    ))
}

/// Returns `(grad input, grad γ, grad β)`.
pub fn norm_backward(cache: &NormCache, params: &NormParams, g_out: &Tensor3) -> (Tensor3, Vec<f64>, Vec<f64>) {
    let c = g_out.chan;
    let rows = g_out.rows();
    let mut g_gamma = vec![0.0; c];
    let mut g_beta = vec![0.0; c];
    for (g_row, x_row) in g_out.data.chunks(c).zip(cache.xhat.data.chunks(c)) {
        for j in 0..c {
            g_gamma[j] += g_row[j] * x_row[j];
            g_beta[j] += g_row[j];
        }
    }
    let mut g_in = Tensor3::zeros(g_out.batch, g_out.time, c);
    match (cache.kind, cache.usage) {
        (NormKind::Batch, NormUse::Running) => {
            for (g_row, o_row) in g_out.data.chunks(c).zip(g_in.data.chunks_mut(c)) {
                for j in 0..c {
                    o_row[j] = g_row[j] * params.gamma[j] * cache.inv_std[j];
                }
            }
        }
        (NormKind::Batch, NormUse::Batch) => {
            // Σ over rows of g·γ and g·γ·x̂ per channel.
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for (g_row, x_row) in g_out.data.chunks(c).zip(cache.xhat.data.chunks(c)) {
                for j in 0..c {
                    let gx = g_row[j] * params.gamma[j];
                    sum_g[j] += gx;
                    sum_gx[j] += gx * x_row[j];
                }
            }
            let r = rows as f64;
            for ((g_row, x_row), o_row) in g_out
                .data
                .chunks(c)
                .zip(cache.xhat.data.chunks(c))
                .zip(g_in.data.chunks_mut(c))
            {
                for j in 0..c {
                    let gx = g_row[j] * params.gamma[j];
                    o_row[j] = cache.inv_std[j] * (gx - sum_g[j] / r - x_row[j] * sum_gx[j] / r);
                }
            }
        }
        (NormKind::Layer, _) => {
            let cf = c as f64;
            for (((g_row, x_row), o_row), is) in g_out
                .data
                .chunks(c)
                .zip(cache.xhat.data.chunks(c))
                .zip(g_in.data.chunks_mut(c))
                .zip(&cache.inv_std)
            {
                let mut sum_g = 0.0;
                let mut sum_gx = 0.0;
                for j in 0..c {
                    let gx = g_row[j] * params.gamma[j];
                    sum_g += gx;
                    sum_gx += gx * x_row[j];
                }
                for j in 0..c {
                    let gx = g_row[j] * params.gamma[j];
                    o_row[j] = is * (gx - sum_g / cf - x_row[j] * sum_gx / cf);
                }
            }
        }
    }
    (g_in, g_gamma, g_beta)
}
