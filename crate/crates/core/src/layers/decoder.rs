//! Sequence decoder mapping final-layer probabilities to class logits.

use serde::{Deserialize, Serialize};

use super::LayerError;
use crate::linalg::{gemm, Layout, Matrix};
use crate::tensor::Tensor3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Mean over time, one prediction per sequence. Output shape `(B, 1, K)`.
    #[default]
    MeanPool,
    /// One prediction per time step. Output shape `(B, L, K)`.
    PerStep,
    /// Features of the final step only. Output shape `(B, 1, K)`.
    Last,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderWeights {
    /// `N x num_classes`.
    pub w: Matrix,
    pub bias: Vec<f64>,
}

impl DecoderWeights {
    pub fn num_classes(&self) -> usize {
        self.w.cols
    }
}

pub fn mean_pool(p: &Tensor3) -> Tensor3 {
    let mut pooled = Tensor3::zeros(p.batch, 1, p.chan);
    let inv = 1.0 / p.time as f64;
    for b in 0..p.batch {
        for t in 0..p.time {
            for c in 0..p.chan {
                pooled.data[b * p.chan + c] += p.get(b, t, c) * inv;
            }
        }
    }
    pooled
}

pub fn last_step(p: &Tensor3) -> Tensor3 {
    let mut out = Tensor3::zeros(p.batch, 1, p.chan);
    for b in 0..p.batch {
        let base = p.idx(b, p.time - 1, 0);
        out.data[b * p.chan..(b + 1) * p.chan].copy_from_slice(&p.data[base..base + p.chan]);
    }
    out
}

fn features(p: &Tensor3, readout: Readout) -> Tensor3 {
    match readout {
        Readout::MeanPool => mean_pool(p),
        Readout::PerStep => p.clone(),
        Readout::Last => last_step(p),
    }
}

fn affine(x: &Tensor3, w: &DecoderWeights) -> Tensor3 {
    let k = w.num_classes();
    let mut out = Tensor3::zeros(x.batch, x.time, k);
    for row in out.data.chunks_mut(k) {
        row.copy_from_slice(&w.bias);
    }
    gemm(x.rows(), x.chan, k, 1.0, &x.data, Layout::RowMajor, &w.w.data, Layout::RowMajor, 1.0, &mut out.data);
    out
}

/// Logits for every sequence (mean-pool) or every step (per-step readout).
pub fn decode_sequence(p_final: &Tensor3, w: &DecoderWeights, readout: Readout) -> Result<Tensor3, LayerError> {
    if p_final.time == 0 {
        return Err(LayerError::EmptyTime);
    }
    if p_final.chan != w.w.rows || w.bias.len() != w.w.cols {
        return Err(LayerError::shape("decoder", w.w.rows, p_final.chan));
    }
    Ok(affine(&features(p_final, readout), w))
}

/// Returns `(grad input, grad W, grad bias)`.
pub fn decoder_backward(
    p_final: &Tensor3,
    w: &DecoderWeights,
    readout: Readout,
    g_logits: &Tensor3,
) -> (Tensor3, Matrix, Vec<f64>) {
    let n = p_final.chan;
    let k = w.num_classes();
    let features = features(p_final, readout);
    let mut gw = Matrix::zeros(n, k);
    gemm(n, features.rows(), k, 1.0, &features.data, Layout::Transposed, &g_logits.data, Layout::RowMajor, 0.0, &mut gw.data);
    let mut gb = vec![0.0; k];
    for row in g_logits.data.chunks(k) {
        for (b, g) in gb.iter_mut().zip(row) {
            *b += g;
        }
    }
    let mut g_feat = Tensor3::zeros(features.batch, features.time, n);
    gemm(g_logits.rows(), k, n, 1.0, &g_logits.data, Layout::RowMajor, &w.w.data, Layout::Transposed, 0.0, &mut g_feat.data);
    let g_in = match readout {
        Readout::PerStep => g_feat,
        Readout::MeanPool => {
            let mut g = Tensor3::zeros(p_final.batch, p_final.time, n);
            let inv = 1.0 / p_final.time as f64;
            for b in 0..p_final.batch {
                for t in 0..p_final.time {
                    for c in 0..n {
                        g.set(b, t, c, g_feat.data[b * n + c] * inv);
                    }
                }
            }
            g
        }
        Readout::Last => {
            let mut g = Tensor3::zeros(p_final.batch, p_final.time, n);
            for b in 0..p_final.batch {
                let base = g.idx(b, p_final.time - 1, 0);
                g.data[base..base + n].copy_from_slice(&g_feat.data[b * n..(b + 1) * n]);
            }
            g
        }
    };
    (g_in, gw, gb)
}
