//! Linear input encoder producing per-neuron spike probabilities.

use serde::{Deserialize, Serialize};

use super::norm::{norm_forward, NormKind, NormParams, NormStats, NormUse};
use super::LayerError;
use crate::linalg::{gemm, Layout, Matrix};
use crate::ssm::Squash;
use crate::tensor::Tensor3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderWeights {
    /// `input_dim x N`.
    pub w: Matrix,
    pub bias: Vec<f64>,
}

impl EncoderWeights {
    pub fn num_neurons(&self) -> usize {
        self.w.cols
    }
}

/// Optional normalization applied between the affine map and the squash.
#[derive(Clone, Copy, Debug)]
pub struct NormSpec<'a> {
    pub kind: NormKind,
    pub params: &'a NormParams,
    pub stats: &'a NormStats,
    pub usage: NormUse,
}

/// `u = x·W_e + b`.
pub fn encode_affine(x: &Tensor3, w: &EncoderWeights) -> Result<Tensor3, LayerError> {
    if x.chan != w.w.rows {
        return Err(LayerError::shape("encoder", w.w.rows, x.chan));
    }
    let n = w.w.cols;
    let mut u = Tensor3::zeros(x.batch, x.time, n);
    for row in u.data.chunks_mut(n) {
        row.copy_from_slice(&w.bias);
    }
    gemm(x.rows(), x.chan, n, 1.0, &x.data, Layout::RowMajor, &w.w.data, Layout::RowMajor, 1.0, &mut u.data);
    Ok(u)
}

/// Affine map, optional normalization, then squash to probabilities.
pub fn encode_input(
    x: &Tensor3,
    w: &EncoderWeights,
    norm: Option<NormSpec<'_>>,
    squash: Squash,
) -> Result<Tensor3, LayerError> {
    let mut u = encode_affine(x, w)?;
    if let Some(spec) = norm {
        u = norm_forward(&u, spec.kind, spec.params, spec.stats, spec.usage)?.0;
    }
    Ok(u.map(|v| squash.apply(v)))
}

/// Returns `(grad W_e, grad bias)`; the raw input is not differentiated.
pub fn encoder_backward(x: &Tensor3, g_u: &Tensor3) -> (Matrix, Vec<f64>) {
    let n = g_u.chan;
    let mut gw = Matrix::zeros(x.chan, n);
    gemm(x.chan, x.rows(), n, 1.0, &x.data, Layout::Transposed, &g_u.data, Layout::RowMajor, 0.0, &mut gw.data);
    let mut gb = vec![0.0; n];
    for row in g_u.data.chunks(n) {
        for (b, g) in gb.iter_mut().zip(row) {
            *b += g;
        }
    }
    (gw, gb)
}
