//! Neuron mixer: `f_mix[t] = gelu(I_s[t] · W_fc)`.

use serde::{Deserialize, Serialize};

use super::LayerError;
use crate::linalg::{gemm, Layout, Matrix};
use crate::tensor::Tensor3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixerWeights {
    /// `N x N`, row `i` is the fan-out of input neuron `i`.
    pub w: Matrix,
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU `x·Φ(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

fn check(spikes: &Tensor3, w: &MixerWeights) -> Result<(), LayerError> {
    if w.w.rows != spikes.chan || w.w.cols != spikes.chan {
        return Err(LayerError::shape(
            "mixer",
            format!("{0}x{0} weights", spikes.chan),
            format!("{}x{}", w.w.rows, w.w.cols),
        ));
    }
    Ok(())
}

/// Returns `(pre-activation, output)`.
pub fn mixer_forward(spikes: &Tensor3, w: &MixerWeights) -> Result<(Tensor3, Tensor3), LayerError> {
    check(spikes, w)?;
    let n = spikes.chan;
    let mut pre = Tensor3::zeros(spikes.batch, spikes.time, n);
    gemm(
        spikes.rows(),
        n,
        n,
        1.0,
        &spikes.data,
        Layout::RowMajor,
        &w.w.data,
        Layout::RowMajor,
        0.0,
        &mut pre.data,
    );
    let out = pre.map(gelu);
    Ok((pre, out))
}

/// Pre-activation computed by summing the weight rows of active neurons.
///
/// Only valid for binary inputs; it needs no multiplications.
pub fn mixer_preactivation_gather(spikes: &Tensor3, w: &MixerWeights) -> Result<Tensor3, LayerError> {
    check(spikes, w)?;
    let n = spikes.chan;
    let mut pre = Tensor3::zeros(spikes.batch, spikes.time, n);
    for (row_in, row_out) in spikes.data.chunks(n).zip(pre.data.chunks_mut(n)) {
        for (i, &s) in row_in.iter().enumerate() {
            if s != 0.0 {
                for (o, wv) in row_out.iter_mut().zip(w.w.row(i)) {
                    *o += wv;
                }
            }
        }
    }
    Ok(pre)
}

/// Backward: returns `(grad input, grad W)` given the upstream gradient on the output.
pub fn mixer_backward(input: &Tensor3, pre: &Tensor3, w: &MixerWeights, g_out: &Tensor3) -> (Tensor3, Matrix) {
    let n = input.chan;
    let rows = input.rows();
    let mut g_pre = g_out.clone();
    for (g, p) in g_pre.data.iter_mut().zip(&pre.data) {
        *g *= gelu_grad(*p);
    }
    let mut gw = Matrix::zeros(n, n);
    gemm(n, rows, n, 1.0, &input.data, Layout::Transposed, &g_pre.data, Layout::RowMajor, 0.0, &mut gw.data);
    let mut g_in = Tensor3::zeros(input.batch, input.time, n);
    gemm(rows, n, n, 1.0, &g_pre.data, Layout::RowMajor, &w.w.data, Layout::Transposed, 0.0, &mut g_in.data);
    (g_in, gw)
}
