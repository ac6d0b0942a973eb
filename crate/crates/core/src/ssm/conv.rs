//! Causal (non-circular) convolution of length-`L` sequences.
//!
//! `y[t] = Σ_{j=0..=t} k[j]·x[t-j]`. Sequences shorter than
//! [`DIRECT_CONV_MAX_LEN`] use direct summation; longer ones go through a
//! real FFT zero-padded to a power of two `≥ 2L`, which rules out wrap-around.

use std::sync::Arc;

use realfft::num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

/// Direct summation below this length.
pub const DIRECT_CONV_MAX_LEN: usize = 64;

#[derive(Clone)]
pub struct ConvPlan {
    len: usize,
    fft_len: usize,
    r2c: Option<Arc<dyn RealToComplex<f64>>>,
    c2r: Option<Arc<dyn ComplexToReal<f64>>>,
}

impl std::fmt::Debug for ConvPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConvPlan")
            .field("len", &self.len)
            .field("fft_len", &self.fft_len)
            .finish()
    }
}

impl ConvPlan {
    pub fn new(len: usize) -> Self {
        if len < DIRECT_CONV_MAX_LEN {
            return Self::direct(len);
        }
        Self::fft(len)
    }

    /// Always take the direct path.
    pub fn direct(len: usize) -> Self {
        Self {
            len,
            fft_len: 0,
            r2c: None,
            c2r: None,
        }
    }

    /// Always take the FFT path, whatever the length.
    pub fn fft(len: usize) -> Self {
        let fft_len = (2 * len.max(1)).next_power_of_two();
        let mut planner = RealFftPlanner::<f64>::new();
        Self {
            len,
            fft_len,
            r2c: Some(planner.plan_fft_forward(fft_len)),
            c2r: Some(planner.plan_fft_inverse(fft_len)),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn uses_fft(&self) -> bool {
        self.r2c.is_some()
    }

    pub fn spectrum_len(&self) -> usize {
        self.fft_len / 2 + 1
    }

    /// Zero-padded real spectrum of `x` (FFT path only).
    pub fn spectrum(&self, x: &[f64]) -> Vec<Complex64> {
        let r2c = self.r2c.as_ref().expect("spectrum requires the FFT path");
        debug_assert!(x.len() <= self.len);
        let mut buf = vec![0.0; self.fft_len];
        buf[..x.len()].copy_from_slice(x);
        let mut out = vec![Complex64::new(0.0, 0.0); self.spectrum_len()];
        r2c.process(&mut buf, &mut out).expect("fft sizes agree");
        out
    }

    /// Inverse transform, keeping the first `len` samples. Consumes `spec` as scratch.
    pub fn inverse_into(&self, spec: &mut [Complex64], out: &mut [f64]) {
        let c2r = self.c2r.as_ref().expect("inverse requires the FFT path");
        spec[0].im = 0.0;
        let last = spec.len() - 1;
        spec[last].im = 0.0;
        let mut buf = vec![0.0; self.fft_len];
        c2r.process(spec, &mut buf).expect("fft sizes agree");
        let scale = 1.0 / self.fft_len as f64;
        for (o, v) in out.iter_mut().zip(&buf[..self.len]) {
            *o = v * scale;
        }
    }

    /// `out = k ∗ x`, truncated to `len`.
    pub fn causal_conv(&self, k: &[f64], x: &[f64], out: &mut [f64]) {
        if !self.uses_fft() {
            causal_conv_direct(k, x, out);
            return;
        }
        let ks = self.spectrum(k);
        self.causal_conv_with_spectrum(&ks, x, out);
    }

    /// Same as [`causal_conv`](Self::causal_conv) with a precomputed kernel spectrum.
    pub fn causal_conv_with_spectrum(&self, k_spec: &[Complex64], x: &[f64], out: &mut [f64]) {
        let mut xs = self.spectrum(x);
        for (a, b) in xs.iter_mut().zip(k_spec) {
            *a *= *b;
        }
        self.inverse_into(&mut xs, out);
    }

    /// `out[t] = Σ_i k[i]·g[t+i]` (adjoint of `causal_conv` in `x`), via spectra.
    pub fn correlate_with_spectrum(&self, k_spec: &[Complex64], g_spec: &[Complex64], out: &mut [f64]) {
        let mut prod: Vec<Complex64> = k_spec.iter().zip(g_spec).map(|(k, g)| k.conj() * g).collect();
        self.inverse_into(&mut prod, out);
    }
}

/// Direct `O(L²)` causal convolution.
pub fn causal_conv_direct(k: &[f64], x: &[f64], out: &mut [f64]) {
    let len = out.len();
    for o in out.iter_mut() {
        *o = 0.0;
    }
    // Scatter form skips silent inputs, which is the common case for spikes.
    for (j, &xj) in x.iter().enumerate().take(len) {
        if xj == 0.0 {
            continue;
        }
        for (o, &kv) in out[j..].iter_mut().zip(k) {
            *o += kv * xj;
        }
    }
}

/// Direct correlation `out[t] = Σ_i k[i]·g[t+i]`.
pub fn correlate_direct(k: &[f64], g: &[f64], out: &mut [f64]) {
    let len = out.len();
    for (t, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (i, &kv) in k.iter().enumerate().take(len - t) {
            acc += kv * g[t + i];
        }
        *o = acc;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn reference(k: &[f64], x: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|i| (0..=i).map(|j| k[j] * x[i - j]).sum())
            .collect()
    }

    #[test]
    fn impulse_returns_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for len in [5, 64, 100] {
            let k: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut x = vec![0.0; len];
            x[0] = 1.0;
            let mut y = vec![0.0; len];
            ConvPlan::new(len).causal_conv(&k, &x, &mut y);
            for (a, b) in y.iter().zip(&k) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ones_give_running_count() {
        let len = 80;
        let ones = vec![1.0; len];
        let mut y = vec![0.0; len];
        ConvPlan::new(len).causal_conv(&ones, &ones, &mut y);
        for (i, v) in y.iter().enumerate() {
            assert!((v - (i + 1) as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn fft_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let len = 128;
        let k: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..len).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect();
        let expect = reference(&k, &x);
        let mut y = vec![0.0; len];
        ConvPlan::fft(len).causal_conv(&k, &x, &mut y);
        let err = y.iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8, "max err {err}");
    }

    #[test]
    fn correlation_is_adjoint_of_convolution() {
        // <k*x, g> == <x, corr(k, g)>
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for len in [17, 200] {
            let k: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let g: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let plan = ConvPlan::new(len);
            let mut y = vec![0.0; len];
            plan.causal_conv(&k, &x, &mut y);
            let mut cx = vec![0.0; len];
            if plan.uses_fft() {
                plan.correlate_with_spectrum(&plan.spectrum(&k), &plan.spectrum(&g), &mut cx);
            } else {
                correlate_direct(&k, &g, &mut cx);
            }
            let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&cx).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
        }
    }
}
