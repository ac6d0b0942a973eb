//! Reverse-mode rules for the sampler, the kernel convolution, and the
//! bilinear discretization.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use realfft::num_complex::Complex64;

use crate::layers::SsmLayerCache;
use crate::linalg::{gemm, Layout};
use crate::ssm::{correlate_direct, ContinuousSsm, DiscreteSsm, Kernel, SsmError};
use crate::tensor::Tensor3;

/// Gradient of the sampler: identity on `p` where `p ∈ (0, 1)`, zero on clamped entries.
pub fn surrogate_spike_grad(upstream: &Tensor3, p: &Tensor3) -> Tensor3 {
    assert!(upstream.same_shape(p), "surrogate_spike_grad: shape mismatch");
    let mut g = upstream.clone();
    for (gv, &pv) in g.data.iter_mut().zip(&p.data) {
        if !(pv > 0.0 && pv < 1.0) {
            *gv = 0.0;
        }
    }
    g
}

/// Gradients of `K_i = C̄ Ā^i B̄` with respect to `(Ā, B̄, C̄)` given `∂L/∂K`.
///
/// Runs the adjoint recurrence `w_i = gK_i·C̄ + Āᵀ w_{i+1}` once over the
/// cached basis `v_i = Ā^i B̄`.
pub fn kernel_backward(
    d: &DiscreteSsm,
    kernel: &Kernel,
    g_k: &[f64],
) -> Result<(DMatrix<f64>, DVector<f64>, DVector<f64>), SsmError> {
    let n = d.state_dim();
    let len = kernel.len();
    assert_eq!(g_k.len(), len, "kernel gradient length");
    let g_c = &kernel.basis * DVector::from_column_slice(g_k);
    // Adjoint states, row-major L x n (row i = w_i).
    let mut w = vec![0.0; len * n];
    let mut next = DVector::<f64>::zeros(n);
    let mut cur = DVector::<f64>::zeros(n);
    for i in (0..len).rev() {
        cur.copy_from(&d.c_bar);
        cur *= g_k[i];
        if i + 1 < len {
            cur.gemv_tr(1.0, &d.a_bar, &next, 1.0);
        }
        if cur.iter().any(|v| !v.is_finite()) {
            return Err(SsmError::NonFinite {
                step: i,
                spectral_radius: f64::NAN,
            });
        }
        w[i * n..(i + 1) * n].copy_from_slice(cur.as_slice());
        std::mem::swap(&mut cur, &mut next);
    }
    let g_b = DVector::from_column_slice(&w[..n]);
    let mut g_a_rows = vec![0.0; n * n];
    if len > 1 {
        // gĀ = Σ_{i<L-1} w_{i+1} v_iᵀ. The basis is column-major n x L, i.e. row-major L x n.
        gemm(
            n,
            len - 1,
            n,
            1.0,
            &w[n..],
            Layout::Transposed,
            kernel.basis.as_slice(),
            Layout::RowMajor,
            0.0,
            &mut g_a_rows,
        );
    }
    let g_a = DMatrix::from_row_slice(n, n, &g_a_rows);
    Ok((g_a, g_b, g_c))
}

/// Chain rule through the bilinear map. Returns `∂L/∂(A, B, log Δ)`.
pub fn backward_discretize(
    p: &ContinuousSsm,
    d: &DiscreteSsm,
    g_a_bar: &DMatrix<f64>,
    g_b_bar: &DVector<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>, f64), SsmError> {
    let n = p.state_dim();
    let delta = d.delta;
    // One transpose solve for [gĀ | gB̄]: G = M⁻ᵀ gĀ, H = M⁻ᵀ gB̄.
    let mut rhs = DMatrix::<f64>::zeros(n, n + 1);
    rhs.view_mut((0, 0), (n, n)).copy_from(g_a_bar);
    rhs.set_column(n, g_b_bar);
    if !d.factors().solve_transpose_mut(&mut rhs) || rhs.iter().any(|v| !v.is_finite()) {
        return Err(SsmError::SingularMatrix { delta });
    }
    let g_p = rhs.columns(0, n).into_owned();
    let h = rhs.column(n).into_owned();
    let g_m = -(&g_p * d.a_bar.transpose()) - &h * d.b_bar.transpose();
    let diff = &g_p - &g_m;
    let g_a = &diff * (0.5 * delta);
    let g_b = &h * delta;
    let g_delta = 0.5 * p.a.dot(&diff) + p.b.dot(&h);
    let g_log_delta = if p.delta_clamped() { 0.0 } else { g_delta * delta };
    Ok((g_a, g_b, g_log_delta))
}

/// Full chain from `∂L/∂K` to the continuous parameters; the result holds gradients in parameter layout.
pub fn ssm_param_grad(p: &ContinuousSsm, d: &DiscreteSsm, kernel: &Kernel, g_k: &[f64]) -> Result<ContinuousSsm, SsmError> {
    let (g_a_bar, g_b_bar, g_c) = kernel_backward(d, kernel, g_k)?;
    let (g_a, g_b, g_log_delta) = backward_discretize(p, d, &g_a_bar, &g_b_bar)?;
    Ok(ContinuousSsm {
        a: g_a,
        b: g_b,
        c: g_c,
        log_delta: g_log_delta,
    })
}

/// Adjoint of the per-channel causal convolution.
///
/// Returns the input gradient and `∂L/∂K` for each cached kernel.
pub fn backward_conv(x: &Tensor3, cache: &SsmLayerCache, g_y: &Tensor3) -> (Tensor3, Vec<Vec<f64>>) {
    let (batch, len, chan) = x.shape();
    assert!(x.same_shape(g_y), "backward_conv: shape mismatch");
    let plan = &cache.plan;
    let fft = plan.uses_fft();
    let spec_len = if fft { plan.spectrum_len() } else { 0 };

    struct ChannelGrad {
        g_x: Vec<Vec<f64>>,
        g_k_spec: Vec<Complex64>,
        g_k: Vec<f64>,
    }

    let per_channel: Vec<ChannelGrad> = (0..chan)
        .into_par_iter()
        .map(|c| {
            let j = cache.ssm_index(c);
            let mut xs = vec![0.0; len];
            let mut gs = vec![0.0; len];
            let mut out = ChannelGrad {
                g_x: Vec::with_capacity(batch),
                g_k_spec: vec![Complex64::new(0.0, 0.0); spec_len],
                g_k: if fft { Vec::new() } else { vec![0.0; len] },
            };
            let mut tmp = vec![0.0; len];
            for b in 0..batch {
                x.gather_series(b, c, &mut xs);
                g_y.gather_series(b, c, &mut gs);
                let mut gx = vec![0.0; len];
                if gs.iter().all(|v| *v == 0.0) {
                    out.g_x.push(gx);
                    continue;
                }
                if fft {
                    let g_spec = plan.spectrum(&gs);
                    plan.correlate_with_spectrum(&cache.kernel_spectra[j], &g_spec, &mut gx);
                    if xs.iter().any(|v| *v != 0.0) {
                        let x_spec = plan.spectrum(&xs);
                        for ((acc, xv), gv) in out.g_k_spec.iter_mut().zip(&x_spec).zip(&g_spec) {
                            *acc += xv.conj() * gv;
                        }
                    }
                } else {
                    correlate_direct(&cache.kernels[j].weights, &gs, &mut gx);
                    correlate_direct(&xs, &gs, &mut tmp);
                    for (a, v) in out.g_k.iter_mut().zip(&tmp) {
                        *a += v;
                    }
                }
                out.g_x.push(gx);
            }
            out
        })
        .collect();

    let mut g_x = Tensor3::zeros(batch, len, chan);
    let num_kernels = cache.kernels.len();
    let mut g_k = vec![vec![0.0; len]; num_kernels];
    if fft {
        let mut spec_sum = vec![vec![Complex64::new(0.0, 0.0); spec_len]; num_kernels];
        for (c, pc) in per_channel.iter().enumerate() {
            for (acc, v) in spec_sum[cache.ssm_index(c)].iter_mut().zip(&pc.g_k_spec) {
                *acc += v;
            }
        }
        for (spec, out) in spec_sum.iter_mut().zip(g_k.iter_mut()) {
            plan.inverse_into(spec, out);
        }
    } else {
        for (c, pc) in per_channel.iter().enumerate() {
            for (acc, v) in g_k[cache.ssm_index(c)].iter_mut().zip(&pc.g_k) {
                *acc += v;
            }
        }
    }
    for (c, pc) in per_channel.into_iter().enumerate() {
        for (b, gx) in pc.g_x.iter().enumerate() {
            g_x.scatter_series(b, c, gx);
        }
    }
    (g_x, g_k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::ssm_conv_forward;
    use crate::ssm::{build_kernel, discretize, ConvPlan};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kernel_loss(p: &ContinuousSsm, w: &[f64]) -> f64 {
        let d = discretize(p).unwrap();
        let k = build_kernel(&d, w.len()).unwrap();
        k.weights.iter().zip(w).map(|(a, b)| a * b).sum()
    }

    fn check_fd(p: &ContinuousSsm, w: &[f64]) {
        let d = discretize(p).unwrap();
        let k = build_kernel(&d, w.len()).unwrap();
        let g = ssm_param_grad(p, &d, &k, w).unwrap();
        let eps = 1e-5;
        let fd = |f: &dyn Fn(&mut ContinuousSsm)| {
            let mut q = p.clone();
            f(&mut q);
            kernel_loss(&q, w)
        };
        let n = p.state_dim();
        for r in 0..n {
            for c in 0..n {
                let up = fd(&|q: &mut ContinuousSsm| q.a[(r, c)] += eps);
                let dn = fd(&|q: &mut ContinuousSsm| q.a[(r, c)] -= eps);
                let num = (up - dn) / (2.0 * eps);
                assert!((num - g.a[(r, c)]).abs() <= 1e-6 + 1e-4 * num.abs(), "A[{r},{c}] {num} vs {}", g.a[(r, c)]);
            }
            let up = fd(&|q: &mut ContinuousSsm| q.b[r] += eps);
            let dn = fd(&|q: &mut ContinuousSsm| q.b[r] -= eps);
            let num = (up - dn) / (2.0 * eps);
            assert!((num - g.b[r]).abs() <= 1e-6 + 1e-4 * num.abs(), "B[{r}]");
            let up = fd(&|q: &mut ContinuousSsm| q.c[r] += eps);
            let dn = fd(&|q: &mut ContinuousSsm| q.c[r] -= eps);
            let num = (up - dn) / (2.0 * eps);
            assert!((num - g.c[r]).abs() <= 1e-6 + 1e-4 * num.abs(), "C[{r}]");
        }
        let up = fd(&|q: &mut ContinuousSsm| q.log_delta += eps);
        let dn = fd(&|q: &mut ContinuousSsm| q.log_delta -= eps);
        let num = (up - dn) / (2.0 * eps);
        assert!((num - g.log_delta).abs() <= 1e-6 + 1e-4 * num.abs(), "log_delta {num} vs {}", g.log_delta);
    }

    #[test]
    fn surrogate_passes_interior_only() {
        let g = Tensor3::from_vec(1, 4, 1, vec![2.0, 3.0, 4.0, 5.0]);
        let p = Tensor3::from_vec(1, 4, 1, vec![0.5, 0.0, 1.0, 0.999]);
        assert_eq!(surrogate_spike_grad(&g, &p).data, vec![2.0, 0.0, 0.0, 5.0]);
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = ContinuousSsm::init_hippo(4, &mut rng);
        let d = discretize(&p).unwrap();
        let k = build_kernel(&d, 10).unwrap();
        let g = ssm_param_grad(&p, &d, &k, &[0.0; 10]).unwrap();
        assert!(g.a.iter().chain(g.b.iter()).chain(g.c.iter()).all(|v| *v == 0.0));
        assert_eq!(g.log_delta, 0.0);
    }

    #[test]
    fn scalar_closed_form() {
        // n = 1: ā = (1 + Δa/2)/(1 - Δa/2), b̄ = Δb/(1 - Δa/2), K_i = c ā^i b̄.
        let (a, b, c, delta) = (-1.5_f64, 0.7_f64, 1.3_f64, 0.05_f64);
        let p = ContinuousSsm::new(DMatrix::from_element(1, 1, a), DVector::from_element(1, b), DVector::from_element(1, c), delta.ln());
        let len = 6;
        let wts: Vec<f64> = (0..len).map(|i| 1.0 + 0.1 * i as f64).collect();
        let d = discretize(&p).unwrap();
        let k = build_kernel(&d, len).unwrap();
        let g = ssm_param_grad(&p, &d, &k, &wts).unwrap();

        let den = 1.0 - delta * a / 2.0;
        let abar = (1.0 + delta * a / 2.0) / den;
        let bbar = delta * b / den;
        let dabar_da = delta / (den * den);
        let dbbar_da = delta * b * (delta / 2.0) / (den * den);
        let dabar_dd = a / (den * den);
        let dbbar_dd = b / (den * den);
        let mut ga = 0.0;
        let mut gd = 0.0;
        let mut gb = 0.0;
        let mut gc = 0.0;
        for (i, wv) in wts.iter().enumerate() {
            let pw = abar.powi(i as i32);
            let dpw = if i == 0 { 0.0 } else { i as f64 * abar.powi(i as i32 - 1) };
            gc += wv * pw * bbar;
            gb += wv * c * pw * delta / den;
            ga += wv * c * (dpw * dabar_da * bbar + pw * dbbar_da);
            gd += wv * c * (dpw * dabar_dd * bbar + pw * dbbar_dd);
        }
        assert!((g.a[(0, 0)] - ga).abs() < 1e-12);
        assert!((g.b[0] - gb).abs() < 1e-12);
        assert!((g.c[0] - gc).abs() < 1e-12);
        assert!((g.log_delta - gd * delta).abs() < 1e-12);
    }

    #[test]
    fn zero_a_log_delta_flows_through_b_only() {
        let p = ContinuousSsm::new(DMatrix::zeros(2, 2), DVector::from_vec(vec![1.0, -2.0]), DVector::from_vec(vec![0.5, 0.25]), 0.02f64.ln());
        let wts = [1.0, 1.0, 1.0];
        let d = discretize(&p).unwrap();
        let k = build_kernel(&d, 3).unwrap();
        let g = ssm_param_grad(&p, &d, &k, &wts).unwrap();
        // K_i = Δ·C·B for every i, so dL/dlogΔ = 3·Δ·C·B.
        let cb = 0.5 * 1.0 + 0.25 * -2.0;
        assert!((g.log_delta - 3.0 * 0.02 * cb).abs() < 1e-14);
    }

    #[test]
    fn random_systems_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [1usize, 4, 8] {
            let mut p = ContinuousSsm::init_hippo(n, &mut rng);
            for v in p.a.iter_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
            p.log_delta = rng.gen_range(-5.0..-3.0);
            let wts: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
            check_fd(&p, &wts);
        }
    }

    #[test]
    fn clamped_delta_has_zero_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ContinuousSsm::init_hippo(3, &mut rng);
        p.log_delta = 0.5f64.ln();
        let d = discretize(&p).unwrap();
        let k = build_kernel(&d, 5).unwrap();
        assert_eq!(ssm_param_grad(&p, &d, &k, &[1.0; 5]).unwrap().log_delta, 0.0);
    }

    #[test]
    fn conv_adjoint_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ssm: Vec<ContinuousSsm> = (0..3).map(|_| ContinuousSsm::init_hippo(3, &mut rng)).collect();
        for len in [20usize, 70] {
            let plan = ConvPlan::new(len);
            let x = Tensor3::from_vec(2, len, 3, (0..2 * len * 3).map(|_| rng.gen_range(0.0..1.0)).collect());
            let w = Tensor3::from_vec(2, len, 3, (0..2 * len * 3).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let (_, cache) = ssm_conv_forward(&x, &ssm, &plan).unwrap();
            let (gx, gk) = backward_conv(&x, &cache, &w);
            let loss = |xx: &Tensor3| -> f64 {
                let (y, _) = ssm_conv_forward(xx, &ssm, &plan).unwrap();
                y.data.iter().zip(&w.data).map(|(a, b)| a * b).sum()
            };
            for i in (0..x.data.len()).step_by(7) {
                let mut xp = x.clone();
                xp.data[i] += 1e-6;
                let mut xm = x.clone();
                xm.data[i] -= 1e-6;
                let num = (loss(&xp) - loss(&xm)) / 2e-6;
                assert!((num - gx.data[i]).abs() < 1e-7, "len {len} x[{i}]");
            }
            // ∂L/∂K_i = Σ_{b,t} x[t-i]·w[t] for each channel's kernel.
            for c in 0..3 {
                for i in [0, 1, len / 2, len - 1] {
                    let mut expect = 0.0;
                    for b in 0..2 {
                        for t in i..len {
                            expect += x.get(b, t - i, c) * w.get(b, t, c);
                        }
                    }
                    assert!((gk[c][i] - expect).abs() < 1e-9, "len {len} K[{c}][{i}]");
                }
            }
        }
    }
}
