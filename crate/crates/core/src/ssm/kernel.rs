use nalgebra::{DMatrix, DVector};

use super::conv::ConvPlan;
use super::{DiscreteSsm, SsmError};

/// Impulse response `K_i = C̄ Ā^i B̄`, `i = 0..L`.
///
/// `basis` keeps the state iterates `v_i = Ā^i B̄` as columns; the kernel
/// adjoint reuses them instead of recomputing matrix powers.
#[derive(Clone, Debug)]
pub struct Kernel {
    pub weights: Vec<f64>,
    pub basis: DMatrix<f64>,
}

impl Kernel {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Hidden states `h[t]` for `t = 0..L`, one row per step.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStateSequence {
    pub states: DMatrix<f64>,
}

impl HiddenStateSequence {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }

    pub fn state(&self, t: usize) -> DVector<f64> {
        self.states.row(t).transpose()
    }
}

fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Builds the kernel by iterating `v ← Ā v` from `v = B̄` (`O(n²L)`).
pub fn build_kernel(d: &DiscreteSsm, len: usize) -> Result<Kernel, SsmError> {
    assert!(len >= 1, "kernel length must be positive");
    let n = d.state_dim();
    let mut basis = DMatrix::<f64>::zeros(n, len);
    let mut weights = Vec::with_capacity(len);
    let mut v = d.b_bar.clone();
    let mut next = DVector::<f64>::zeros(n);
    for i in 0..len {
        let k = d.c_bar.dot(&v);
        if !k.is_finite() || v.iter().any(|x| !x.is_finite()) {
            return Err(SsmError::NonFinite {
                step: i,
                spectral_radius: spectral_radius(&d.a_bar),
            });
        }
        weights.push(k);
        basis.set_column(i, &v);
        next.gemv(1.0, &d.a_bar, &v, 0.0);
        std::mem::swap(&mut v, &mut next);
    }
    Ok(Kernel { weights, basis })
}

/// Step-by-step recurrence `h[t] = Ā h[t-1] + B̄ x[t]`, `y[t] = C̄ h[t]`, from `h = 0`.
///
/// Returns the hidden states and the pre-squash outputs.
pub fn forward_recurrent(d: &DiscreteSsm, x: &[f64]) -> (HiddenStateSequence, Vec<f64>) {
    let n = d.state_dim();
    let mut states = DMatrix::<f64>::zeros(x.len(), n);
    let mut y = Vec::with_capacity(x.len());
    let mut h = DVector::<f64>::zeros(n);
    let mut next = DVector::<f64>::zeros(n);
    for (t, &xt) in x.iter().enumerate() {
        next.gemv(1.0, &d.a_bar, &h, 0.0);
        next.axpy(xt, &d.b_bar, 1.0);
        std::mem::swap(&mut h, &mut next);
        states.set_row(t, &h.transpose());
        y.push(d.c_bar.dot(&h));
    }
    (HiddenStateSequence { states }, y)
}

/// Pre-squash outputs `y[i] = Σ_{j≤i} K_j x[i-j]` via [`ConvPlan`].
pub fn forward_conv(k: &Kernel, x: &[f64]) -> Result<Vec<f64>, SsmError> {
    if k.len() != x.len() {
        return Err(SsmError::LengthMismatch {
            kernel: k.len(),
            sequence: x.len(),
        });
    }
    let mut y = vec![0.0; x.len()];
    ConvPlan::new(x.len()).causal_conv(&k.weights, x, &mut y);
    Ok(y)
}
