//! Linear time-invariant state-space neurons.
//!
//! A neuron carries continuous parameters `(A, B, C, Δ)` with the skip term
//! `D` fixed at zero. Bilinear discretization turns them into `(Ā, B̄, C̄)`,
//! whose impulse response `K_i = C̄ Ā^i B̄` drives both the step-by-step
//! recurrence and the equivalent causal convolution.

pub mod conv;
pub mod kernel;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use conv::{causal_conv_direct, correlate_direct, ConvPlan, DIRECT_CONV_MAX_LEN};
pub use kernel::{
    build_kernel, forward_conv, forward_recurrent, HiddenStateSequence, Kernel,
};

/// Step sizes are clamped to this range wherever they are used.
pub const DELTA_MIN: f64 = 1e-3;
pub const DELTA_MAX: f64 = 1e-1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SsmError {
    #[error("I - Δ/2·A is singular (Δ = {delta})")]
    SingularMatrix { delta: f64 },
    #[error("kernel iterate overflowed at power {step}; spectral radius of Ā ≈ {spectral_radius:.4}")]
    NonFinite { step: usize, spectral_radius: f64 },
    #[error("kernel length {kernel} does not match sequence length {sequence}")]
    LengthMismatch { kernel: usize, sequence: usize },
    #[error("state dimension must be at least 1")]
    EmptyState,
}

/// HiPPO-LegS state matrix (0-indexed rows `m`, columns `k`).
pub fn hippo_legs(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |m, k| {
        if m > k {
            -(((2 * m + 1) * (2 * k + 1)) as f64).sqrt()
        } else if m == k {
            -((m + 1) as f64)
        } else {
            0.0
        }
    })
}

/// Learnable continuous-time parameters of one neuron (or one layer when shared).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuousSsm {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    /// Readout row, stored as a column vector.
    pub c: DVector<f64>,
    pub log_delta: f64,
}

impl ContinuousSsm {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, c: DVector<f64>, log_delta: f64) -> Self {
        assert!(a.is_square(), "A must be square");
        assert_eq!(a.nrows(), b.len(), "B length");
        assert_eq!(a.nrows(), c.len(), "C length");
        Self { a, b, c, log_delta }
    }

    /// HiPPO-LegS `A`, `B = 1/sqrt(n)`, `C ~ N(0, 1/n)`, `log Δ` uniform over the clamp range.
    pub fn init_hippo<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (n as f64).sqrt();
        let normal = Normal::new(0.0, scale).expect("valid std");
        let c = DVector::from_fn(n, |_, _| normal.sample(rng));
        let log_delta = rng.gen_range(DELTA_MIN.ln()..DELTA_MAX.ln());
        Self {
            a: hippo_legs(n),
            b: DVector::from_element(n, scale),
            c,
            log_delta,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    /// The feed-through term is structurally zero.
    pub fn d(&self) -> f64 {
        0.0
    }

    /// `exp(log Δ)` clamped to `[DELTA_MIN, DELTA_MAX]`.
    pub fn delta(&self) -> f64 {
        self.log_delta.exp().clamp(DELTA_MIN, DELTA_MAX)
    }

    /// True when the clamp is active, which zeroes the `log Δ` gradient.
    pub fn delta_clamped(&self) -> bool {
        let raw = self.log_delta.exp();
        !(DELTA_MIN..=DELTA_MAX).contains(&raw) || !raw.is_finite()
    }

    pub fn all_finite(&self) -> bool {
        self.a.iter().all(|v| v.is_finite())
            && self.b.iter().all(|v| v.is_finite())
            && self.c.iter().all(|v| v.is_finite())
            && self.log_delta.is_finite()
    }

    pub fn num_scalars(&self) -> usize {
        let n = self.state_dim();
        n * n + 2 * n + 1
    }
}

/// LU factors of `M = I - Δ/2·A` (`P M = L U`), kept for the transpose solves
/// in the backward pass.
#[derive(Clone, Debug)]
pub struct BilinearFactors {
    pub(crate) lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    l: DMatrix<f64>,
    u: DMatrix<f64>,
}

impl BilinearFactors {
    /// Solve `M x = rhs` in place.
    pub fn solve_mut(&self, rhs: &mut DMatrix<f64>) -> bool {
        self.lu.solve_mut(rhs)
    }

    /// Solve `Mᵀ x = rhs` in place: `Mᵀ = Uᵀ Lᵀ P`.
    pub fn solve_transpose_mut(&self, rhs: &mut DMatrix<f64>) -> bool {
        if !self.u.tr_solve_upper_triangular_mut(rhs) {
            return false;
        }
        if !self.l.tr_solve_lower_triangular_mut(rhs) {
            return false;
        }
        self.lu.p().inv_permute_rows(rhs);
        true
    }
}

/// Bilinear-discretized parameters. Only [`discretize`] builds these.
#[derive(Clone, Debug)]
pub struct DiscreteSsm {
    pub a_bar: DMatrix<f64>,
    pub b_bar: DVector<f64>,
    pub c_bar: DVector<f64>,
    pub delta: f64,
    pub(crate) factors: BilinearFactors,
}

impl DiscreteSsm {
    pub fn state_dim(&self) -> usize {
        self.a_bar.nrows()
    }

    pub fn factors(&self) -> &BilinearFactors {
        &self.factors
    }
}

/// Tustin transform:
/// `Ā = (I - Δ/2·A)⁻¹(I + Δ/2·A)`, `B̄ = (I - Δ/2·A)⁻¹ Δ B`, `C̄ = C`.
///
/// Both products are computed with one LU factorization and linear solves.
pub fn discretize(p: &ContinuousSsm) -> Result<DiscreteSsm, SsmError> {
    let n = p.state_dim();
    if n == 0 {
        return Err(SsmError::EmptyState);
    }
    let delta = p.delta();
    let half = 0.5 * delta;
    let eye = DMatrix::<f64>::identity(n, n);
    let m = &eye - &p.a * half;
    let lu = m.lu();
    let singular = || SsmError::SingularMatrix { delta };

    // One solve for [I + Δ/2·A | Δ B] so both share the factorization.
    let mut rhs = DMatrix::<f64>::zeros(n, n + 1);
    rhs.view_mut((0, 0), (n, n)).copy_from(&(&eye + &p.a * half));
    rhs.set_column(n, &(&p.b * delta));
    if !lu.solve_mut(&mut rhs) || rhs.iter().any(|v| !v.is_finite()) {
        return Err(singular());
    }
    let a_bar = rhs.columns(0, n).into_owned();
    let b_bar = rhs.column(n).into_owned();
    let l = lu.l();
    let u = lu.u();
    Ok(DiscreteSsm {
        a_bar,
        b_bar,
        c_bar: p.c.clone(),
        delta,
        factors: BilinearFactors { lu, l, u },
    })
}

/// Probability squashing applied to pre-probability outputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Squash {
    /// Hard clamp to `[0, 1]`.
    #[default]
    Clamp,
    /// `1 / (1 + e^-x)`.
    Logistic,
}

impl Squash {
    #[inline]
    pub fn apply(self, y: f64) -> f64 {
        match self {
            Squash::Clamp => y.clamp(0.0, 1.0),
            Squash::Logistic => 1.0 / (1.0 + (-y).exp()),
        }
    }

    /// Derivative at pre-activation `y`. The clamp passes gradient only on the open interval.
    #[inline]
    pub fn grad(self, y: f64) -> f64 {
        match self {
            Squash::Clamp => {
                if y > 0.0 && y < 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Squash::Logistic => {
                let s = 1.0 / (1.0 + (-y).exp());
                s * (1.0 - s)
            }
        }
    }
}

/// Elementwise clamp to `[0, 1]`.
pub fn sigma_clip(y: &[f64]) -> Vec<f64> {
    y.iter().map(|&v| Squash::Clamp.apply(v)).collect()
}
