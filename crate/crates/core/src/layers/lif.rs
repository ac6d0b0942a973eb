//! Leaky integrate-and-fire baseline neuron, forward-Euler with reset to rest.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LifParams {
    pub tau_m: f64,
    pub u_rest: f64,
    pub resistance: f64,
    pub v_th: f64,
    pub dt: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        Self {
            tau_m: 20.0,
            u_rest: 0.0,
            resistance: 1.0,
            v_th: 1.0,
            dt: 1.0,
        }
    }
}

impl LifParams {
    pub fn is_valid(&self) -> bool {
        self.tau_m > 0.0 && self.dt > 0.0 && self.dt <= self.tau_m
    }
}

/// One Euler step of `τ_m du/dt = -(u - u_rest) + R·I`; spikes and resets when `u > v_th`.
pub fn lif_step(u: f64, current: f64, p: &LifParams) -> (f64, bool) {
    debug_assert!(p.is_valid(), "LIF requires 0 < dt <= tau_m");
    let next = u + (p.dt / p.tau_m) * (-(u - p.u_rest) + p.resistance * current);
    if next > p.v_th {
        (p.u_rest, true)
    } else {
        (next, false)
    }
}

/// Runs a current trace from `u0`; returns the potential trace and spike train.
pub fn lif_run(u0: f64, currents: &[f64], p: &LifParams) -> (Vec<f64>, Vec<bool>) {
    let mut u = u0;
    let mut trace = Vec::with_capacity(currents.len());
    let mut spikes = Vec::with_capacity(currents.len());
    for &i in currents {
        let (next, s) = lif_step(u, i, p);
        u = next;
        trace.push(u);
        spikes.push(s);
    }
    (trace, spikes)
}
