//! Kernel density estimate with the exponential (Laplace) kernel.

use serde::{Deserialize, Serialize};

pub const KDE_GRID_POINTS: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdeCurve {
    pub bandwidth: f64,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
}

/// `k(u) = exp(-|u| / b) / (2b)`, averaged over samples, on `KDE_GRID_POINTS` points spanning `[0, 1]`.
///
/// Mass outside `[0, 1]` is not folded back, so the curve integrates to slightly less than one.
pub fn kde_exponential(samples: &[f64], bandwidth: f64) -> KdeCurve {
    let grid: Vec<f64> = (0..KDE_GRID_POINTS)
        .map(|i| i as f64 / (KDE_GRID_POINTS - 1) as f64)
        .collect();
    kde_exponential_on(samples, bandwidth, grid)
}

/// Same estimate on caller-supplied points. An empty sample set gives a zero curve.
pub fn kde_exponential_on(samples: &[f64], bandwidth: f64, grid: Vec<f64>) -> KdeCurve {
    assert!(bandwidth > 0.0, "bandwidth must be positive");
    let norm = 1.0 / (2.0 * bandwidth * samples.len().max(1) as f64);
    let density = grid
        .iter()
        .map(|&x| samples.iter().map(|&s| (-(x - s).abs() / bandwidth).exp()).sum::<f64>() * norm)
        .collect();
    KdeCurve { bandwidth, grid, density }
}

/// Silverman's rule of thumb, floored so that degenerate samples still give a usable width.
pub fn default_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    if n < 2.0 {
        return 0.05;
    }
    let mean = samples.iter().sum::<f64>() / n;
    let sd = (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    (1.06 * sd * n.powf(-0.2)).max(0.01)
}
