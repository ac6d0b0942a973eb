//! Spiking-activity statistics, energy accounting and plot-ready export.

pub mod energy;
pub mod export;
pub mod kde;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SequenceDataset;
use crate::layers::{LayerError, Mode, Model};
use crate::tensor::Tensor3;
use crate::train::trainer::Batch;
use crate::train::{derive_seed, forward_model, STREAM_EVAL};

pub use energy::{energy_report, layer_ops, EfficiencyFactor, EnergyReport, LayerEnergy, COUNTING_RULE, OPS_PER_ANN_MAC};
pub use export::{write_bundle, BundleIndex, SCHEMA_VERSION};
pub use kde::{kde_exponential, kde_exponential_on, KdeCurve, KDE_GRID_POINTS};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("empty trace: {0}")]
    EmptyTrace(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Spikes and spike probabilities of one spiking site, `runs x L x N`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub name: String,
    pub spikes: Tensor3,
    pub probs: Tensor3,
}

/// Runs the model on up to `max_examples` rows, `repeats` times each, and collects every spiking site.
///
/// Runs are stacked along the batch axis: repeat-major, then example.
pub fn record_traces(
    model: &Model,
    ds: &SequenceDataset,
    mode: Mode,
    repeats: usize,
    max_examples: usize,
    seed: u64,
) -> Result<Vec<LayerTrace>, AnalysisError> {
    let rows: Vec<usize> = (0..ds.len().min(max_examples)).collect();
    if rows.is_empty() {
        return Err(AnalysisError::EmptyTrace("dataset has no rows".into()));
    }
    let batch = Batch::from_dataset(ds, &rows);
    let repeats = if mode.samples() { repeats.max(1) } else { 1 };
    let mut traces: Vec<LayerTrace> = Vec::new();
    for r in 0..repeats {
        let fp = forward_model(model, &batch.inputs, &batch.ids, mode, derive_seed(seed, STREAM_EVAL, r as u64))?;
        for (i, site) in fp.sites.iter().enumerate() {
            let spikes = fp.tape.value(site.spikes);
            let probs = fp.tape.value(site.probs);
            if r == 0 {
                traces.push(LayerTrace {
                    name: site.name.clone(),
                    spikes: spikes.clone(),
                    probs: probs.clone(),
                });
            } else {
                append_batch(&mut traces[i].spikes, spikes);
                append_batch(&mut traces[i].probs, probs);
            }
        }
    }
    Ok(traces)
}

fn append_batch(acc: &mut Tensor3, more: &Tensor3) {
    acc.data.extend_from_slice(&more.data);
    acc.batch += more.batch;
}

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges over `[0, 1]`; the last bin is closed.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn of_unit_values(values: &[f64], bins: usize) -> Self {
        let mut counts = vec![0; bins];
        for &v in values {
            let b = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
            counts[b] += 1;
        }
        Self {
            edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
            counts,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub name: String,
    pub num_neurons: usize,
    pub runs: usize,
    /// Fraction of neurons spiking at each step, averaged over runs.
    pub activity: Vec<f64>,
    /// Mean spike count per neuron per step over all runs.
    pub ifr: f64,
    /// Spike events `(neuron, t)` of the first run. Values of at least 0.5 count as spikes.
    pub raster: Vec<(usize, usize)>,
    /// Per-neuron mean spike probability over time and runs.
    pub mean_probs: Vec<f64>,
    pub histogram: Histogram,
}

/// Per-layer activity series, first-run raster and mean-probability histogram.
pub fn spike_stats(traces: &[LayerTrace]) -> Result<Vec<LayerStats>, AnalysisError> {
    if traces.is_empty() {
        return Err(AnalysisError::EmptyTrace("no layers".into()));
    }
    traces.iter().map(layer_stats).collect()
}

fn layer_stats(tr: &LayerTrace) -> Result<LayerStats, AnalysisError> {
    let (runs, len, n) = tr.spikes.shape();
    if runs == 0 || len == 0 || n == 0 {
        return Err(AnalysisError::EmptyTrace(format!("{} has shape {runs}x{len}x{n}", tr.name)));
    }
    if !tr.probs.same_shape(&tr.spikes) {
        return Err(AnalysisError::ShapeMismatch(format!("{}: probabilities and spikes differ in shape", tr.name)));
    }
    let mut activity = vec![0.0; len];
    let mut prob_sum = vec![0.0; n];
    for b in 0..runs {
        for (t, a) in activity.iter_mut().enumerate() {
            let at = tr.spikes.idx(b, t, 0);
            *a += tr.spikes.data[at..at + n].iter().sum::<f64>();
            for (s, p) in prob_sum.iter_mut().zip(&tr.probs.data[at..at + n]) {
                *s += p;
            }
        }
    }
    activity.iter_mut().for_each(|a| *a /= (runs * n) as f64);
    let ifr = activity.iter().sum::<f64>() / len as f64;
    let mean_probs: Vec<f64> = prob_sum.iter().map(|s| s / (runs * len) as f64).collect();
    let mut raster = Vec::new();
    for c in 0..n {
        for t in 0..len {
            if tr.spikes.get(0, t, c) >= 0.5 {
                raster.push((c, t));
            }
        }
    }
    Ok(LayerStats {
        name: tr.name.clone(),
        num_neurons: n,
        runs,
        activity,
        ifr,
        raster,
        histogram: Histogram::of_unit_values(&mean_probs, HISTOGRAM_BINS),
        mean_probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::ModelConfig;
    use proptest::prelude::*;

    fn trace(runs: usize, len: usize, n: usize, f: impl Fn(usize, usize, usize) -> f64) -> LayerTrace {
        let mut spikes = Tensor3::zeros(runs, len, n);
        for b in 0..runs {
            for t in 0..len {
                for c in 0..n {
                    spikes.set(b, t, c, f(b, t, c));
                }
            }
        }
        LayerTrace {
            name: "l".into(),
            probs: spikes.clone(),
            spikes,
        }
    }

    #[test]
    fn silent_network_is_all_zero() {
        let s = &spike_stats(&[trace(3, 10, 5, |_, _, _| 0.0)]).unwrap()[0];
        assert!(s.activity.iter().all(|a| *a == 0.0));
        assert_eq!(s.ifr, 0.0);
        assert!(s.raster.is_empty());
        assert_eq!(s.histogram.counts[0], 5);
    }

    #[test]
    fn saturated_network_is_always_active() {
        let s = &spike_stats(&[trace(2, 7, 4, |_, _, _| 1.0)]).unwrap()[0];
        assert!(s.activity.iter().all(|a| *a == 1.0));
        assert_eq!(s.ifr, 1.0);
        assert_eq!(s.raster.len(), 28);
        assert_eq!(s.histogram.counts[HISTOGRAM_BINS - 1], 4);
    }

    #[test]
    fn constructed_density_is_recovered() {
        // Every 4th neuron fires at every step: density 0.25.
        let s = &spike_stats(&[trace(1, 16, 40, |_, _, c| if c % 4 == 0 { 1.0 } else { 0.0 })]).unwrap()[0];
        assert!(s.activity.iter().all(|a| (a - 0.25).abs() < 1e-15));
        assert_eq!(s.ifr, 0.25);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        assert!(matches!(spike_stats(&[]), Err(AnalysisError::EmptyTrace(_))));
        assert!(matches!(spike_stats(&[trace(0, 4, 4, |_, _, _| 0.0)]), Err(AnalysisError::EmptyTrace(_))));
    }

    #[test]
    fn traces_follow_network_sites() {
        let cfg = ModelConfig {
            num_blocks: 2,
            ..ModelConfig::tiny(2)
        };
        let model = Model::new(cfg, 0);
        let ds = crate::data::gen_adding_task(3, 12, 0).unwrap();
        let mut model = model;
        model.config.input_dim = 2;
        model.params.encoder.w = crate::linalg::Matrix::zeros(2, 4);
        let tr = record_traces(&model, &ds, Mode::EvalSample, 2, 2, 0).unwrap();
        let names: Vec<&str> = tr.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, ["encoder", "blocks.0.neurons", "blocks.0.output", "blocks.1.neurons"]);
        assert!(tr.iter().all(|t| t.spikes.shape() == (4, 12, 4)));
    }

    proptest! {
        #[test]
        fn activity_is_bounded_and_matches_raster(
            len in 1usize..12, n in 1usize..9,
            bits in proptest::collection::vec(any::<bool>(), 108),
        ) {
            let tr = trace(1, len, n, |_, t, c| if bits[(t * n + c) % bits.len()] { 1.0 } else { 0.0 });
            let s = &spike_stats(std::slice::from_ref(&tr)).unwrap()[0];
            prop_assert_eq!(s.histogram.counts.iter().sum::<usize>(), n);
            for (t, a) in s.activity.iter().enumerate() {
                prop_assert!((0.0..=1.0).contains(a));
                let col = s.raster.iter().filter(|(_, tt)| *tt == t).count();
                prop_assert!((a - col as f64 / n as f64).abs() < 1e-12);
            }
        }
    }
}
