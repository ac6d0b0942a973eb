//! Normalized-operations energy accounting.
//!
//! Layers are indexed in signal order `[encoder, s6_0, mixer_0, s6_1, ..., mixer_{M-1}]`.
//! Spike site `i` (encoder, then per block neurons and output) feeds layer `i + 1`, so
//! `Norm#OPS = Σ_i IFR_i · ops_{i+1} / Σ_j ops_j` and `e = 5.1 / Norm#OPS`.

use serde::{Deserialize, Serialize, Serializer};

use super::AnalysisError;
use crate::layers::ModelConfig;

/// Energy ratio of one multiply-accumulate to one accumulate.
pub const OPS_PER_ANN_MAC: f64 = 5.1;

pub const COUNTING_RULE: &str = "Layer#OPS counts synaptic operations per time step per example from layer shapes: \
encoder = input_dim*N (dense input), s6_k = N*n (each input spike accumulates B-bar into an n-dim state), \
mixer_k = N*N (fan-in N per output neuron). The decoder reads probabilities and is not counted. \
IFR is the mean spike count per neuron per step, averaged over the batch.";

/// `e`, or the infinity sentinel for a silent network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EfficiencyFactor {
    Finite(f64),
    Infinite,
}

impl EfficiencyFactor {
    pub fn value(self) -> f64 {
        match self {
            EfficiencyFactor::Finite(v) => v,
            EfficiencyFactor::Infinite => f64::INFINITY,
        }
    }
}

impl Serialize for EfficiencyFactor {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            EfficiencyFactor::Finite(v) => s.serialize_f64(*v),
            EfficiencyFactor::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for EfficiencyFactor {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(EfficiencyFactor::Finite(v)),
            Raw::Str(s) if s == "inf" => Ok(EfficiencyFactor::Infinite),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("unknown efficiency sentinel {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEnergy {
    pub name: String,
    pub ops: f64,
    /// Firing rate of the spikes this layer consumes; `None` for the dense-input encoder.
    pub input_ifr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub counting_rule: String,
    pub ifr_averaging: String,
    pub layers: Vec<LayerEnergy>,
    pub norm_ops: f64,
    pub e: EfficiencyFactor,
}

/// Layer names and op counts for a model, in the order `energy_report` expects.
pub fn layer_ops(cfg: &ModelConfig) -> Vec<(String, f64)> {
    let (n, s) = (cfg.num_neurons as f64, cfg.state_dim as f64);
    let mut out = vec![("encoder".to_string(), cfg.input_dim as f64 * n)];
    for k in 0..cfg.num_blocks {
        out.push((format!("blocks.{k}.s6"), n * s));
        out.push((format!("blocks.{k}.mixer"), n * n));
    }
    out
}

/// `ops` has one entry per layer, `ifrs` one per spike site (`ops.len() - 1`).
pub fn energy_report(ops: &[(String, f64)], ifrs: &[f64]) -> Result<EnergyReport, AnalysisError> {
    if ops.is_empty() || ifrs.len() + 1 != ops.len() {
        return Err(AnalysisError::ShapeMismatch(format!(
            "{} layers need {} firing rates, got {}",
            ops.len(),
            ops.len().saturating_sub(1),
            ifrs.len()
        )));
    }
    if let Some(bad) = ifrs.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(AnalysisError::Invalid(format!("firing rate {bad} outside [0, 1]")));
    }
    if let Some((name, bad)) = ops.iter().find(|(_, o)| !(o.is_finite() && *o >= 0.0)) {
        return Err(AnalysisError::Invalid(format!("layer {name} has op count {bad}")));
    }
    let total: f64 = ops.iter().map(|(_, o)| o).sum();
    if total == 0.0 {
        return Err(AnalysisError::Invalid("all layers have zero operations".into()));
    }
    let weighted: f64 = ifrs.iter().zip(&ops[1..]).map(|(r, (_, o))| r * o).sum();
    let norm_ops = weighted / total;
    let e = if norm_ops == 0.0 {
        EfficiencyFactor::Infinite
    } else {
        EfficiencyFactor::Finite(OPS_PER_ANN_MAC / norm_ops)
    };
    let layers = ops
        .iter()
        .enumerate()
        .map(|(i, (name, o))| LayerEnergy {
            name: name.clone(),
            ops: *o,
            input_ifr: i.checked_sub(1).map(|j| ifrs[j]),
        })
        .collect();
    Ok(EnergyReport {
        counting_rule: COUNTING_RULE.into(),
        ifr_averaging: "batch mean over examples and repeats, then time steps and neurons".into(),
        layers,
        norm_ops,
        e,
    })
}
