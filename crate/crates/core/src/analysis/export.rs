//! CSV and JSON bundle written by `analyze`.
//!
//! | file             | schema                                        |
//! |------------------|-----------------------------------------------|
//! | `activity.csv`   | `layer,t,activity`                            |
//! | `raster.csv`     | `layer,neuron,t` (one row per spike, run 0)   |
//! | `histogram.json` | per layer: edges, counts, mean_probs, kde     |
//! | `energy.json`    | [`EnergyReport`]                              |
//! | `index.json`     | [`BundleIndex`]                               |

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::kde::{default_bandwidth, kde_exponential, KdeCurve};
use super::{AnalysisError, EnergyReport, Histogram, LayerStats};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleIndex {
    pub schema_version: u32,
    pub files: Vec<BundleFile>,
    pub layers: Vec<String>,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleFile {
    pub name: String,
    pub columns: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerHistogram {
    pub layer: String,
    pub histogram: Histogram,
    pub mean_probs: Vec<f64>,
    pub kde: KdeCurve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramFile {
    pub schema_version: u32,
    pub layers: Vec<LayerHistogram>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AnalysisError + '_ {
    move |source| AnalysisError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> AnalysisError + '_ {
    move |e| AnalysisError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), AnalysisError> {
    let text = serde_json::to_string_pretty(value).expect("analysis types serialize");
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn histogram_file(stats: &[LayerStats]) -> HistogramFile {
    HistogramFile {
        schema_version: SCHEMA_VERSION,
        layers: stats
            .iter()
            .map(|s| LayerHistogram {
                layer: s.name.clone(),
                histogram: s.histogram.clone(),
                mean_probs: s.mean_probs.clone(),
                kde: kde_exponential(&s.mean_probs, default_bandwidth(&s.mean_probs)),
            })
            .collect(),
    }
}

/// Writes the bundle into `dir`, creating it if needed.
pub fn write_bundle(dir: &Path, stats: &[LayerStats], energy: &EnergyReport) -> Result<BundleIndex, AnalysisError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;

    let path = dir.join("activity.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["layer", "t", "activity"]).map_err(csv_err(&path))?;
    for s in stats {
        for (t, a) in s.activity.iter().enumerate() {
            w.write_record([s.name.clone(), t.to_string(), a.to_string()]).map_err(csv_err(&path))?;
        }
    }
    w.flush().map_err(io_err(&path))?;

    let path = dir.join("raster.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["layer", "neuron", "t"]).map_err(csv_err(&path))?;
    for s in stats {
        for (c, t) in &s.raster {
            w.write_record([s.name.clone(), c.to_string(), t.to_string()]).map_err(csv_err(&path))?;
        }
    }
    w.flush().map_err(io_err(&path))?;

    write_json(&dir.join("histogram.json"), &histogram_file(stats))?;
    write_json(&dir.join("energy.json"), energy)?;

    let cols = |c: &[&str]| Some(c.iter().map(|s| s.to_string()).collect());
    let index = BundleIndex {
        schema_version: SCHEMA_VERSION,
        files: vec![
            BundleFile {
                name: "activity.csv".into(),
                columns: cols(&["layer", "t", "activity"]),
            },
            BundleFile {
                name: "raster.csv".into(),
                columns: cols(&["layer", "neuron", "t"]),
            },
            BundleFile {
                name: "histogram.json".into(),
                columns: None,
            },
            BundleFile {
                name: "energy.json".into(),
                columns: None,
            },
        ],
        layers: stats.iter().map(|s| s.name.clone()).collect(),
        runs: stats.first().map_or(0, |s| s.runs),
    };
    write_json(&dir.join("index.json"), &index)?;
    Ok(index)
}
