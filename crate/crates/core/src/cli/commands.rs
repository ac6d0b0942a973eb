//! Subcommand implementations.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use super::config::{load_config, resolve_output, RunConfig, OUTPUT_ROOT_ENV};
use super::data::{load_splits, Splits};
use super::manifest::{DatasetFingerprint, Manifest, MANIFEST_VERSION};
use super::{io_error, AnalyzeArgs, CliError, DataArgs, EvalArgs, GenDataArgs, GenTask, TrainArgs};
use crate::analysis::{energy_report, layer_ops, record_traces, spike_stats, write_bundle};
use crate::data::{gen_adding_task, gen_copy_task, load_mnist_idx, permute, CopyTaskSpec, SequenceDataset};
use crate::layers::Model;
use crate::train::checkpoint::{load_checkpoint, save_checkpoint};
use crate::train::trainer::{check_compatible, EvalConfig, EvalMetrics};
use crate::train::{derive_seed, evaluate, fit, EpochReport, STREAM_INIT};

pub const CHECKPOINT_FILE: &str = "checkpoint.s6ck";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TEST_METRICS_FILE: &str = "test_metrics.json";
pub const TIMING_FILE: &str = "timing.json";

/// One line of `metrics.jsonl`.
#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum MetricsLine<'a> {
    Epoch(&'a EpochReport),
    Test(&'a EvalMetrics),
}

fn to_json_line(line: &MetricsLine) -> String {
    serde_json::to_string(line).expect("metrics serialize")
}

fn init_threads(n: usize) {
    // A second initialisation in one process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
}

fn write_pretty(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializes");
    std::fs::write(path, text + "\n").map_err(|e| io_error(path, e))
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let cfg = match (&args.config, &args.manifest) {
        (Some(path), _) => load_config(path, &args.overrides)?,
        (None, Some(path)) => {
            let doc = serde_json::to_string(&Manifest::read(path)?.config).expect("config serializes");
            super::config::parse_config(&doc, &args.overrides)?
        }
        (None, None) => return Err(CliError::Config("either --config or --manifest is required".into())),
    };
    train_run(&cfg).map(|_| ())
}

/// Output of a finished training run.
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub model: Model,
    pub epochs: Vec<EpochReport>,
    pub test: Option<EvalMetrics>,
}

/// Trains per `cfg`, writing manifest, metrics, checkpoint and test metrics into the output directory.
pub fn train_run(cfg: &RunConfig) -> Result<TrainOutcome, CliError> {
    init_threads(cfg.threads);
    let wall = Instant::now();
    let splits = load_splits(&cfg.data)?;
    let Splits { train, val, test } = &splits;
    let model_cfg = cfg.model.model_config(train.features(), train.meta.num_classes);
    model_cfg.validate_shapes().map_err(CliError::Config)?;
    let mut model = Model::new(model_cfg.clone(), derive_seed(cfg.training.seed, STREAM_INIT, 0));
    check_compatible(&model, train)?;
    for ds in [val, test].into_iter().flatten() {
        check_compatible(&model, ds)?;
    }

    let dir = cfg.resolved_output_dir();
    std::fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    Manifest {
        manifest_version: MANIFEST_VERSION,
        code_version: env!("CARGO_PKG_VERSION").into(),
        config_hash: cfg.hash(),
        root_seed: cfg.training.seed,
        config: cfg.clone(),
        model: model_cfg,
        train_data: DatasetFingerprint::of(train),
        val_data: val.as_ref().map(DatasetFingerprint::of),
        test_data: test.as_ref().map(DatasetFingerprint::of),
    }
    .write(&dir.join(MANIFEST_FILE))?;

    let metrics_path = dir.join(METRICS_FILE);
    let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(|e| io_error(&metrics_path, e))?);
    let mut write_err = None;
    let epochs = fit(&mut model, train, val.as_ref(), &cfg.train_config(), |r, _| {
        eprintln!(
            "epoch {} loss {:.4} acc {:.4}{}",
            r.epoch,
            r.train_loss,
            r.train_accuracy,
            r.val.as_ref().map_or(String::new(), |v| format!(" val_acc {:.4}", v.accuracy))
        );
        if let Err(e) = writeln!(metrics, "{}", to_json_line(&MetricsLine::Epoch(r))).and_then(|_| metrics.flush()) {
            write_err.get_or_insert(e);
        }
        ControlFlow::Continue(())
    })?;
    if let Some(e) = write_err {
        return Err(io_error(&metrics_path, e));
    }
    let step = epochs.last().map_or(0, |e| e.steps);
    save_checkpoint(&model, cfg.training.seed, step, &dir.join(CHECKPOINT_FILE))?;

    let test_metrics = match test {
        Some(t) => {
            let m = evaluate(&model, t, &cfg.eval, cfg.training.seed)?;
            writeln!(metrics, "{}", to_json_line(&MetricsLine::Test(&m))).map_err(|e| io_error(&metrics_path, e))?;
            write_pretty(&dir.join(TEST_METRICS_FILE), &m)?;
            eprintln!("test acc {:.4} loss {:.4}", m.accuracy, m.loss);
            Some(m)
        }
        None => None,
    };
    metrics.flush().map_err(|e| io_error(&metrics_path, e))?;
    write_pretty(
        &dir.join(TIMING_FILE),
        &serde_json::json!({ "wall_seconds": wall.elapsed().as_secs_f64() }),
    )?;
    Ok(TrainOutcome {
        dir,
        model,
        epochs,
        test: test_metrics,
    })
}

fn dataset_from_args(args: &DataArgs) -> Result<SequenceDataset, CliError> {
    match (&args.data, &args.config) {
        (Some(path), _) => {
            if !path.exists() {
                return Err(CliError::Data(format!("data file not found: {}", path.display())));
            }
            Ok(SequenceDataset::load(path)?)
        }
        (None, Some(cfg_path)) => {
            let cfg = load_config(cfg_path, &args.overrides)?;
            let splits = load_splits(&cfg.data)?;
            Ok(splits.get(&args.split)?.clone())
        }
        (None, None) => Err(CliError::Config("either --data or --config is required".into())),
    }
}

fn load_model(path: &Path) -> Result<Model, CliError> {
    if !path.exists() {
        return Err(CliError::Data(format!("checkpoint not found: {}", path.display())));
    }
    Ok(load_checkpoint(path)?.0)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let model = load_model(&args.checkpoint)?;
    let ds = dataset_from_args(&args.data)?;
    if args.repeats == 0 || args.batch_size == 0 {
        return Err(CliError::Config("--repeats and --batch-size must be positive".into()));
    }
    let cfg = EvalConfig {
        mode: args.mode,
        repeats: args.repeats,
        batch_size: args.batch_size,
    };
    let metrics = evaluate(&model, &ds, &cfg, args.seed)?;
    let text = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    println!("{text}");
    if let Some(out) = &args.out {
        std::fs::write(out, text + "\n").map_err(|e| io_error(out, e))?;
    }
    Ok(())
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<(), CliError> {
    let model = load_model(&args.checkpoint)?;
    let ds = dataset_from_args(&args.data)?;
    check_compatible(&model, &ds)?;
    let traces = record_traces(&model, &ds, args.mode, args.repeats, args.max_examples, args.seed)?;
    let stats = spike_stats(&traces)?;
    let ifrs: Vec<f64> = stats.iter().map(|s| s.ifr).collect();
    let energy = energy_report(&layer_ops(&model.config), &ifrs)?;
    let dir = resolve_output(&args.out, std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).as_deref());
    write_bundle(&dir, &stats, &energy)?;
    println!("{}", serde_json::to_string_pretty(&energy).expect("report serializes"));
    Ok(())
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<(), CliError> {
    let ds = match args.task {
        GenTask::Adding => gen_adding_task(args.count, args.len, args.seed)?,
        GenTask::Copy => {
            let lag = args
                .lag
                .ok_or_else(|| CliError::Config("--lag is required for the copy task".into()))?;
            let spec = CopyTaskSpec {
                alphabet: args.alphabet,
                payload: args.payload,
            };
            gen_copy_task(args.count, args.len, lag, spec, args.seed)?
        }
        GenTask::Mnist => {
            let (Some(images), Some(labels)) = (&args.images, &args.labels) else {
                return Err(CliError::Config("--images and --labels are required for mnist".into()));
            };
            for p in [images, labels] {
                if !p.exists() {
                    return Err(CliError::Data(format!("data file not found: {}", p.display())));
                }
            }
            permute(&load_mnist_idx(images, labels)?, args.permutation_seed)
        }
    };
    ds.save(&args.out)?;
    eprintln!("wrote {} sequences of length {} to {}", ds.len(), ds.seq_len(), args.out.display());
    Ok(())
}
