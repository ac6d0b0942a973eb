//! Training step, epoch loop and evaluation.

use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{argmax, log_softmax, softmax_cross_entropy, LossOutput, IGNORE_INDEX};
use super::optim::{AdamConfig, OptimizerState};
use super::tape::{forward_model, BackwardReport, ForwardPass};
use super::{derive_seed, TrainError, STREAM_EVAL, STREAM_RECALIBRATE, STREAM_SAMPLER, STREAM_SHUFFLE};
use crate::data::SequenceDataset;
use crate::layers::{Mode, Model, ModelBuffers, NormSite, NormUse, Readout};
use crate::tensor::Tensor3;

/// Inputs, one target per logit row, and stable example ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor3,
    pub targets: Vec<i64>,
    pub ids: Vec<u64>,
}

impl Batch {
    pub fn from_dataset(ds: &SequenceDataset, rows: &[usize]) -> Self {
        let sub = ds.subset(rows);
        Self {
            inputs: sub.inputs,
            targets: sub.labels,
            ids: sub.ids,
        }
    }
}

/// Checks that the dataset's label layout matches the model readout and input width.
pub fn check_compatible(model: &Model, ds: &SequenceDataset) -> Result<(), TrainError> {
    let cfg = &model.config;
    if ds.features() != cfg.input_dim {
        return Err(TrainError::Incompatible(format!(
            "dataset has {} features, model expects {}",
            ds.features(),
            cfg.input_dim
        )));
    }
    if ds.meta.num_classes != cfg.num_classes {
        return Err(TrainError::Incompatible(format!(
            "dataset has {} classes, model has {}",
            ds.meta.num_classes, cfg.num_classes
        )));
    }
    let per_step = cfg.readout == Readout::PerStep;
    if per_step != (ds.label_len > 1) {
        return Err(TrainError::Incompatible(format!(
            "readout {:?} does not fit {} labels per sequence",
            cfg.readout, ds.label_len
        )));
    }
    Ok(())
}

/// Forward, loss and full reverse sweep.
pub fn loss_and_grad(
    model: &Model,
    batch: &Batch,
    mode: Mode,
    seed: u64,
) -> Result<(LossOutput, BackwardReport, ForwardPass), TrainError> {
    let fp = forward_model(model, &batch.inputs, &batch.ids, mode, seed)?;
    let out = softmax_cross_entropy(fp.logits(), &batch.targets);
    if !out.loss.is_finite() {
        let layer = fp.tape.first_non_finite().unwrap_or("loss").to_string();
        return Err(TrainError::NonFiniteLoss { layer });
    }
    let report = fp.tape.backward(&model.params, fp.logits, out.grad.clone())?;
    Ok((out, report, fp))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub accuracy: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// One optimizer step on sampled spikes; the sampler backward is the surrogate identity.
pub fn train_step(model: &mut Model, opt: &mut OptimizerState, batch: &Batch, seed: u64) -> Result<StepReport, TrainError> {
    train_step_in(model, opt, batch, Mode::TrainSample, seed)
}

/// [`train_step`] under a chosen training mode (`TrainSample` or `TrainExpected`).
pub fn train_step_in(
    model: &mut Model,
    opt: &mut OptimizerState,
    batch: &Batch,
    mode: Mode,
    seed: u64,
) -> Result<StepReport, TrainError> {
    if mode.norm_use() != NormUse::Batch {
        return Err(TrainError::Incompatible(format!("{mode:?} is not a training mode")));
    }
    let (out, report, fp) = loss_and_grad(model, batch, mode, seed)?;
    fp.tape.update_running_stats(&mut model.buffers);
    let lr = opt.current_lr();
    let grad_norm = opt.update(&mut model.params, &report.grads);
    Ok(StepReport {
        step: opt.step,
        loss: out.loss,
        accuracy: if out.scored == 0 { 0.0 } else { out.correct as f64 / out.scored as f64 },
        grad_norm,
        lr,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: Mode,
    /// Logit-averaging repeats in the sampling modes.
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_eval_batch")]
    pub batch_size: usize,
}

fn default_repeats() -> usize {
    8
}

fn default_eval_batch() -> usize {
    64
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: Mode::EvalSample,
            repeats: default_repeats(),
            batch_size: default_eval_batch(),
        }
    }
}

impl EvalConfig {
    pub fn expected() -> Self {
        Self {
            mode: Mode::EvalExpected,
            repeats: 1,
            batch_size: default_eval_batch(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteRate {
    pub site: String,
    /// Mean spike count per neuron per step (mean probability in the expected modes).
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mode: Mode,
    pub repeats: usize,
    pub accuracy: f64,
    pub loss: f64,
    pub scored: usize,
    pub per_class: Vec<ClassMetrics>,
    pub site_rates: Vec<SiteRate>,
}

/// Accuracy, loss and per-class metrics. Sampling modes average logits over `repeats` seeds.
pub fn evaluate(model: &Model, ds: &SequenceDataset, cfg: &EvalConfig, seed: u64) -> Result<EvalMetrics, TrainError> {
    check_compatible(model, ds)?;
    let k = model.config.num_classes;
    let repeats = if cfg.mode.samples() { cfg.repeats.max(1) } else { 1 };
    let mut confusion = vec![vec![0usize; k]; k];
    let mut total_loss = 0.0;
    let mut scored = 0usize;
    let mut correct = 0usize;
    let mut site_sums: Vec<(String, f64, usize)> = Vec::new();
    let rows: Vec<usize> = (0..ds.len()).collect();
    for chunk in rows.chunks(cfg.batch_size.max(1)) {
        let batch = Batch::from_dataset(ds, chunk);
        let mut mean_logits: Option<Tensor3> = None;
        for r in 0..repeats {
            let fp = forward_model(model, &batch.inputs, &batch.ids, cfg.mode, derive_seed(seed, STREAM_EVAL, r as u64))?;
            if site_sums.is_empty() {
                site_sums = fp.sites.iter().map(|s| (s.name.clone(), 0.0, 0)).collect();
            }
            for (acc, site) in site_sums.iter_mut().zip(&fp.sites) {
                let v = fp.tape.value(site.spikes);
                acc.1 += v.data.iter().sum::<f64>();
                acc.2 += v.data.len();
            }
            let logits = fp.logits().map(|v| v / repeats as f64);
            match &mut mean_logits {
                Some(m) => m.add_assign(&logits),
                slot => *slot = Some(logits),
            }
        }
        let logits = mean_logits.expect("at least one repeat");
        for (row, &t) in logits.data.chunks(k).zip(&batch.targets) {
            if t == IGNORE_INDEX {
                continue;
            }
            let t = t as usize;
            total_loss -= log_softmax(row)[t];
            let pred = argmax(row);
            confusion[t][pred] += 1;
            scored += 1;
            if pred == t {
                correct += 1;
            }
        }
    }
    if !total_loss.is_finite() {
        return Err(TrainError::NonFiniteLoss { layer: "evaluation logits".into() });
    }
    let per_class = (0..k)
        .map(|c| {
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = confusion.iter().map(|r| r[c]).sum();
            let tp = confusion[c][c];
            ClassMetrics {
                class: c,
                support,
                precision: if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 },
                recall: if support == 0 { 0.0 } else { tp as f64 / support as f64 },
            }
        })
        .collect();
    Ok(EvalMetrics {
        mode: cfg.mode,
        repeats,
        accuracy: if scored == 0 { 0.0 } else { correct as f64 / scored as f64 },
        loss: if scored == 0 { 0.0 } else { total_loss / scored as f64 },
        scored,
        per_class,
        site_rates: site_sums
            .into_iter()
            .map(|(site, sum, n)| SiteRate {
                site,
                rate: if n == 0 { 0.0 } else { sum / n as f64 },
            })
            .collect(),
    })
}

fn default_train_mode() -> Mode {
    Mode::TrainSample
}

/// Replaces the running batch-norm statistics with the row-weighted mean of batch
/// statistics over the first `max_rows` rows of `ds`. Batches run under the training
/// counterpart of `mode`, so the statistics match what `mode` will feed the norms.
pub fn recalibrate_running_stats(
    model: &mut Model,
    ds: &SequenceDataset,
    mode: Mode,
    batch_size: usize,
    max_rows: usize,
    seed: u64,
) -> Result<(), TrainError> {
    check_compatible(model, ds)?;
    let train_mode = if mode.samples() { Mode::TrainSample } else { Mode::TrainExpected };
    let rows: Vec<usize> = (0..ds.len().min(max_rows)).collect();
    let mut acc = ModelBuffers::new(&model.config);
    for (_, leaf) in acc.leaves_mut() {
        leaf.iter_mut().for_each(|v| *v = 0.0);
    }
    let mut seen: Vec<(NormSite, f64)> = Vec::new();
    for (i, chunk) in rows.chunks(batch_size.max(1)).enumerate() {
        let batch = Batch::from_dataset(ds, chunk);
        let fp = forward_model(model, &batch.inputs, &batch.ids, train_mode, derive_seed(seed, STREAM_RECALIBRATE, i as u64))?;
        let w = chunk.len() as f64;
        for (site, mean, var) in fp.tape.batch_norm_stats() {
            let s = acc.stats_mut(site);
            s.mean.iter_mut().zip(mean).for_each(|(a, m)| *a += w * m);
            s.var.iter_mut().zip(var).for_each(|(a, v)| *a += w * v);
            match seen.iter_mut().find(|(x, _)| *x == site) {
                Some((_, total)) => *total += w,
                None => seen.push((site, w)),
            }
        }
    }
    for (site, total) in seen {
        let src = acc.stats_mut(site);
        let dst = model.buffers.stats_mut(site);
        for (d, s) in dst.mean.iter_mut().zip(&src.mean) {
            *d = s / total;
        }
        for (d, s) in dst.var.iter_mut().zip(&src.var) {
            *d = s / total;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
    /// `TrainSample` or `TrainExpected`.
    #[serde(default = "default_train_mode")]
    pub mode: Mode,
    /// When positive, running statistics are re-estimated on this many training rows
    /// for the evaluation mode after every epoch.
    #[serde(default)]
    pub recalibrate_rows: usize,
    /// Evaluation run on the validation set after each epoch.
    #[serde(default = "EvalConfig::expected")]
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub steps: u64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub lr: f64,
    pub val: Option<EvalMetrics>,
}

pub fn steps_per_epoch(rows: usize, batch_size: usize) -> u64 {
    rows.div_ceil(batch_size.max(1)) as u64
}

/// Epoch loop. Shuffling and sampling seeds derive from `cfg.seed`; `on_epoch` sees
/// each report as it completes and may stop training early with `ControlFlow::Break`.
pub fn fit(
    model: &mut Model,
    train: &SequenceDataset,
    val: Option<&SequenceDataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport, &Model) -> ControlFlow<()>,
) -> Result<Vec<EpochReport>, TrainError> {
    check_compatible(model, train)?;
    if train.is_empty() {
        return Err(TrainError::Incompatible("training set is empty".into()));
    }
    let per_epoch = steps_per_epoch(train.len(), cfg.batch_size);
    let mut opt = OptimizerState::new(cfg.optimizer, &model.params, per_epoch * cfg.epochs as u64);
    let mut reports = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SHUFFLE, epoch as u64)));
        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        let mut n = 0usize;
        let mut lr = opt.current_lr();
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch = Batch::from_dataset(train, chunk);
            let seed = derive_seed(cfg.seed, STREAM_SAMPLER, opt.step);
            let r = train_step_in(model, &mut opt, &batch, cfg.mode, seed)?;
            loss_sum += r.loss;
            acc_sum += r.accuracy;
            lr = r.lr;
            n += 1;
        }
        if cfg.recalibrate_rows > 0 {
            let seed = derive_seed(cfg.seed, STREAM_RECALIBRATE, epoch as u64);
            recalibrate_running_stats(model, train, cfg.eval.mode, cfg.batch_size, cfg.recalibrate_rows, seed)?;
        }
        let val_metrics = match val {
            Some(v) if !v.is_empty() => Some(evaluate(model, v, &cfg.eval, cfg.seed)?),
            _ => None,
        };
        let report = EpochReport {
            epoch,
            steps: opt.step,
            train_loss: loss_sum / n as f64,
            train_accuracy: acc_sum / n as f64,
            lr,
            val: val_metrics,
        };
        let flow = on_epoch(&report, model);
        reports.push(report);
        if flow.is_break() {
            break;
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_adding_task, DatasetMeta};
    use crate::layers::ModelConfig;

    fn toy_dataset(n: usize, len: usize) -> SequenceDataset {
        let mut inputs = Tensor3::zeros(n, len, 1);
        let mut labels = Vec::new();
        for b in 0..n {
            let class = b % 2;
            for t in 0..len {
                let ramp = t as f64 / len as f64;
                inputs.set(b, t, 0, if class == 1 { ramp } else { 1.0 - ramp * ramp });
            }
            labels.push(class as i64);
        }
        SequenceDataset {
            inputs,
            labels,
            label_len: 1,
            ids: (0..n as u64).collect(),
            meta: DatasetMeta {
                name: "toy".into(),
                num_classes: 2,
                permutation_seed: None,
                permutation: None,
                params: serde_json::Value::Null,
            },
        }
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let mut model = Model::new(ModelConfig::tiny(2), 0);
        let before = model.params.clone();
        let ds = toy_dataset(4, 12);
        let mut opt = OptimizerState::new(AdamConfig::with_lr(0.0), &model.params, 10);
        let r = train_step(&mut model, &mut opt, &Batch::from_dataset(&ds, &[0, 1, 2, 3]), 1).unwrap();
        assert!(r.loss.is_finite());
        assert_eq!(model.params, before);
    }

    #[test]
    fn identical_steps_identical_losses() {
        let ds = toy_dataset(4, 12);
        let run = || {
            let mut model = Model::new(ModelConfig::tiny(2), 3);
            let mut opt = OptimizerState::new(AdamConfig::with_lr(1e-2), &model.params, 10);
            let batch = Batch::from_dataset(&ds, &[0, 1, 2, 3]);
            (0..3).map(|s| train_step(&mut model, &mut opt, &batch, s).unwrap().loss).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_sample_overfits() {
        let ds = toy_dataset(1, 16);
        let mut model = Model::new(ModelConfig::tiny(2), 5);
        let mut opt = OptimizerState::new(AdamConfig::with_lr(5e-2), &model.params, 200);
        let batch = Batch::from_dataset(&ds, &[0]);
        let mut last = f64::INFINITY;
        for s in 0..200 {
            last = train_step(&mut model, &mut opt, &batch, s).unwrap().loss;
        }
        assert!(last < 1e-2, "final loss {last}");
        let m = evaluate(&model, &ds, &EvalConfig::expected(), 0).unwrap();
        assert_eq!(m.accuracy, 1.0);
    }

    #[test]
    fn expected_evaluation_is_deterministic() {
        let model = Model::new(ModelConfig::tiny(2), 1);
        let ds = toy_dataset(6, 10);
        let a = evaluate(&model, &ds, &EvalConfig::expected(), 0).unwrap();
        let b = evaluate(&model, &ds, &EvalConfig::expected(), 99).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.per_class.iter().map(|c| c.support).sum::<usize>(), 6);
    }

    #[test]
    fn recalibration_averages_batch_statistics() {
        let mut model = Model::new(ModelConfig::tiny(2), 1);
        let ds = toy_dataset(6, 10);
        let stats_of = |m: &Model, rows: &[usize]| {
            let b = Batch::from_dataset(&ds, rows);
            let fp = forward_model(m, &b.inputs, &b.ids, Mode::TrainExpected, 0).unwrap();
            let s: Vec<(NormSite, Vec<f64>, Vec<f64>)> =
                fp.tape.batch_norm_stats().map(|(s, m, v)| (s, m.to_vec(), v.to_vec())).collect();
            s
        };
        let first = stats_of(&model, &[0, 1, 2, 3]);
        let second = stats_of(&model, &[4, 5]);
        recalibrate_running_stats(&mut model, &ds, Mode::EvalExpected, 4, 100, 0).unwrap();
        assert!(!first.is_empty());
        for ((site, m1, v1), (_, m2, v2)) in first.iter().zip(&second) {
            let got = model.buffers.stats_mut(*site).clone();
            for j in 0..m1.len() {
                assert!((got.mean[j] - (4.0 * m1[j] + 2.0 * m2[j]) / 6.0).abs() < 1e-12);
                assert!((got.var[j] - (4.0 * v1[j] + 2.0 * v2[j]) / 6.0).abs() < 1e-12);
            }
        }
        // Recalibrated statistics make the running-statistics pass match the batch-statistics pass.
        let mut single = Model::new(ModelConfig::tiny(2), 1);
        recalibrate_running_stats(&mut single, &ds, Mode::EvalExpected, 6, 6, 0).unwrap();
        let b = Batch::from_dataset(&ds, &[0, 1, 2, 3, 4, 5]);
        let train = forward_model(&single, &b.inputs, &b.ids, Mode::TrainExpected, 0).unwrap();
        let eval = forward_model(&single, &b.inputs, &b.ids, Mode::EvalExpected, 0).unwrap();
        for (x, y) in train.logits().data.iter().zip(&eval.logits().data) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn incompatible_dataset_rejected() {
        let model = Model::new(ModelConfig::tiny(10), 1);
        let ds = gen_adding_task(2, 16, 0).unwrap();
        assert!(matches!(evaluate(&model, &ds, &EvalConfig::expected(), 0), Err(TrainError::Incompatible(_))));
    }

    #[test]
    fn non_finite_loss_names_the_layer() {
        let mut model = Model::new(ModelConfig::tiny(2), 1);
        model.params.decoder.w.data[0] = f64::NAN;
        let ds = toy_dataset(2, 8);
        let mut opt = OptimizerState::new(AdamConfig::with_lr(1e-2), &model.params, 10);
        match train_step(&mut model, &mut opt, &Batch::from_dataset(&ds, &[0, 1]), 0) {
            Err(TrainError::NonFiniteLoss { layer }) => assert_eq!(layer, "decoder"),
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }
}
