//! Whole-model gradient checks against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use s6snn::layers::{Mode, Model, ModelConfig, ParamSharing, Readout};
use s6snn::ssm::Squash;
use s6snn::tensor::Tensor3;
use s6snn::train::{forward_model, softmax_cross_entropy, train_step, AdamConfig, Batch, OptimizerState};

const EPS: f64 = 1e-4;

fn batch(b: usize, len: usize, classes: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..b * len).map(|_| rng.gen::<f64>()).collect();
    Batch {
        inputs: Tensor3::from_vec(b, len, 1, data),
        targets: (0..b).map(|i| (i % classes) as i64).collect(),
        ids: (0..b as u64).collect(),
    }
}

fn loss(model: &Model, batch: &Batch, mode: Mode) -> f64 {
    let fp = forward_model(model, &batch.inputs, &batch.ids, mode, 0).unwrap();
    softmax_cross_entropy(fp.logits(), &batch.targets).loss
}

/// Compares every leaf gradient with central differences and returns the number of scalars checked.
fn check_model(model: &Model, batch: &Batch, mode: Mode) -> usize {
    let fp = forward_model(model, &batch.inputs, &batch.ids, mode, 0).unwrap();
    let out = softmax_cross_entropy(fp.logits(), &batch.targets);
    let grads = fp.tape.backward(&model.params, fp.logits, out.grad).unwrap().grads;
    let names: Vec<String> = model.params.leaves().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Vec<f64>> = grads.leaves().into_iter().map(|(_, g)| g.to_vec()).collect();
    let mut checked = 0;
    let mut failures = Vec::new();
    for (li, name) in names.iter().enumerate() {
        for j in 0..analytic[li].len() {
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.params.leaves_mut()[li].1[j] += delta;
                loss(&m, batch, mode)
            };
            let fd = (eval(EPS) - eval(-EPS)) / (2.0 * EPS);
            let g = analytic[li][j];
            let tol = (1e-3 * fd.abs().max(g.abs())).max(1e-6);
            if (fd - g).abs() > tol {
                failures.push(format!("{name}[{j}]: analytic {g:e} fd {fd:e}"));
            }
            checked += 1;
        }
    }
    assert!(failures.is_empty(), "{} gradient mismatches:\n{}", failures.len(), failures.join("\n"));
    checked
}

fn tiny(squash: Squash) -> ModelConfig {
    ModelConfig {
        squash,
        ..ModelConfig::tiny(3)
    }
}

/// Running statistics away from their defaults so the eval-path norm is not an identity.
fn with_running_stats(mut model: Model) -> Model {
    let b = batch(6, 16, 3, 77);
    let fp = forward_model(&model, &b.inputs, &b.ids, Mode::TrainExpected, 0).unwrap();
    for _ in 0..20 {
        fp.tape.update_running_stats(&mut model.buffers);
    }
    model
}

#[test]
fn tiny_model_eval_expected_gradients_match_finite_differences() {
    for (seed, squash) in [(1, Squash::Clamp), (2, Squash::Logistic)] {
        let model = with_running_stats(Model::new(tiny(squash), seed));
        let n = check_model(&model, &batch(3, 16, 3, seed), Mode::EvalExpected);
        assert_eq!(n, model.params.num_scalars());
    }
}

#[test]
fn tiny_model_train_expected_gradients_match_finite_differences() {
    let model = Model::new(tiny(Squash::Logistic), 3);
    check_model(&model, &batch(4, 16, 3, 3), Mode::TrainExpected);
}

#[test]
fn shared_layer_norm_and_readouts_gradients_match() {
    let mut cfg = tiny(Squash::Logistic);
    cfg.num_blocks = 2;
    cfg.param_sharing = ParamSharing::PerLayer;
    cfg.norm = s6snn::layers::norm::NormKind::Layer;
    cfg.encoder_norm = false;
    for readout in [Readout::MeanPool, Readout::Last] {
        cfg.readout = readout;
        let model = Model::new(cfg.clone(), 4);
        check_model(&model, &batch(2, 12, 3, 4), Mode::EvalExpected);
    }
}

#[test]
fn loss_is_pure_function_of_parameters() {
    let model = Model::new(ModelConfig::tiny(3), 9);
    let b = batch(4, 16, 3, 9);
    for mode in [Mode::TrainSample, Mode::EvalSample, Mode::EvalExpected] {
        let run = || {
            let fp = forward_model(&model, &b.inputs, &b.ids, mode, 123).unwrap();
            softmax_cross_entropy(fp.logits(), &b.targets).loss
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}

#[test]
fn per_layer_sharing_keeps_kernels_identical_after_updates() {
    let cfg = ModelConfig {
        param_sharing: ParamSharing::PerLayer,
        num_blocks: 2,
        ..ModelConfig::tiny(3)
    };
    let mut model = Model::new(cfg, 5);
    let b = batch(4, 16, 3, 5);
    let mut opt = OptimizerState::new(AdamConfig::with_lr(1e-2), &model.params, 5);
    for step in 0..5 {
        train_step(&mut model, &mut opt, &b, step).unwrap();
        for block in &model.params.blocks {
            assert_eq!(block.ssm.len(), 1);
        }
        let fp = forward_model(&model, &b.inputs, &b.ids, Mode::EvalExpected, 0).unwrap();
        for node in fp.tape.nodes() {
            if let s6snn::train::tape::Op::SsmConv { cache, .. } = &node.op {
                let first = &cache.kernels[cache.ssm_index(0)];
                for c in 1..model.config.num_neurons {
                    assert_eq!(cache.kernels[cache.ssm_index(c)].weights, first.weights);
                }
            }
        }
    }
}
