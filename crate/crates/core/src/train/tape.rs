//! Recorded forward pass of the whole network and its reverse sweep.
//!
//! Every value lives in an arena; nodes reference values by index and are
//! stored in execution order, so the reverse sweep is a single backwards
//! pass over the node list.

use crate::layers::decoder::{decode_sequence, decoder_backward, Readout};
use crate::layers::encoder::{encode_affine, encoder_backward};
use crate::layers::mixer::mixer_backward;
pub use crate::layers::norm::NormSite;
use crate::layers::norm::{norm_backward, norm_forward, NormCache, NormKind, NormUse};
use crate::layers::{
    s6_block_forward, sample_or_expect, sampler_site_encoder, BlockContext, LayerError, Mode, Model, ModelBuffers,
    ModelParams, SampleKey, SsmLayerCache,
};
use crate::ssm::{ContinuousSsm, ConvPlan, SsmError, Squash};
use crate::tensor::Tensor3;

use super::adjoint::{backward_conv, ssm_param_grad, surrogate_spike_grad};

pub type ValueId = usize;

#[derive(Debug)]
pub enum Op {
    EncoderAffine,
    Norm { site: NormSite, cache: NormCache },
    Squash(Squash),
    Sample,
    SsmConv { block: usize, cache: SsmLayerCache },
    Mixer { block: usize, pre: Tensor3 },
    Add,
    Decode { readout: Readout },
}

#[derive(Debug)]
pub struct Node {
    pub label: String,
    pub op: Op,
    pub inputs: Vec<ValueId>,
    pub output: ValueId,
}

/// One spiking site: the probabilities fed to a sampler and what it emitted.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeSite {
    pub name: String,
    pub probs: ValueId,
    pub spikes: ValueId,
    /// Layer that consumes these spikes.
    pub consumer: Consumer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Consumer {
    SsmConv,
    Mixer,
}

#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor3>,
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input(&mut self, x: Tensor3) -> ValueId {
        self.values.push(x);
        self.values.len() - 1
    }

    pub fn record(&mut self, label: impl Into<String>, op: Op, inputs: Vec<ValueId>, output: Tensor3) -> ValueId {
        debug_assert!(inputs.iter().all(|&i| i < self.values.len()), "inputs must precede the node");
        let id = self.input(output);
        self.nodes.push(Node {
            label: label.into(),
            op,
            inputs,
            output: id,
        });
        id
    }

    pub fn value(&self, id: ValueId) -> &Tensor3 {
        &self.values[id]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Label of the first node whose output holds a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.nodes
            .iter()
            .find(|n| !self.values[n.output].all_finite())
            .map(|n| n.label.as_str())
    }

    /// Batch statistics `(site, mean, var)` of every batch-norm node that used them.
    pub fn batch_norm_stats(&self) -> impl Iterator<Item = (NormSite, &[f64], &[f64])> {
        self.nodes.iter().filter_map(|node| match &node.op {
            Op::Norm { site, cache } if cache.kind == NormKind::Batch && cache.usage == NormUse::Batch => {
                Some((*site, &cache.batch_mean[..], &cache.batch_var[..]))
            }
            _ => None,
        })
    }

    /// Folds the batch statistics of every batch-norm node into the running buffers.
    pub fn update_running_stats(&self, buffers: &mut ModelBuffers) {
        for (site, mean, var) in self.batch_norm_stats() {
            buffers.stats_mut(site).update(mean, var);
        }
    }

    /// Reverse sweep from `∂L/∂value[seed]`. Every node is visited exactly once.
    pub fn backward(&self, params: &ModelParams, seed: ValueId, g_seed: Tensor3) -> Result<BackwardReport, SsmError> {
        let mut grads: Vec<Option<Tensor3>> = (0..self.values.len()).map(|_| None).collect();
        grads[seed] = Some(g_seed);
        let mut pg = params.zeros_like();
        let mut visited = 0usize;
        for node in self.nodes.iter().rev() {
            visited += 1;
            let Some(g) = grads[node.output].take() else {
                continue;
            };
            let input = |i: usize| &self.values[node.inputs[i]];
            match &node.op {
                Op::Decode { readout } => {
                    let (g_in, gw, gb) = decoder_backward(input(0), &params.decoder, *readout, &g);
                    add_to(&mut pg.decoder.w.data, &gw.data);
                    add_to(&mut pg.decoder.bias, &gb);
                    accumulate(&mut grads, node.inputs[0], g_in);
                }
                Op::Squash(s) => {
                    let mut g_in = g;
                    for (gv, &pre) in g_in.data.iter_mut().zip(&input(0).data) {
                        *gv *= s.grad(pre);
                    }
                    accumulate(&mut grads, node.inputs[0], g_in);
                }
                Op::Sample => {
                    accumulate(&mut grads, node.inputs[0], surrogate_spike_grad(&g, input(0)));
                }
                Op::Norm { site, cache } => {
                    let (np, ng) = match site {
                        NormSite::Encoder => (
                            params.encoder_norm.as_ref().expect("encoder norm params"),
                            pg.encoder_norm.as_mut().expect("encoder norm grads"),
                        ),
                        NormSite::Block(k) => (&params.blocks[*k].norm, &mut pg.blocks[*k].norm),
                    };
                    let (g_in, gg, gb) = norm_backward(cache, np, &g);
                    add_to(&mut ng.gamma, &gg);
                    add_to(&mut ng.beta, &gb);
                    accumulate(&mut grads, node.inputs[0], g_in);
                }
                Op::Add => {
                    accumulate(&mut grads, node.inputs[1], g.clone());
                    accumulate(&mut grads, node.inputs[0], g);
                }
                Op::Mixer { block, pre } => {
                    let (g_in, gw) = mixer_backward(input(0), pre, &params.blocks[*block].mixer, &g);
                    add_to(&mut pg.blocks[*block].mixer.w.data, &gw.data);
                    accumulate(&mut grads, node.inputs[0], g_in);
                }
                Op::SsmConv { block, cache } => {
                    let (g_in, g_k) = backward_conv(input(0), cache, &g);
                    for (j, gk) in g_k.iter().enumerate() {
                        let p = &params.blocks[*block].ssm[j];
                        let sg = ssm_param_grad(p, &cache.discrete[j], &cache.kernels[j], gk)?;
                        add_ssm(&mut pg.blocks[*block].ssm[j], &sg);
                    }
                    accumulate(&mut grads, node.inputs[0], g_in);
                }
                Op::EncoderAffine => {
                    let (gw, gb) = encoder_backward(input(0), &g);
                    add_to(&mut pg.encoder.w.data, &gw.data);
                    add_to(&mut pg.encoder.bias, &gb);
                }
            }
        }
        Ok(BackwardReport { grads: pg, visited })
    }
}

fn add_to(acc: &mut [f64], g: &[f64]) {
    for (a, v) in acc.iter_mut().zip(g) {
        *a += v;
    }
}

fn add_ssm(acc: &mut ContinuousSsm, g: &ContinuousSsm) {
    acc.a += &g.a;
    acc.b += &g.b;
    acc.c += &g.c;
    acc.log_delta += g.log_delta;
}

fn accumulate(grads: &mut [Option<Tensor3>], id: ValueId, g: Tensor3) {
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

#[derive(Debug)]
pub struct BackwardReport {
    pub grads: ModelParams,
    pub visited: usize,
}

/// A recorded forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    pub tape: Tape,
    pub logits: ValueId,
    /// Spiking sites in network order: encoder, then per block neurons and output.
    pub sites: Vec<SpikeSite>,
    /// Probabilities handed to the decoder.
    pub final_probs: ValueId,
}

impl ForwardPass {
    pub fn logits(&self) -> &Tensor3 {
        self.tape.value(self.logits)
    }
}

/// Runs the network on `x` (`batch x L x input_dim`) and records every op.
///
/// `example_ids` key the samplers; `seed` selects the noise realisation.
pub fn forward_model(model: &Model, x: &Tensor3, example_ids: &[u64], mode: Mode, seed: u64) -> Result<ForwardPass, LayerError> {
    let cfg = &model.config;
    let params = &model.params;
    if x.time == 0 {
        return Err(LayerError::EmptyTime);
    }
    if example_ids.len() != x.batch {
        return Err(LayerError::shape("example ids", x.batch, example_ids.len()));
    }
    let plan = ConvPlan::new(x.time);
    let mut tape = Tape::new();
    let mut sites = Vec::with_capacity(2 * cfg.num_blocks);
    let x_id = tape.input(x.clone());

    let u = encode_affine(x, &params.encoder)?;
    let mut cur = tape.record("encoder.affine", Op::EncoderAffine, vec![x_id], u);
    if let Some(np) = &params.encoder_norm {
        let (out, cache) = norm_forward(tape.value(cur), cfg.norm, np, &model.buffers.encoder_stats, mode.norm_use())?;
        cur = tape.record(
            "encoder.norm",
            Op::Norm {
                site: NormSite::Encoder,
                cache,
            },
            vec![cur],
            out,
        );
    }
    let p0 = tape.value(cur).map(|v| cfg.squash.apply(v));
    let p0_id = tape.record("encoder.squash", Op::Squash(cfg.squash), vec![cur], p0);
    let s0 = sample_or_expect(
        tape.value(p0_id),
        mode,
        &SampleKey {
            seed,
            site: sampler_site_encoder(),
            example_ids,
        },
    )?;
    let mut input_id = tape.record("encoder.sample", Op::Sample, vec![p0_id], s0);
    sites.push(SpikeSite {
        name: "encoder".into(),
        probs: p0_id,
        spikes: input_id,
        consumer: Consumer::SsmConv,
    });

    let layer = cfg.layer();
    let mut final_probs = input_id;
    for (k, block) in params.blocks.iter().enumerate() {
        let is_last = k + 1 == params.blocks.len();
        let ctx = BlockContext {
            index: k,
            is_last,
            mode,
            seed,
            example_ids,
            squash: cfg.squash,
            plan: &plan,
        };
        let out = s6_block_forward(tape.value(input_id), block, &model.buffers.block_stats[k], &layer, &ctx)?;
        let conv = tape.record(
            format!("blocks.{k}.conv"),
            Op::SsmConv {
                block: k,
                cache: out.conv_cache,
            },
            vec![input_id],
            out.conv_out,
        );
        let np = tape.record(format!("blocks.{k}.neuron_squash"), Op::Squash(cfg.squash), vec![conv], out.neuron_probs);
        let ns = tape.record(format!("blocks.{k}.neuron_sample"), Op::Sample, vec![np], out.neuron_spikes);
        sites.push(SpikeSite {
            name: format!("blocks.{k}.neurons"),
            probs: np,
            spikes: ns,
            consumer: Consumer::Mixer,
        });
        let mix = tape.record(
            format!("blocks.{k}.mixer"),
            Op::Mixer {
                block: k,
                pre: out.mixer_pre,
            },
            vec![ns],
            out.mixer_out,
        );
        let summed = if layer.residual {
            tape.record(format!("blocks.{k}.residual"), Op::Add, vec![mix, input_id], out.summed)
        } else {
            mix
        };
        let normed = tape.record(
            format!("blocks.{k}.norm"),
            Op::Norm {
                site: NormSite::Block(k),
                cache: out.norm_cache,
            },
            vec![summed],
            out.norm_out,
        );
        let probs = tape.record(format!("blocks.{k}.squash"), Op::Squash(cfg.squash), vec![normed], out.probs);
        match out.spikes {
            Some(s) => {
                let sid = tape.record(format!("blocks.{k}.output_sample"), Op::Sample, vec![probs], s);
                sites.push(SpikeSite {
                    name: format!("blocks.{k}.output"),
                    probs,
                    spikes: sid,
                    consumer: Consumer::SsmConv,
                });
                input_id = sid;
            }
            None => final_probs = probs,
        }
    }
    let logits = decode_sequence(tape.value(final_probs), &params.decoder, cfg.readout)?;
    let logits = tape.record("decoder", Op::Decode { readout: cfg.readout }, vec![final_probs], logits);
    Ok(ForwardPass {
        tape,
        logits,
        sites,
        final_probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::encoder::{encode_input, NormSpec};
    use crate::layers::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_visits_each_node_once() {
        let mut cfg = ModelConfig::tiny(3);
        cfg.num_blocks = 2;
        let model = Model::new(cfg, 1);
        let x = Tensor3::filled(2, 10, 1, 0.5);
        let fp = forward_model(&model, &x, &[0, 1], Mode::TrainSample, 7).unwrap();
        // 4 encoder nodes, 8 per non-final block, 7 for the final block, 1 decoder.
        assert_eq!(fp.tape.nodes().len(), 4 + 8 + 7 + 1);
        let report = fp.tape.backward(&model.params, fp.logits, Tensor3::filled(2, 1, 3, 1.0)).unwrap();
        assert_eq!(report.visited, fp.tape.nodes().len());
        assert_eq!(fp.sites.len(), 4);
    }

    #[test]
    fn encoder_nodes_match_encode_input() {
        let cfg = ModelConfig::tiny(2);
        let model = Model::new(cfg, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor3::from_vec(2, 12, 1, (0..24).map(|_| rng.gen::<f64>()).collect());
        let fp = forward_model(&model, &x, &[3, 4], Mode::EvalExpected, 0).unwrap();
        let spec = NormSpec {
            kind: model.config.norm,
            params: model.params.encoder_norm.as_ref().unwrap(),
            stats: &model.buffers.encoder_stats,
            usage: NormUse::Running,
        };
        let p = encode_input(&x, &model.params.encoder, Some(spec), model.config.squash).unwrap();
        assert_eq!(fp.tape.value(fp.sites[0].probs), &p);
    }

    #[test]
    fn running_stats_follow_batch_statistics() {
        let cfg = ModelConfig::tiny(2);
        let mut model = Model::new(cfg, 2);
        let x = Tensor3::filled(1, 8, 1, 1.0);
        let fp = forward_model(&model, &x, &[0], Mode::TrainExpected, 0).unwrap();
        fp.tape.update_running_stats(&mut model.buffers);
        assert_ne!(model.buffers.block_stats[0].var, vec![1.0; 4]);
    }
}
