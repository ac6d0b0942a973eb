//! Adam with decoupled weight decay and a cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::layers::ModelParams;
use crate::ssm::{DELTA_MAX, DELTA_MIN};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Multiplier on the learning rate of SSM leaves (`A`, `B`, `C`, `log Δ`).
    #[serde(default = "default_one")]
    pub ssm_lr_scale: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Final learning rate as a fraction of `lr`.
    #[serde(default)]
    pub min_lr_ratio: f64,
    #[serde(default)]
    pub warmup_steps: u64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

fn default_one() -> f64 {
    1.0
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
            ssm_lr_scale: 1.0,
            grad_clip: None,
            min_lr_ratio: 0.0,
            warmup_steps: 0,
        }
    }
}

/// Linear warmup, then cosine decay from `lr` to `lr·min_lr_ratio` over `total_steps`.
pub fn cosine_lr(cfg: &AdamConfig, step: u64, total_steps: u64) -> f64 {
    if cfg.warmup_steps > 0 && step < cfg.warmup_steps {
        return cfg.lr * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(cfg.warmup_steps).max(1);
    let t = (step.saturating_sub(cfg.warmup_steps) as f64 / span as f64).min(1.0);
    let floor = cfg.lr * cfg.min_lr_ratio;
    floor + (cfg.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

fn is_ssm_leaf(name: &str) -> bool {
    name.contains(".ssm.")
}

fn decays(name: &str) -> bool {
    name.ends_with(".w")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub total_steps: u64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &ModelParams, total_steps: u64) -> Self {
        let shapes: Vec<usize> = params.leaves().iter().map(|(_, l)| l.len()).collect();
        Self {
            config,
            total_steps,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(&self.config, self.step, self.total_steps)
    }

    /// One update. Returns the pre-clip global gradient norm.
    pub fn update(&mut self, params: &mut ModelParams, grads: &ModelParams) -> f64 {
        let cfg = self.config;
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let g_leaves = grads.leaves();
        let norm = g_leaves
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let clip = match cfg.grad_clip {
            Some(c) if norm > c && norm > 0.0 => c / norm,
            _ => 1.0,
        };
        for (i, ((name, p), (_, g))) in params.leaves_mut().into_iter().zip(g_leaves).enumerate() {
            let leaf_lr = if is_ssm_leaf(&name) { lr * cfg.ssm_lr_scale } else { lr };
            let wd = if decays(&name) { cfg.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g[j] * clip;
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= leaf_lr * (mh / (vh.sqrt() + cfg.eps) + wd * p[j]);
            }
            if name.ends_with(".log_delta") {
                p[0] = p[0].clamp(DELTA_MIN.ln(), DELTA_MAX.ln());
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::ModelConfig;

    #[test]
    fn cosine_endpoints() {
        let cfg = AdamConfig::with_lr(0.1);
        assert!((cosine_lr(&cfg, 0, 100) - 0.1).abs() < 1e-15);
        assert!((cosine_lr(&cfg, 50, 100) - 0.05).abs() < 1e-12);
        assert!(cosine_lr(&cfg, 100, 100).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let cfg = ModelConfig::tiny(2);
        let mut p = ModelParams::init(&cfg, 0);
        let before = p.clone();
        let mut g = p.zeros_like();
        for (_, l) in g.leaves_mut() {
            l.iter_mut().for_each(|v| *v = 0.3);
        }
        let mut opt = OptimizerState::new(AdamConfig::with_lr(0.0), &p, 10);
        opt.update(&mut p, &g);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // Bias-corrected Adam's first step is lr·sign(g).
        let cfg = ModelConfig::tiny(2);
        let mut p = ModelParams::init(&cfg, 0);
        let before = p.clone();
        let mut g = p.zeros_like();
        g.decoder.bias[0] = 5.0;
        g.decoder.bias[1] = -2.0;
        let mut opt = OptimizerState::new(AdamConfig::with_lr(0.01), &p, 1000);
        opt.update(&mut p, &g);
        assert!((before.decoder.bias[0] - p.decoder.bias[0] - 0.01).abs() < 1e-9);
        assert!((p.decoder.bias[1] - before.decoder.bias[1] - 0.01).abs() < 1e-9);
        assert_eq!(p.encoder, before.encoder);
    }

    #[test]
    fn log_delta_stays_in_range() {
        let cfg = ModelConfig::tiny(2);
        let mut p = ModelParams::init(&cfg, 0);
        let mut g = p.zeros_like();
        for s in g.blocks[0].ssm.iter_mut() {
            s.log_delta = -1.0;
        }
        let mut opt = OptimizerState::new(AdamConfig::with_lr(10.0), &p, 1000);
        opt.update(&mut p, &g);
        for s in &p.blocks[0].ssm {
            assert!((s.log_delta - DELTA_MAX.ln()).abs() < 1e-12);
        }
    }
}
