//! Optimizers over the flat parameter view.

use serde::{Deserialize, Serialize};

use crate::reader::ReaderParams;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// SGD momentum, or Adam's first-moment decay.
    pub momentum: f64,
    /// Adam's second-moment decay.
    pub beta2: f64,
    pub warmup_steps: usize,
    /// Rescale the gradient when its global norm exceeds this; 0 disables.
    pub clip_norm: f64,
    /// Decay the rate linearly towards zero over the stage.
    pub linear_decay: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr: 0.05,
            momentum: 0.9,
            beta2: 0.999,
            warmup_steps: 100,
            clip_norm: 1.0,
            linear_decay: false,
        }
    }
}

pub struct Optimizer {
    cfg: OptimConfig,
    step: usize,
    horizon: usize,
    m: ReaderParams,
    v: Option<ReaderParams>,
}

impl Optimizer {
    pub fn new(cfg: OptimConfig, like: &ReaderParams) -> Self {
        let v = (cfg.kind == OptimizerKind::Adam).then(|| like.zeros_like());
        Self {
            cfg,
            step: 0,
            horizon: 0,
            m: like.zeros_like(),
            v,
        }
    }

    /// Number of steps the decay runs over.
    pub fn with_horizon(mut self, steps: usize) -> Self {
        self.horizon = steps;
        self
    }

    /// Learning rate at the next step: linear warmup, then constant or
    /// linearly decaying to zero at the horizon.
    pub fn current_lr(&self) -> f64 {
        let w = self.cfg.warmup_steps;
        let warm = if w == 0 { 1.0 } else { ((self.step + 1) as f64 / w as f64).min(1.0) };
        let decay = if self.cfg.linear_decay && self.horizon > 0 {
            (self.horizon.saturating_sub(self.step)) as f64 / self.horizon as f64
        } else {
            1.0
        };
        self.cfg.lr * warm * decay
    }

    /// One update from `grad` (already averaged over the batch). Returns the
    /// gradient norm before clipping.
    pub fn step(&mut self, params: &mut ReaderParams, grad: &mut ReaderParams) -> f64 {
        let norm = grad.dot(grad).sqrt();
        if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            let s = self.cfg.clip_norm / norm;
            for t in grad.tensors_mut() {
                t.iter_mut().for_each(|v| *v *= s);
            }
        }
        let lr = self.current_lr();
        self.step += 1;
        let mu = self.cfg.momentum;
        let grads = grad.tensors();
        match &mut self.v {
            None => {
                for ((p, m), (_, g)) in params.tensors_mut().into_iter().zip(self.m.tensors_mut()).zip(grads) {
                    for ((p, m), g) in p.iter_mut().zip(m.iter_mut()).zip(g) {
                        *m = mu * *m + g;
                        *p -= lr * *m;
                    }
                }
            }
            Some(v) => {
                let b2 = self.cfg.beta2;
                let t = self.step as i32;
                let c1 = 1.0 - mu.powi(t);
                let c2 = 1.0 - b2.powi(t);
                let layers = params.tensors_mut().into_iter().zip(self.m.tensors_mut()).zip(v.tensors_mut());
                for (((p, m), v), (_, g)) in layers.zip(grads) {
                    for (((p, m), v), g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                        *m = mu * *m + (1.0 - mu) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + 1e-8);
                    }
                }
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reader::ReaderConfig;

    fn params() -> ReaderParams {
        ReaderParams::init(&ReaderConfig { d: 4, heads: 2, d_ff: 4, vocab_size: 6, ..Default::default() })
    }

    #[test]
    fn warmup_is_linear() {
        let p = params();
        let mut opt = Optimizer::new(OptimConfig { warmup_steps: 4, lr: 1.0, ..Default::default() }, &p);
        let mut lrs = Vec::new();
        let mut q = p.clone();
        for _ in 0..5 {
            lrs.push(opt.current_lr());
            opt.step(&mut q, &mut p.zeros_like());
        }
        assert_eq!(lrs, vec![0.25, 0.5, 0.75, 1.0, 1.0]);
    }

    #[test]
    fn linear_decay_reaches_zero_at_the_horizon() {
        let p = params();
        let cfg = OptimConfig { warmup_steps: 0, lr: 1.0, linear_decay: true, ..Default::default() };
        let mut opt = Optimizer::new(cfg, &p).with_horizon(4);
        let mut lrs = Vec::new();
        let mut q = p.clone();
        for _ in 0..5 {
            lrs.push(opt.current_lr());
            opt.step(&mut q, &mut p.zeros_like());
        }
        assert_eq!(lrs, vec![1.0, 0.75, 0.5, 0.25, 0.0]);
    }

    #[test]
    fn both_kinds_descend_a_quadratic() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let cfg = OptimConfig { kind, lr: 0.01, warmup_steps: 0, clip_norm: 0.0, ..Default::default() };
            let mut p = params();
            let mut opt = Optimizer::new(cfg, &p);
            let start = p.dot(&p);
            for _ in 0..50 {
                // gradient of |p|^2 / 2
                let mut g = p.clone();
                opt.step(&mut p, &mut g);
            }
            assert!(p.dot(&p) < 0.5 * start, "{kind:?}");
        }
    }
}
