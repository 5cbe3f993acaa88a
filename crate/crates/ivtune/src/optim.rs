//! SGD, Adam and AdamW over a [`ParamStore`].
//!
//! Updates walk the store in insertion order, so trajectories are
//! deterministic. Moment buffers exist only for trainable parameters and
//! only once a gradient has actually arrived for them.

use crate::config::{OptimizerKind, TrainConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use std::collections::HashMap;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer state: hyperparameters, step counter and per-parameter
/// moment buffers (Adam/AdamW only).
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        Optimizer {
            kind,
            lr,
            weight_decay,
            step_count: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.optimizer, cfg.lr, cfg.weight_decay)
    }

    /// Apply one update. Every gradient must belong to a trainable
    /// parameter; a gradient for a frozen parameter is a freeze violation
    /// and aborts before touching anything.
    pub fn step(&mut self, store: &mut ParamStore, grads: &HashMap<String, Tensor>) -> Result<()> {
        for name in grads.keys() {
            match store.by_name(name) {
                None => return Err(Error::UnknownParameter(name.clone())),
                Some(p) if !p.trainable => return Err(Error::FreezeViolation(name.clone())),
                Some(p) => {
                    let g = &grads[name];
                    if g.shape() != p.tensor.shape() {
                        return Err(Error::Shape {
                            op: "optimizer_step",
                            detail: format!(
                                "gradient shape {:?} vs parameter {:?} for `{name}`",
                                g.shape(),
                                p.tensor.shape()
                            ),
                        });
                    }
                }
            }
        }
        self.step_count += 1;
        let t = self.step_count;
        let (lr, wd) = (self.lr, self.weight_decay);
        for p in store.iter_mut() {
            let Some(grad) = grads.get(&p.name) else { continue };
            let g = grad.data();
            let x = p.tensor.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (xi, gi) in x.iter_mut().zip(g) {
                        *xi -= lr * (gi + wd * *xi);
                    }
                }
                OptimizerKind::Adam | OptimizerKind::AdamW => {
                    let decoupled = self.kind == OptimizerKind::AdamW;
                    let m = self
                        .m
                        .entry(p.name.clone())
                        .or_insert_with(|| vec![0.0; g.len()]);
                    let v = self
                        .v
                        .entry(p.name.clone())
                        .or_insert_with(|| vec![0.0; g.len()]);
                    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
                    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
                    for i in 0..g.len() {
                        let gi = if decoupled {
                            // Decoupled decay shrinks the weight first.
                            x[i] -= lr * wd * x[i];
                            g[i]
                        } else {
                            g[i] + wd * x[i]
                        };
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        x[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }

    /// Moment buffers in the given name order, for checkpointing.
    pub fn moments(&self) -> (&HashMap<String, Vec<f64>>, &HashMap<String, Vec<f64>>) {
        (&self.m, &self.v)
    }

    /// Restore moment buffers (checkpoint load).
    pub fn restore(&mut self, step_count: u64, m: HashMap<String, Vec<f64>>, v: HashMap<String, Vec<f64>>) {
        self.step_count = step_count;
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn store_one(x: f64, trainable: bool) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(x), trainable);
        s
    }

    fn grad_one(g: f64) -> HashMap<String, Tensor> {
        let mut m = HashMap::new();
        m.insert("p".to_string(), Tensor::scalar(g));
        m
    }

    #[test]
    fn sgd_matches_hand_computation() {
        // x=1, g=0.5, lr=0.1, wd=0 -> 0.95
        let mut s = store_one(1.0, true);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, 0.0);
        opt.step(&mut s, &grad_one(0.5)).unwrap();
        assert_relative_eq!(s.by_name("p").unwrap().tensor.item(), 0.95, max_relative = 1e-15);
    }

    #[test]
    fn sgd_weight_decay_enters_the_gradient() {
        let mut s = store_one(2.0, true);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, 0.5);
        opt.step(&mut s, &grad_one(0.0)).unwrap();
        // x <- x - lr*(0 + 0.5*2) = 2 - 0.1 = 1.9
        assert_relative_eq!(s.by_name("p").unwrap().tensor.item(), 1.9, max_relative = 1e-15);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        // At t=1 the bias-corrected update is lr·g/(|g| + eps'): close to
        // lr·sign(g).
        let mut s = store_one(0.3, true);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01, 0.0);
        let g = 0.004;
        opt.step(&mut s, &grad_one(g)).unwrap();
        let m1 = (1.0 - ADAM_BETA1) * g / (1.0 - ADAM_BETA1);
        let v1 = ((1.0 - ADAM_BETA2) * g * g / (1.0 - ADAM_BETA2)).sqrt();
        let want = 0.3 - 0.01 * m1 / (v1 + ADAM_EPS);
        assert_relative_eq!(s.by_name("p").unwrap().tensor.item(), want, max_relative = 1e-12);
        assert_relative_eq!(
            s.by_name("p").unwrap().tensor.item(),
            0.3 - 0.01,
            epsilon = 1e-5
        );
    }

    #[test]
    fn adamw_with_zero_decay_equals_adam() {
        let mut sa = store_one(0.7, true);
        let mut sw = store_one(0.7, true);
        let mut oa = Optimizer::new(OptimizerKind::Adam, 0.05, 0.0);
        let mut ow = Optimizer::new(OptimizerKind::AdamW, 0.05, 0.0);
        for i in 0..25 {
            let g = grad_one(0.1 * ((i as f64) * 0.7).sin());
            oa.step(&mut sa, &g).unwrap();
            ow.step(&mut sw, &g).unwrap();
        }
        assert_eq!(
            sa.by_name("p").unwrap().tensor.item().to_bits(),
            sw.by_name("p").unwrap().tensor.item().to_bits()
        );
    }

    #[test]
    fn frozen_parameter_gradient_is_a_hard_error() {
        let mut s = store_one(1.0, false);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, 0.0);
        let err = opt.step(&mut s, &grad_one(1.0)).unwrap_err();
        assert!(matches!(err, Error::FreezeViolation(_)));
        // Untouched.
        assert_eq!(s.by_name("p").unwrap().tensor.item(), 1.0);
    }

    #[test]
    fn frozen_parameters_never_move() {
        let mut s = ParamStore::new();
        s.insert("train", Tensor::scalar(1.0), true);
        s.insert("frozen", Tensor::scalar(std::f64::consts::PI), false);
        let before = s.by_name("frozen").unwrap().tensor.item().to_bits();
        let mut opt = Optimizer::new(OptimizerKind::AdamW, 0.01, 0.1);
        for _ in 0..50 {
            let mut g = HashMap::new();
            g.insert("train".to_string(), Tensor::scalar(0.5));
            opt.step(&mut s, &g).unwrap();
        }
        assert_eq!(s.by_name("frozen").unwrap().tensor.item().to_bits(), before);
    }

    #[test]
    fn moments_exist_only_for_updated_parameters() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::scalar(1.0), true);
        s.insert("b", Tensor::scalar(1.0), true);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01, 0.0);
        let mut g = HashMap::new();
        g.insert("a".to_string(), Tensor::scalar(0.1));
        opt.step(&mut s, &g).unwrap();
        let (m, _) = opt.moments();
        assert!(m.contains_key("a"));
        assert!(!m.contains_key("b"));
    }
}
