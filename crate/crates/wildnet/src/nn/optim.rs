//! Optimizers over named flat parameter tensors. State is keyed by tensor
//! name so it survives checkpointing; updates run in the caller's visit
//! order, which the network keeps fixed.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const MODULE: &str = "optim";

/// Momentum SGD with decoupled-into-gradient weight decay:
/// `v ← m·v + (g + wd·w)`, `w ← w − lr·v`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SgdConfig {
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// Adam with weight decay added to the gradient.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd(SgdConfig),
    Adam(AdamConfig),
}

#[derive(Debug, Clone)]
enum Slot {
    Sgd { velocity: Vec<f32> },
    Adam { m: Vec<f32>, v: Vec<f32> },
}

/// Stateful optimizer. Call [`Optimizer::update`] once per parameter tensor
/// per step, then [`Optimizer::end_step`].
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    slots: HashMap<String, Slot>,
    /// Completed steps; drives Adam bias correction.
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            slots: HashMap::new(),
            t: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Apply one update to a named tensor using its accumulated gradient.
    pub fn update(&mut self, name: &str, lr: f32, values: &mut [f32], grads: &[f32]) -> Result<()> {
        if values.len() != grads.len() {
            return Err(Error::Shape {
                module: MODULE,
                details: format!(
                    "parameter {name}: {} values but {} gradients",
                    values.len(),
                    grads.len()
                ),
            });
        }
        match self.kind {
            OptimizerKind::Sgd(cfg) => {
                let slot = self.slots.entry(name.to_string()).or_insert_with(|| Slot::Sgd {
                    velocity: vec![0.0; values.len()],
                });
                let Slot::Sgd { velocity } = slot else {
                    return Err(Error::Parameter {
                        module: MODULE,
                        details: format!("parameter {name} has state from a different optimizer"),
                    });
                };
                for i in 0..values.len() {
                    let g = grads[i] + cfg.weight_decay * values[i];
                    velocity[i] = cfg.momentum * velocity[i] + g;
                    values[i] -= lr * velocity[i];
                }
            }
            OptimizerKind::Adam(cfg) => {
                let slot = self.slots.entry(name.to_string()).or_insert_with(|| Slot::Adam {
                    m: vec![0.0; values.len()],
                    v: vec![0.0; values.len()],
                });
                let Slot::Adam { m, v } = slot else {
                    return Err(Error::Parameter {
                        module: MODULE,
                        details: format!("parameter {name} has state from a different optimizer"),
                    });
                };
                let t = (self.t + 1) as i32;
                let bc1 = 1.0 - cfg.beta1.powi(t);
                let bc2 = 1.0 - cfg.beta2.powi(t);
                for i in 0..values.len() {
                    let g = grads[i] + cfg.weight_decay * values[i];
                    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    values[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
                }
            }
        }
        Ok(())
    }

    /// Mark the step complete (advances Adam's bias-correction clock).
    pub fn end_step(&mut self) {
        self.t += 1;
    }

    /// Serialize state as `(name, buffers)` pairs in the given name order.
    pub fn export_state(&self, order: &[String]) -> Vec<(String, Vec<Vec<f32>>)> {
        order
            .iter()
            .filter_map(|name| {
                self.slots.get(name).map(|slot| {
                    let bufs = match slot {
                        Slot::Sgd { velocity } => vec![velocity.clone()],
                        Slot::Adam { m, v } => vec![m.clone(), v.clone()],
                    };
                    (name.clone(), bufs)
                })
            })
            .collect()
    }

    /// Restore state exported by [`Optimizer::export_state`].
    pub fn import_state(&mut self, t: u64, state: Vec<(String, Vec<Vec<f32>>)>) -> Result<()> {
        self.t = t;
        self.slots.clear();
        for (name, mut bufs) in state {
            let slot = match (self.kind, bufs.len()) {
                (OptimizerKind::Sgd(_), 1) => Slot::Sgd {
                    velocity: bufs.pop().unwrap(),
                },
                (OptimizerKind::Adam(_), 2) => {
                    let v = bufs.pop().unwrap();
                    let m = bufs.pop().unwrap();
                    Slot::Adam { m, v }
                }
                _ => {
                    return Err(Error::Format {
                        module: MODULE,
                        details: format!(
                            "optimizer state for {name} has {} buffers, incompatible with the configured optimizer",
                            bufs.len()
                        ),
                    })
                }
            };
            self.slots.insert(name, slot);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sgd_first_step_is_plain_descent_plus_decay() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd(SgdConfig {
            momentum: 0.9,
            weight_decay: 0.0,
        }));
        let mut w = vec![1.0f32, -2.0];
        opt.update("p", 0.1, &mut w, &[0.5, -1.0]).unwrap();
        opt.end_step();
        assert_relative_eq!(w[0], 1.0 - 0.1 * 0.5, epsilon = 1e-7);
        assert_relative_eq!(w[1], -2.0 + 0.1, epsilon = 1e-7);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd(SgdConfig {
            momentum: 0.5,
            weight_decay: 0.0,
        }));
        let mut w = vec![0.0f32];
        opt.update("p", 1.0, &mut w, &[1.0]).unwrap();
        opt.end_step();
        // v = 1, w = -1
        opt.update("p", 1.0, &mut w, &[1.0]).unwrap();
        opt.end_step();
        // v = 0.5 + 1 = 1.5, w = -2.5
        assert_relative_eq!(w[0], -2.5, epsilon = 1e-6);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd(SgdConfig {
            momentum: 0.0,
            weight_decay: 0.1,
        }));
        let mut w = vec![2.0f32];
        opt.update("p", 0.5, &mut w, &[0.0]).unwrap();
        opt.end_step();
        assert_relative_eq!(w[0], 2.0 - 0.5 * 0.2, epsilon = 1e-6);
    }

    #[test]
    fn adam_first_step_size_is_lr() {
        // with bias correction, a constant gradient moves w by ~lr at step 1
        let mut opt = Optimizer::new(OptimizerKind::Adam(AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        }));
        let mut w = vec![1.0f32];
        opt.update("p", 0.01, &mut w, &[0.3]).unwrap();
        opt.end_step();
        assert_relative_eq!(w[0], 1.0 - 0.01, epsilon = 1e-4);
    }

    #[test]
    fn state_round_trip_preserves_trajectory() {
        let kind = OptimizerKind::Sgd(SgdConfig::default());
        let mut a = Optimizer::new(kind);
        let mut wa = vec![1.0f32, 2.0];
        for i in 0..5 {
            let g = [0.1 * i as f32, -0.2];
            a.update("p", 0.05, &mut wa, &g).unwrap();
            a.end_step();
        }
        let order = vec!["p".to_string()];
        let state = a.export_state(&order);
        let t = a.steps();

        let mut b = Optimizer::new(kind);
        b.import_state(t, state).unwrap();
        let mut wb = wa.clone();
        for i in 5..8 {
            let g = [0.1 * i as f32, -0.2];
            a.update("p", 0.05, &mut wa, &g).unwrap();
            a.end_step();
            b.update("p", 0.05, &mut wb, &g).unwrap();
            b.end_step();
        }
        assert_eq!(wa, wb);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd(SgdConfig::default()));
        let mut w = vec![0.0f32; 3];
        assert!(opt.update("p", 0.1, &mut w, &[0.0; 2]).is_err());
    }
}
