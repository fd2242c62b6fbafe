//! Gradient-descent updates over a [`ParamStore`].

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    /// Adam with bias correction.
    Adam { lr: f32, beta1: f32, beta2: f32, eps: f32 },
    /// Plain stochastic gradient descent.
    Sgd { lr: f32 },
}

impl OptimizerKind {
    pub fn adam(lr: f32) -> Self {
        OptimizerKind::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn lr(&self) -> f32 {
        match self {
            OptimizerKind::Adam { lr, .. } => *lr,
            OptimizerKind::Sgd { lr } => *lr,
        }
    }
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::adam(1e-4)
    }
}

#[derive(Debug, Clone, Default)]
struct AdamSlot {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Per-store optimizer state (first/second moment estimates, step count).
#[derive(Debug, Default)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    slots: BTreeMap<String, AdamSlot>,
    step: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer { kind, slots: BTreeMap::new(), step: 0 }
    }

    /// Applies one update. `grads` must cover exactly the trainable entries
    /// of the store: a gradient for an unknown or frozen entry is an error,
    /// as is a missing gradient for a trainable one. Any non-finite gradient
    /// aborts before touching the store, naming the parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Vec<f32>>) -> Result<()> {
        let trainable = store.trainable_names();
        for name in grads.keys() {
            if !store.is_trainable(name) {
                return Err(if store.get(name).is_ok() {
                    CoreError::invalid("optimizer_step", format!("gradient for frozen entry `{}`", name))
                } else {
                    CoreError::UnknownParam(name.clone())
                });
            }
        }
        for name in &trainable {
            let g = grads.get(name).ok_or_else(|| {
                CoreError::invalid("optimizer_step", format!("missing gradient for trainable `{}`", name))
            })?;
            let value = store.get(name)?;
            if g.len() != value.len() {
                return Err(CoreError::shape(
                    "optimizer_step",
                    format!("gradient for `{}` has {} entries, parameter has {}", name, g.len(), value.len()),
                ));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(CoreError::NonFinite {
                    context: format!("gradient (flat index {})", i),
                    name: name.clone(),
                });
            }
        }
        self.step += 1;
        let t = self.step;
        for name in &trainable {
            let g = &grads[name];
            match self.kind {
                OptimizerKind::Sgd { lr } => {
                    let value = store.get_mut(name)?;
                    for (p, &gv) in value.data.iter_mut().zip(g.iter()) {
                        *p -= lr * gv;
                    }
                }
                OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                    let slot = self.slots.entry(name.clone()).or_default();
                    if slot.m.is_empty() {
                        slot.m = vec![0.0; g.len()];
                        slot.v = vec![0.0; g.len()];
                    }
                    let bc1 = 1.0 - beta1.powi(t as i32);
                    let bc2 = 1.0 - beta2.powi(t as i32);
                    let value = store.get_mut(name)?;
                    for i in 0..g.len() {
                        let gv = g[i];
                        slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * gv;
                        slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * gv * gv;
                        let mhat = slot.m[i] / bc1;
                        let vhat = slot.v[i] / bc2;
                        value.data[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
