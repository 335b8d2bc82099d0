//! First-order optimizers over a [`ParameterRegistry`].

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::tensor::{LrGroup, ParameterRegistry};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    /// Adam with decoupled weight decay.
    AdamW,
    /// Adam with L2 decay added to the gradient.
    Adam,
    /// RMSprop with L2 decay added to the gradient.
    RmsProp,
    /// Sign-momentum update with decoupled weight decay.
    Lion,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 4] = [OptimizerKind::Adam, OptimizerKind::AdamW, OptimizerKind::RmsProp, OptimizerKind::Lion];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::Adam => "adam",
            OptimizerKind::RmsProp => "rmsprop",
            OptimizerKind::Lion => "lion",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConstants {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub rms_alpha: f64,
    pub lion_beta1: f64,
    pub lion_beta2: f64,
}

impl Default for OptimizerConstants {
    fn default() -> Self {
        OptimizerConstants {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            rms_alpha: 0.99,
            lion_beta1: 0.9,
            lion_beta2: 0.99,
        }
    }
}

#[derive(Clone, Debug)]
struct Slot<S> {
    m: Vec<S>,
    v: Vec<S>,
    t: u64,
}

/// Optimizer state, one slot per registered parameter. A slot is created the
/// first time its parameter is trainable at a step, so blocks released later
/// start with fresh moments and their own bias-correction counter.
#[derive(Clone, Debug)]
pub struct Optimizer<S> {
    pub kind: OptimizerKind,
    pub constants: OptimizerConstants,
    slots: Vec<Option<Slot<S>>>,
}

/// Learning rates for the two parameter groups.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupLr {
    pub head: f64,
    pub unfrozen: f64,
}

impl GroupLr {
    pub fn uniform(lr: f64) -> Self {
        GroupLr { head: lr, unfrozen: lr }
    }
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(kind: OptimizerKind) -> Self {
        Self::with_constants(kind, OptimizerConstants::default())
    }

    pub fn with_constants(kind: OptimizerKind, constants: OptimizerConstants) -> Self {
        Optimizer {
            kind,
            constants,
            slots: Vec::new(),
        }
    }

    /// Number of parameters that currently hold optimizer state.
    pub fn tracked(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    /// One update of every trainable parameter from its accumulated gradient.
    pub fn step(&mut self, reg: &mut ParameterRegistry<S>, lr: GroupLr, weight_decay: f64) {
        if self.slots.len() < reg.len() {
            self.slots.resize_with(reg.len(), || None);
        }
        let c = self.constants;
        for (id, p) in reg.iter_mut() {
            if !p.trainable {
                continue;
            }
            let n = p.value.len();
            let slot = self.slots[id.index()].get_or_insert_with(|| Slot {
                m: vec![S::zero(); n],
                v: vec![S::zero(); n],
                t: 0,
            });
            slot.t += 1;
            let lr = match p.group {
                LrGroup::Head => lr.head,
                LrGroup::Unfrozen => lr.unfrozen,
            };
            let (lr_s, wd) = (S::from_f64(lr), S::from_f64(weight_decay));
            let one = S::one();
            let grad = p.grad.data();
            let value = p.value.data_mut();
            match self.kind {
                OptimizerKind::AdamW | OptimizerKind::Adam => {
                    let (b1, b2) = (S::from_f64(c.beta1), S::from_f64(c.beta2));
                    let bc1 = S::from_f64(1.0 - c.beta1.powi(slot.t as i32));
                    let bc2 = S::from_f64(1.0 - c.beta2.powi(slot.t as i32));
                    let eps = S::from_f64(c.eps);
                    let decoupled = self.kind == OptimizerKind::AdamW;
                    for i in 0..n {
                        let g = if decoupled { grad[i] } else { grad[i] + wd * value[i] };
                        slot.m[i] = b1 * slot.m[i] + (one - b1) * g;
                        slot.v[i] = b2 * slot.v[i] + (one - b2) * g * g;
                        let update = (slot.m[i] / bc1) / ((slot.v[i] / bc2).sqrt() + eps);
                        if decoupled {
                            value[i] *= one - lr_s * wd;
                        }
                        value[i] -= lr_s * update;
                    }
                }
                OptimizerKind::RmsProp => {
                    let alpha = S::from_f64(c.rms_alpha);
                    let eps = S::from_f64(c.eps);
                    for i in 0..n {
                        let g = grad[i] + wd * value[i];
                        slot.v[i] = alpha * slot.v[i] + (one - alpha) * g * g;
                        value[i] -= lr_s * g / (slot.v[i].sqrt() + eps);
                    }
                }
                OptimizerKind::Lion => {
                    let (b1, b2) = (S::from_f64(c.lion_beta1), S::from_f64(c.lion_beta2));
                    for i in 0..n {
                        let g = grad[i];
                        let interp = b1 * slot.m[i] + (one - b1) * g;
                        let sign = if interp > S::zero() {
                            one
                        } else if interp < S::zero() {
                            -one
                        } else {
                            S::zero()
                        };
                        value[i] *= one - lr_s * wd;
                        value[i] -= lr_s * sign;
                        slot.m[i] = b2 * slot.m[i] + (one - b2) * g;
                    }
                }
            }
        }
    }
}
