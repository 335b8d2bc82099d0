//! Learning-rate schedule, staged unfreezing and early stopping.

use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::Float;

use crate::models::Classifier;
use crate::tensor::{LrGroup, ParameterRegistry};
use crate::Scalar;

/// `η_max · ½ (1 + cos(π · min(t, T) / T))`, annealing to zero.
pub fn cosine_lr(t: usize, eta_max: f64, t_max: usize) -> f64 {
    if t_max == 0 {
        return eta_max;
    }
    let frac = t.min(t_max) as f64 / t_max as f64;
    0.5 * eta_max * (1.0 + (PI * frac).cos())
}

/// Releases the blocks scheduled at or before `epoch`. Returns the number of
/// scalars that became trainable; re-applying the same epoch releases nothing.
pub fn apply_unfreeze_schedule<S: Scalar>(epoch: usize, model: &Classifier, reg: &mut ParameterRegistry<S>, schedule: &[(usize, usize)]) -> usize {
    let mut released = 0;
    for &(at, blocks) in schedule {
        if at <= epoch {
            for prefix in model.unfreeze_targets(blocks) {
                released += reg.unfreeze_prefix(&prefix, LrGroup::Unfrozen);
            }
        }
    }
    released
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// `Stop` once the first minimum of `history` is more than `patience`
/// entries behind the latest one.
pub fn early_stop_check(history: &[f64], patience: usize) -> StopDecision {
    let Some(best) = best_index(history) else {
        return StopDecision::Continue;
    };
    if history.len() - 1 - best > patience {
        StopDecision::Stop
    } else {
        StopDecision::Continue
    }
}

/// Index of the first minimum (NaN never wins).
pub fn best_index(history: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in history.iter().enumerate() {
        match best {
            Some(b) if !(v < history[b]) => {}
            _ if v.is_nan() => {}
            _ => best = Some(i),
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelKind, ModelSpec};
    use alloc::vec;

    #[test]
    fn cosine_values() {
        assert_eq!(cosine_lr(0, 1e-4, 50), 1e-4);
        assert_eq!(cosine_lr(25, 1e-4, 50), 5e-5);
        assert_eq!(cosine_lr(50, 1e-4, 50), 0.0);
        assert_eq!(cosine_lr(80, 1e-4, 50), 0.0);
        let mut prev = f64::INFINITY;
        for t in 0..=50 {
            let lr = cosine_lr(t, 1e-4, 50);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn early_stopping_examples() {
        let decreasing: vec::Vec<f64> = (0..12).map(|i| 1.0 / (i as f64 + 1.0)).collect();
        assert_eq!(early_stop_check(&decreasing, 5), StopDecision::Continue);
        let mut h = vec![0.9, 0.8, 0.7, 0.5, 0.6, 0.6, 0.7, 0.6, 0.55];
        assert_eq!(early_stop_check(&h, 5), StopDecision::Continue);
        h.push(0.51);
        assert_eq!(early_stop_check(&h, 5), StopDecision::Stop);
        // ties keep the earlier minimum
        assert_eq!(best_index(&[1.0, 0.5, 0.5]), Some(1));
        assert_eq!(best_index(&[f64::NAN, 0.5]), Some(1));
    }

    #[test]
    fn unfreeze_bookkeeping() {
        let spec = ModelSpec::new(ModelKind::Vit, 32);
        let mut reg = ParameterRegistry::<f32>::new();
        let model = Classifier::build(&spec, &mut reg, 0).unwrap();
        model.freeze_backbones(&mut reg);
        let schedule = [(5, 1), (8, 2)];
        let block = |i: usize| reg.count_with_prefix(&alloc::format!("vit0.blocks.{i}."));
        let (b2, b3) = (block(2), block(3));
        let base = reg.trainable_count();
        assert_eq!(apply_unfreeze_schedule(4, &model, &mut reg, &schedule), 0);
        assert_eq!(apply_unfreeze_schedule(5, &model, &mut reg, &schedule), b3);
        assert_eq!(reg.trainable_count(), base + b3);
        assert_eq!(apply_unfreeze_schedule(5, &model, &mut reg, &schedule), 0);
        assert_eq!(apply_unfreeze_schedule(8, &model, &mut reg, &schedule), b2);
        assert_eq!(reg.trainable_count(), base + b2 + b3);
        assert_eq!(apply_unfreeze_schedule(9, &model, &mut reg, &schedule), 0);
    }
}
