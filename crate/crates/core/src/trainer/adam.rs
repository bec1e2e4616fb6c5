//! Adam with decoupled weight decay and a warmup + linear-decay learning
//! rate.

use std::collections::HashMap;

use super::params::ParamStore;
use crate::Result;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Per-parameter step count; parameters created mid-run start fresh.
    pub t: u64,
}

/// Optimizer moments keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub slots: HashMap<String, AdamSlot>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One AdamW step over every parameter that has a gradient. Bias-corrected
/// moments, decoupled weight decay applied as `θ -= lr·wd·θ`. Gradient
/// clipping is disabled (a clip norm of 0.0 means no clipping).
pub fn adam_step(
    params: &mut ParamStore,
    grads: &HashMap<String, Vec<f64>>,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    for entry in params.iter_mut() {
        let Some(g) = grads.get(&entry.name) else { continue };
        debug_assert_eq!(g.len(), entry.data.len());
        let slot = state.slots.entry(entry.name.clone()).or_default();
        if slot.m.is_empty() {
            slot.m = vec![0.0; entry.data.len()];
            slot.v = vec![0.0; entry.data.len()];
        }
        slot.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(slot.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(slot.t as i32);
        for i in 0..entry.data.len() {
            slot.m[i] = ADAM_BETA1 * slot.m[i] + (1.0 - ADAM_BETA1) * g[i];
            slot.v[i] = ADAM_BETA2 * slot.v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let m_hat = slot.m[i] / bc1;
            let v_hat = slot.v[i] / bc2;
            entry.data[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * entry.data[i]);
        }
    }
    Ok(())
}

/// Learning rate at an iteration: linear warmup to `base`, then polynomial
/// (power 1.0) decay to zero at `total`.
pub fn lr_at(iter: u64, base: f64, warmup: u64, total: u64) -> f64 {
    if warmup > 0 && iter < warmup {
        return base * (iter + 1) as f64 / warmup as f64;
    }
    if total <= warmup {
        return base;
    }
    let span = (total - warmup) as f64;
    let done = (iter.min(total) - warmup) as f64;
    base * (1.0 - done / span)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, data: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        let n = data.len();
        s.insert(name, vec![n], data).unwrap();
        s
    }

    #[test]
    fn zero_grads_zero_decay_leave_params_unchanged() {
        let mut params = store_with("w", vec![1.0, -2.0]);
        let mut grads = HashMap::new();
        grads.insert("w".to_string(), vec![0.0, 0.0]);
        let mut state = AdamState::new();
        adam_step(&mut params, &grads, &mut state, 1e-3, 0.0).unwrap();
        assert_eq!(params.get("w").unwrap().data, vec![1.0, -2.0]);
    }

    #[test]
    fn one_step_matches_hand_unrolled_update() {
        // f(x) = x² at x = 1: grad 2.
        let mut params = store_with("x", vec![1.0]);
        let mut grads = HashMap::new();
        grads.insert("x".to_string(), vec![2.0]);
        let mut state = AdamState::new();
        let lr = 1e-3;
        adam_step(&mut params, &grads, &mut state, lr, 0.0).unwrap();

        let m = (1.0 - ADAM_BETA1) * 2.0;
        let v = (1.0 - ADAM_BETA2) * 4.0;
        let m_hat = m / (1.0 - ADAM_BETA1);
        let v_hat = v / (1.0 - ADAM_BETA2);
        let expect = 1.0 - lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        let got = params.get("x").unwrap().data[0];
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn decay_only_scales_parameter() {
        let mut params = store_with("w", vec![2.0]);
        let mut grads = HashMap::new();
        grads.insert("w".to_string(), vec![0.0]);
        let mut state = AdamState::new();
        adam_step(&mut params, &grads, &mut state, 1e-3, 0.1).unwrap();
        let got = params.get("w").unwrap().data[0];
        assert!((got - 2.0 * (1.0 - 1e-4)).abs() < 1e-15, "{got}");
    }

    #[test]
    fn params_without_grads_are_skipped() {
        let mut params = store_with("w", vec![1.0]);
        let grads = HashMap::new();
        let mut state = AdamState::new();
        adam_step(&mut params, &grads, &mut state, 1e-3, 0.1).unwrap();
        assert_eq!(params.get("w").unwrap().data, vec![1.0]);
        assert!(state.slots.is_empty());
    }

    #[test]
    fn lr_warms_up_then_decays_linearly() {
        let base = 3e-4;
        assert!((lr_at(0, base, 100, 1000) - base / 100.0).abs() < 1e-18);
        assert!((lr_at(99, base, 100, 1000) - base).abs() < 1e-18);
        assert!((lr_at(100, base, 100, 1000) - base).abs() < 1e-18);
        let mid = lr_at(550, base, 100, 1000);
        assert!((mid - base * 0.5).abs() < 1e-12);
        assert_eq!(lr_at(1000, base, 100, 1000), 0.0);
    }
}
