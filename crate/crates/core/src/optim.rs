//! LAMB restricted to the trainable partition, with linear warmup and
//! linear decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambHyper {
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// Scale updates by `||w|| / ||u||`. Turning this off (with zero weight
    /// decay) gives plain bias-corrected Adam.
    pub trust_ratio: bool,
}

impl Default for LambHyper {
    fn default() -> Self {
        Self {
            peak_lr: 0.00088,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.01,
            warmup_steps: 10_000,
            total_steps: 1_000_000,
            trust_ratio: true,
        }
    }
}

impl LambHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.beta1 > 0.0 && self.beta1 < 1.0) || !(self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad(format!("betas must lie in (0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if !(self.peak_lr > 0.0) {
            return bad(format!("peak_lr must be positive, got {}", self.peak_lr));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return bad("eps must be positive and weight_decay non-negative".into());
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak_lr` over `warmup_steps`, then linear decay
/// to 0 at `total_steps`.
pub fn lr_at(step: u64, hyper: &LambHyper) -> f64 {
    let step = step.min(hyper.total_steps);
    if step < hyper.warmup_steps {
        hyper.peak_lr * step as f64 / hyper.warmup_steps as f64
    } else if hyper.total_steps == hyper.warmup_steps {
        hyper.peak_lr
    } else {
        hyper.peak_lr * (hyper.total_steps - step) as f64 / (hyper.total_steps - hyper.warmup_steps) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Updates applied through this slot, for bias correction.
    pub t: u64,
}

/// Adam moments for exactly the trainable parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LambState {
    pub slots: BTreeMap<ParamId, Moments>,
}

/// Fresh zeroed state covering exactly the currently trainable parameters.
pub fn rebuild_state(store: &ParamStore) -> LambState {
    LambState {
        slots: store
            .trainable_ids()
            .into_iter()
            .map(|id| {
                let n = store.get(id).numel();
                (id, Moments { m: vec![0.0; n], v: vec![0.0; n], t: 0 })
            })
            .collect(),
    }
}

/// Like [`rebuild_state`], but keeps the slots of the parameters in `keep`
/// that stay trainable.
pub fn rebuild_state_carrying(store: &ParamStore, old: &LambState, keep: &[ParamId]) -> LambState {
    let mut fresh = rebuild_state(store);
    for id in keep {
        if let (Some(slot), Some(prev)) = (fresh.slots.get_mut(id), old.slots.get(id)) {
            *slot = prev.clone();
        }
    }
    fresh
}

impl LambState {
    /// Scalars held in optimizer moments.
    pub fn num_scalars(&self) -> usize {
        self.slots.values().map(|s| s.m.len() + s.v.len()).sum()
    }

    /// Whether the state covers exactly the trainable set of `store`.
    pub fn covers_trainable(&self, store: &ParamStore) -> bool {
        self.slots.keys().copied().eq(store.trainable_ids())
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// One LAMB update using the learning rate at schedule position `step`.
/// Frozen parameters are neither read nor written.
pub fn lamb_step(store: &mut ParamStore, state: &mut LambState, hyper: &LambHyper, step: u64) -> Result<()> {
    if !state.covers_trainable(store) {
        return Err(Error::Optimizer(
            "optimizer state does not cover exactly the trainable parameters".into(),
        ));
    }
    let lr = lr_at(step, hyper);
    let ids: Vec<ParamId> = state.slots.keys().copied().collect();
    for id in ids {
        let p = store.get(id);
        let Some(g) = p.grad() else {
            return Err(Error::Optimizer(format!(
                "trainable parameter {} has no gradient",
                p.name
            )));
        };
        let decay = if p.decay { hyper.weight_decay } else { 0.0 };
        let slot = state.slots.get_mut(&id).expect("covered");
        slot.t += 1;
        let bc1 = 1.0 - hyper.beta1.powf(slot.t as f64);
        let bc2 = 1.0 - hyper.beta2.powf(slot.t as f64);
        let mut update = vec![0.0; g.len()];
        for i in 0..g.len() {
            slot.m[i] = hyper.beta1 * slot.m[i] + (1.0 - hyper.beta1) * g[i];
            slot.v[i] = hyper.beta2 * slot.v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
            let m_hat = slot.m[i] / bc1;
            let v_hat = slot.v[i] / bc2;
            update[i] = m_hat / (v_hat.sqrt() + hyper.eps) + decay * p.data[i];
        }
        let ratio = if hyper.trust_ratio {
            let (wn, un) = (norm(&p.data), norm(&update));
            if wn > 0.0 && un > 0.0 {
                wn / un
            } else {
                1.0
            }
        } else {
            1.0
        };
        let scale = lr * ratio;
        for (w, u) in store.data_mut(id).iter_mut().zip(&update) {
            *w -= scale * u;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Gradients;

    fn hyper() -> LambHyper {
        LambHyper {
            peak_lr: 0.1,
            warmup_steps: 10,
            total_steps: 110,
            ..Default::default()
        }
    }

    #[test]
    fn schedule_points() {
        let h = hyper();
        assert_eq!(lr_at(0, &h), 0.0);
        assert_eq!(lr_at(10, &h), 0.1);
        assert_eq!(lr_at(5, &h), 0.05);
        assert!((lr_at(60, &h) - 0.1 * 50.0 / 100.0).abs() < 1e-15);
        assert_eq!(lr_at(110, &h), 0.0);
    }

    fn store_with_grad(w: Vec<f64>, g: Vec<f64>) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", vec![w.len()], w, true).unwrap();
        let mut grads = Gradients::default();
        grads.by_param.insert(id, g);
        s.accumulate(&grads).unwrap();
        (s, id)
    }

    #[test]
    fn zero_grad_zero_decay_is_a_no_op() {
        let (mut s, id) = store_with_grad(vec![3.0, 4.0], vec![0.0, 0.0]);
        let mut st = rebuild_state(&s);
        let h = LambHyper { weight_decay: 0.0, ..hyper() };
        lamb_step(&mut s, &mut st, &h, 5).unwrap();
        assert_eq!(s.get(id).data, vec![3.0, 4.0]);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut s = ParamStore::new();
        s.add("w", vec![1], vec![1.0], true).unwrap();
        let mut st = rebuild_state(&s);
        assert!(matches!(lamb_step(&mut s, &mut st, &hyper(), 1), Err(Error::Optimizer(_))));
    }

    #[test]
    fn frozen_parameter_is_untouched() {
        let mut s = ParamStore::new();
        let a = s.add("a", vec![2], vec![1.0, -1.0], true).unwrap();
        let f = s.add("f", vec![2], vec![0.3, f64::from_bits(0x3ff0_0000_0000_0001)], true).unwrap();
        s.set_trainable(f, false);
        let before = s.get(f).data.clone();
        let mut st = rebuild_state(&s);
        assert_eq!(st.slots.keys().copied().collect::<Vec<_>>(), vec![a]);
        for step in 1..=100 {
            s.zero_grads();
            let mut g = Gradients::default();
            g.by_param.insert(a, vec![0.5, -0.25]);
            s.accumulate(&g).unwrap();
            lamb_step(&mut s, &mut st, &hyper(), step).unwrap();
        }
        assert!(s.get(f).data.iter().zip(&before).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_ne!(s.get(a).data, vec![1.0, -1.0]);
    }

    #[test]
    fn coverage_mismatch_is_rejected() {
        let mut s = ParamStore::new();
        let a = s.add("a", vec![1], vec![1.0], true).unwrap();
        let st0 = rebuild_state(&s);
        s.set_trainable(a, false);
        let mut st = st0;
        assert!(lamb_step(&mut s, &mut st, &hyper(), 1).is_err());
    }

    #[test]
    fn carrying_keeps_shared_slots() {
        let mut s = ParamStore::new();
        let a = s.add("a", vec![1], vec![1.0], true).unwrap();
        let b = s.add("b", vec![1], vec![1.0], true).unwrap();
        let mut st = rebuild_state(&s);
        st.slots.get_mut(&a).unwrap().m[0] = 7.0;
        st.slots.get_mut(&a).unwrap().t = 3;
        s.set_trainable(b, false);
        let c = rebuild_state_carrying(&s, &st, &[a, b]);
        assert_eq!(c.slots.len(), 1);
        assert_eq!(c.slots[&a].m[0], 7.0);
        assert_eq!(c.slots[&a].t, 3);
        assert_eq!(rebuild_state_carrying(&s, &st, &[]).slots[&a].t, 0);
        assert_eq!(rebuild_state(&s), rebuild_state(&s));
    }
}
