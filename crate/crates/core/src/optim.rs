//! Elementwise gradient clipping and Adam with per-group settings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Group, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSettings {
    pub learning_rate: f64,
    pub weight_decay: f64,
    #[serde(default)]
    pub frozen: bool,
}

impl GroupSettings {
    pub fn validate(&self, field: &str) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config(format!("{field}.learning_rate"), "must be finite and ≥ 0"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config(format!("{field}.weight_decay"), "must be finite and ≥ 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub encoder: GroupSettings,
    pub decoder: GroupSettings,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Inclusive clamp range for every gradient entry.
    pub clip: [f64; 2],
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            // tiny_conv encoder at desk scale
            encoder: GroupSettings {
                learning_rate: 1e-3,
                weight_decay: 0.0,
                frozen: false,
            },
            decoder: GroupSettings {
                learning_rate: 1e-4,
                weight_decay: 1e-4,
                frozen: false,
            },
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: [-10.0, 10.0],
        }
    }
}

impl OptimConfig {
    pub fn group(&self, group: Group) -> &GroupSettings {
        match group {
            Group::Encoder => &self.encoder,
            Group::Decoder => &self.decoder,
        }
    }

    pub fn group_mut(&mut self, group: Group) -> &mut GroupSettings {
        match group {
            Group::Encoder => &mut self.encoder,
            Group::Decoder => &mut self.decoder,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate("optim.encoder")?;
        self.decoder.validate("optim.decoder")?;
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("optim.beta", "β₁ and β₂ must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optim.eps", "must be positive"));
        }
        let [lo, hi] = self.clip;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::config("optim.clip", "bounds must be finite with low < high"));
        }
        Ok(())
    }
}

/// Clamp every gradient entry into `[low, high]`. Returns how many entries
/// were changed.
pub fn clip_gradients<T: Scalar>(store: &mut ParamStore<T>, range: [f64; 2]) -> usize {
    let (lo, hi) = (T::of(range[0]), T::of(range[1]));
    let mut clipped = 0;
    for id in store.ids() {
        for g in store.get_mut(id).grad.data_mut() {
            let c = g.max(lo).min(hi);
            if c != *g {
                clipped += 1;
                *g = c;
            }
        }
    }
    clipped
}

/// Adam moments for every parameter in a store plus a step count per group.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub steps: [u64; 2],
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![T::zero(); p.value.numel()]).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            steps: [0, 0],
        }
    }

    pub fn step_count(&self, group: Group) -> u64 {
        self.steps[group as usize]
    }
}

/// One Adam update of every trainable parameter in `group`.
///
/// `g ← g + wd·θ`, then the usual bias-corrected moment update.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    group: Group,
    cfg: &OptimConfig,
) -> Result<()> {
    let settings = cfg.group(group);
    if settings.frozen {
        return Err(Error::contract(format!("adam_step on frozen group {}", group.name())));
    }
    if state.m.len() != store.len() {
        return Err(Error::contract("Adam state does not match the parameter store"));
    }
    state.steps[group as usize] += 1;
    let t = state.steps[group as usize] as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let one = T::one();
    let c1 = one - b1.powi(t);
    let c2 = one - b2.powi(t);
    let (lr, wd, eps) = (
        T::of(settings.learning_rate),
        T::of(settings.weight_decay),
        T::of(cfg.eps),
    );
    for id in store.ids_in(group) {
        let p = store.get_mut(id);
        if !p.trainable {
            continue;
        }
        let (m, v) = (&mut state.m[id.index()], &mut state.v[id.index()]);
        let grad = p.grad.data().to_vec();
        for (i, theta) in p.value.data_mut().iter_mut().enumerate() {
            let g = grad[i] + wd * *theta;
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Clip, then step every unfrozen group. Returns the clip count.
pub fn optimizer_update<T: Scalar>(
    store: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    cfg: &OptimConfig,
) -> Result<usize> {
    let clipped = clip_gradients(store, cfg.clip);
    for group in Group::ALL {
        if !cfg.group(group).frozen {
            adam_step(store, state, group, cfg)?;
        }
    }
    Ok(clipped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(vals: &[f64], grads: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("w", Group::Decoder, Tensor::vector(vals.to_vec()));
        s.get_mut(id).grad = Tensor::vector(grads.to_vec());
        s
    }

    #[test]
    fn clip_examples() {
        let mut s = store(&[0.0; 3], &[15.0, -12.0, 3.0]);
        assert_eq!(clip_gradients(&mut s, [-10.0, 10.0]), 2);
        assert_eq!(s.get(crate::ParamId(0)).grad.data(), &[10.0, -10.0, 3.0]);
    }

    #[test]
    fn first_adam_step() {
        let mut s = store(&[0.5], &[1.0]);
        let mut cfg = OptimConfig::default();
        cfg.decoder = GroupSettings {
            learning_rate: 0.1,
            weight_decay: 0.0,
            frozen: false,
        };
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, Group::Decoder, &cfg).unwrap();
        let delta = s.value(crate::ParamId(0)).item() - 0.5;
        // m̂ = 1, v̂ = 1
        assert!((delta + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut s = store(&[0.5, -2.0], &[0.0, 0.0]);
        let mut cfg = OptimConfig::default();
        cfg.decoder.weight_decay = 0.0;
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, Group::Decoder, &cfg).unwrap();
        assert_eq!(s.value(crate::ParamId(0)).data(), &[0.5, -2.0]);
    }

    #[test]
    fn frozen_group_is_a_contract_error() {
        let mut s = store(&[0.5], &[1.0]);
        let mut cfg = OptimConfig::default();
        cfg.decoder.frozen = true;
        let mut st = AdamState::new(&s);
        assert!(matches!(
            adam_step(&mut s, &mut st, Group::Decoder, &cfg),
            Err(Error::Contract(_))
        ));
        optimizer_update(&mut s, &mut st, &cfg).unwrap();
        assert_eq!(s.value(crate::ParamId(0)).item(), 0.5);
    }

    #[test]
    fn buffers_are_not_updated() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add_buffer("bn.mean", Group::Decoder, Tensor::vector(vec![1.0]));
        s.get_mut(id).grad = Tensor::vector(vec![1.0]);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, Group::Decoder, &OptimConfig::default()).unwrap();
        assert_eq!(s.value(id).item(), 1.0);
    }
}
