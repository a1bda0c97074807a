use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Parameter, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("bad optimizer settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            step: 0,
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
        }
    }
}

/// One Adam update of a single parameter from its populated gradient.
pub fn adam_step<T: Real>(param: &mut Parameter<T>, state: &mut AdamState<T>, cfg: &AdamConfig) -> Result<()> {
    if !param.grad.all_finite() {
        return Err(Error::NonFiniteGradient(param.name.clone()));
    }
    if state.m.shape() != param.value.shape() || state.v.shape() != param.value.shape() {
        return Err(Error::DimensionMismatch(format!("optimizer state for {}", param.name)));
    }
    let t = state.step + 1;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powi(t as i32));
    let c2 = T::of(1.0 - cfg.beta2.powi(t as i32));
    let (lr, eps, wd) = (T::of(cfg.lr), T::of(cfg.eps), T::of(cfg.weight_decay));
    let one = T::one();
    let (m, v) = (state.m.data_mut(), state.v.data_mut());
    for (i, (w, &g0)) in param.value.data_mut().iter_mut().zip(param.grad.data()).enumerate() {
        let g = g0 + wd * *w;
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        *w -= lr * mh / (vh.sqrt() + eps);
    }
    state.step = t;
    Ok(())
}

/// Adam over every trainable parameter of a store, with state keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub states: BTreeMap<String, AdamState<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            states: BTreeMap::new(),
        }
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.states.values().map(|s| s.step).max().unwrap_or(0)
    }

    /// Checks every gradient before touching any parameter, then updates all of them.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if let Some(p) = store.iter().find(|p| p.trainable && !p.grad.all_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
        for p in store.iter_mut().filter(|p| p.trainable) {
            let state = self
                .states
                .entry(p.name.clone())
                .or_insert_with(|| AdamState::new(p.value.shape()));
            adam_step(p, state, &self.config)?;
        }
        Ok(())
    }
}
