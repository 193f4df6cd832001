//! AdamW and the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Scalar, Tensor};

/// `lr_end + (lr_start - lr_end) * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(step: u64, total: u64, lr_start: f64, lr_end: f64) -> Result<f64> {
    if total == 0 || step > total {
        return Err(Error::Param(format!(
            "schedule step {step} outside 0..={total}"
        )));
    }
    let phase = std::f64::consts::PI * step as f64 / total as f64;
    Ok(lr_end + 0.5 * (lr_start - lr_end) * (1.0 + phase.cos()))
}

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment buffers aligned with a parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Scalar> {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

pub const FIRST_MOMENT_PREFIX: &str = "adamw.m.";
pub const SECOND_MOMENT_PREFIX: &str = "adamw.v.";

impl<T: Scalar> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros: Vec<Tensor<T>> = store
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape()))
            .collect();
        OptimizerState {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Moment buffers as named tensors for checkpointing.
    pub fn named_tensors(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::with_capacity(2 * self.first.len());
        for (id, name, _) in store.iter() {
            out.push((
                format!("{FIRST_MOMENT_PREFIX}{name}"),
                self.first[id.index()].clone(),
            ));
            out.push((
                format!("{SECOND_MOMENT_PREFIX}{name}"),
                self.second[id.index()].clone(),
            ));
        }
        out
    }

    /// Restores moment buffers saved by [`OptimizerState::named_tensors`].
    pub fn from_named(
        store: &ParamStore<T>,
        config: AdamWConfig,
        step: u64,
        lookup: impl Fn(&str) -> Option<Tensor<T>>,
    ) -> Result<Self> {
        let mut state = Self::new(store, config);
        state.step = step;
        for (id, name, t) in store.iter() {
            for (prefix, slot) in [
                (FIRST_MOMENT_PREFIX, &mut state.first),
                (SECOND_MOMENT_PREFIX, &mut state.second),
            ] {
                let key = format!("{prefix}{name}");
                let m = lookup(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {key}")))?;
                if m.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!(
                        "optimizer tensor {key} has shape {:?}, parameter has {:?}",
                        m.shape(),
                        t.shape()
                    )));
                }
                slot[id.index()] = m;
            }
        }
        Ok(state)
    }
}

/// One AdamW update of every trainable parameter from its accumulated
/// gradient. Weight decay is applied first, decoupled from the moments.
pub fn adamw_step<T: Scalar>(
    store: &mut ParamStore<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    if state.first.len() != store.len() {
        return Err(Error::Contract(format!(
            "optimizer tracks {} tensors, store has {}",
            state.first.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for &id in &ids {
        let t = store.get(id);
        if t.requires_grad() && t.grad().is_none() {
            return Err(Error::Contract(format!(
                "no gradient for parameter {}",
                store.name(id)
            )));
        }
    }
    state.step += 1;
    let AdamWConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
    for id in ids {
        if !store.get(id).requires_grad() {
            continue;
        }
        let k = id.index();
        let grad: Vec<f64> = store
            .get(id)
            .grad()
            .expect("checked above")
            .iter()
            .map(|g| g.as_f64())
            .collect();
        let param = store.get_mut(id);
        let (m, v) = (state.first[k].data_mut(), state.second[k].data_mut());
        for (i, (p, g)) in param.data_mut().iter_mut().zip(grad).enumerate() {
            let mut x = p.as_f64();
            x -= lr * weight_decay * x;
            let mi = beta1 * m[i].as_f64() + (1.0 - beta1) * g;
            let vi = beta2 * v[i].as_f64() + (1.0 - beta2) * g * g;
            m[i] = T::of(mi);
            v[i] = T::of(vi);
            x -= lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            *p = T::of(x);
        }
    }
    Ok(())
}
