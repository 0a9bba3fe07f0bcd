//! Adam with decoupled or coupled weight decay.

use alloc::vec::Vec;

use crate::autograd::Gradients;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Add `weight_decay · p` to the gradient instead of shrinking `p` directly.
    pub coupled_decay: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 4e-4,
            beta1: 0.95,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            coupled_decay: false,
        }
    }
}

/// Moments of one trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    /// Number of updates this parameter has received.
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    /// Indexed by parameter id; `None` for frozen parameters.
    pub moments: Vec<Option<Moments>>,
    /// Optimizer steps taken.
    pub step: u64,
}

impl AdamState {
    /// Zero moments for every trainable parameter of `params`.
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let moments = params
            .iter()
            .map(|(_, e)| {
                e.trainable.then(|| Moments {
                    m: Tensor::zeros(e.value.shape()),
                    v: Tensor::zeros(e.value.shape()),
                    steps: 0,
                })
            })
            .collect();
        AdamState { config, moments, step: 0 }
    }

    /// Applies one update. Parameters without a gradient are left alone,
    /// including their weight decay.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if self.moments.len() != params.len() {
            return Err(Error::contract("optimizer state does not match the parameter store"));
        }
        for (id, g) in grads.iter_params() {
            if g.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(params.name(id).into()));
            }
        }
        let c = self.config;
        self.step += 1;
        for (id, g) in grads.iter_params() {
            let Some(mom) = self.moments[id.index()].as_mut() else { continue };
            let p = params.get_mut(id);
            if p.shape() != g.shape() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
            mom.steps += 1;
            let bc1 = 1.0 - libm::pow(c.beta1, mom.steps as f64);
            let bc2 = 1.0 - libm::pow(c.beta2, mom.steps as f64);
            let (m, v) = (mom.m.data_mut(), mom.v.data_mut());
            for (i, (pi, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gi = if c.coupled_decay {
                    gi + c.weight_decay * *pi
                } else {
                    *pi -= c.lr * c.weight_decay * *pi;
                    gi
                };
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *pi -= c.lr * mhat / (libm::sqrt(vhat) + c.eps);
            }
        }
        Ok(())
    }

    pub fn moments_of(&self, id: ParamId) -> Option<&Moments> {
        self.moments.get(id.index()).and_then(Option::as_ref)
    }
}

/// `ids` where `before` and `after` hold different values.
pub fn changed_params(before: &ParamStore, after: &ParamStore) -> Vec<ParamId> {
    before
        .iter()
        .filter(|(id, e)| after.get(*id).data() != e.value.data())
        .map(|(id, _)| id)
        .collect()
}
