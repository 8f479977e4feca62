use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::{MsctError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam over a fixed subset of parameters.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    params: Vec<ParamId>,
    moments: BTreeMap<ParamId, (Tensor, Tensor)>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore, params: &[ParamId]) -> Self {
        let moments = params
            .iter()
            .map(|&id| {
                let shape = store.get(id).shape();
                (id, (Tensor::zeros(shape), Tensor::zeros(shape)))
            })
            .collect();
        Adam {
            config,
            params: params.to_vec(),
            moments,
            step: 0,
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> Option<(&Tensor, &Tensor)> {
        self.moments.get(&id).map(|(m, v)| (m, v))
    }

    /// Apply one update from `grads`; parameters outside this optimizer's set are untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        let owned: Vec<(ParamId, Tensor)> = self
            .params
            .iter()
            .map(|&id| (id, grads.param_or_zero(store, id)))
            .collect();
        self.step_with(store, &owned)
    }

    /// Update from explicit per-parameter gradients.
    pub fn step_with(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        for (id, g) in grads {
            let p = store.get(*id);
            if p.shape() != g.shape() {
                return Err(MsctError::shape("adam_step", p.shape(), g.shape()));
            }
            if !self.moments.contains_key(id) {
                return Err(MsctError::Usage(format!(
                    "parameter {} is not managed by this optimizer",
                    store.name(*id)
                )));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (id, g) in grads {
            let (m, v) = self.moments.get_mut(id).expect("checked above");
            let p = store.get_mut(*id);
            for (((pi, mi), vi), gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
