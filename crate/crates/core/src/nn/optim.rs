use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay. Moments and step counts are kept per
/// parameter cell so that cells updated on only some steps (task-specific
/// heads) get correct bias correction.
#[derive(Clone, Debug)]
pub struct AdamW<S> {
    pub config: AdamWConfig,
    pub(crate) first: Vec<Option<Tensor<S>>>,
    pub(crate) second: Vec<Option<Tensor<S>>>,
    pub(crate) steps: Vec<u64>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            first: Vec::new(),
            second: Vec::new(),
            steps: Vec::new(),
        }
    }

    fn ensure(&mut self, n: usize) {
        if self.steps.len() < n {
            self.first.resize(n, None);
            self.second.resize(n, None);
            self.steps.resize(n, 0);
        }
    }

    pub fn step_count(&self, id: ParamId) -> u64 {
        self.steps.get(id.index()).copied().unwrap_or(0)
    }

    pub fn moments(&self, id: ParamId) -> Option<(&Tensor<S>, &Tensor<S>)> {
        let m = self.first.get(id.index())?.as_ref()?;
        let v = self.second.get(id.index())?.as_ref()?;
        Some((m, v))
    }

    /// Update every trainable cell. A trainable cell without a gradient is an
    /// error.
    pub fn step(&mut self, store: &mut ParamStore<S>, lr: f64) -> Result<()> {
        let ids: Vec<ParamId> = store.ids().collect();
        self.step_subset(store, lr, &ids)
    }

    /// Update the trainable cells among `ids`.
    pub fn step_subset(&mut self, store: &mut ParamStore<S>, lr: f64, ids: &[ParamId]) -> Result<()> {
        if lr < 0.0 || !lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate {lr}")));
        }
        let missing: Vec<String> = ids
            .iter()
            .map(|&id| store.get(id))
            .filter(|p| p.trainable && p.grad.is_none())
            .map(|p| p.name.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingGradient(missing.join(", ")));
        }
        self.ensure(store.len());
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        for &id in ids {
            let i = id.index();
            let param = store.get_mut(id);
            if !param.trainable {
                continue;
            }
            let grad = param.grad.as_ref().expect("checked above");
            let n = param.value.numel();
            let m = self.first[i].get_or_insert_with(|| Tensor::zeros(param.value.shape()));
            let v = self.second[i].get_or_insert_with(|| Tensor::zeros(param.value.shape()));
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let (b1, b2) = (S::lit(beta1), S::lit(beta2));
            let (one_b1, one_b2) = (S::lit(1.0 - beta1), S::lit(1.0 - beta2));
            let step_size = S::lit(lr / bc1);
            let bc2_sqrt = S::lit(bc2.sqrt());
            let decay = S::lit(lr * weight_decay);
            let eps = S::lit(eps);
            let g = grad.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            let w = param.value.data_mut();
            for j in 0..n {
                md[j] = b1 * md[j] + one_b1 * g[j];
                vd[j] = b2 * vd[j] + one_b2 * g[j] * g[j];
                let denom = vd[j].sqrt() / bc2_sqrt + eps;
                w[j] = w[j] - decay * w[j] - step_size * md[j] / denom;
            }
        }
        Ok(())
    }
}
