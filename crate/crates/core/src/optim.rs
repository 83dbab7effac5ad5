use std::collections::BTreeMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Adam with bias correction. Moments are keyed by parameter so the state
/// can be checkpointed by name.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<ParamId, Tensor>,
    v: BTreeMap<ParamId, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads {
            let m = self
                .m
                .entry(*id)
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(*id)
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.param_mut(*id);
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    /// Moment tensors as `(prefix.m.<param>, ..)` / `(prefix.v.<param>, ..)`.
    pub fn named_state(&self, prefix: &str, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(self.m.len() * 2);
        for (id, t) in &self.m {
            out.push((format!("{prefix}.m.{}", store.param_name(*id)), t.clone()));
        }
        for (id, t) in &self.v {
            out.push((format!("{prefix}.v.{}", store.param_name(*id)), t.clone()));
        }
        out
    }

    /// Restores moments written by [`Adam::named_state`]. Returns the names
    /// that did not resolve to a parameter.
    pub fn load_state(
        &mut self,
        prefix: &str,
        step: u64,
        store: &ParamStore,
        tensors: &BTreeMap<String, Tensor>,
    ) -> Vec<String> {
        self.step = step;
        self.m.clear();
        self.v.clear();
        let mut unknown = Vec::new();
        for (name, t) in tensors {
            let (slot, rest) = if let Some(r) = name.strip_prefix(&format!("{prefix}.m.")) {
                (&mut self.m, r)
            } else if let Some(r) = name.strip_prefix(&format!("{prefix}.v.")) {
                (&mut self.v, r)
            } else {
                continue;
            };
            match store.find_param(rest) {
                Some(id) if store.param(id).shape() == t.shape() => {
                    slot.insert(id, t.clone());
                }
                _ => unknown.push(name.clone()),
            }
        }
        unknown
    }
}
