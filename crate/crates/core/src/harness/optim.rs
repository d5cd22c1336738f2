//! Adam with L2 weight decay folded into the gradient of decaying
//! parameters (conv and linear weights).

use crate::error::{Error, Result};
use crate::nn::{ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps taken so far.
    pub t: u64,
    /// First and second moments, one per store entry (`None` for buffers).
    pub m: Vec<Option<Tensor>>,
    pub v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = |e: &crate::nn::Entry| match e.kind {
            ParamKind::Param => Some(Tensor::zeros(e.value.shape().to_vec())),
            ParamKind::Buffer => None,
        };
        Adam {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: store.entries().iter().map(zeros).collect(),
            v: store.entries().iter().map(zeros).collect(),
        }
    }

    /// One update at learning rate `lr`. `grads` is indexed like the store;
    /// `None` means the parameter took no part in the loss.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let Some(g) = grads.get(i).and_then(Option::as_ref) else {
                continue;
            };
            let entry = store.entry(id);
            if entry.kind != ParamKind::Param {
                continue;
            }
            if !g.is_finite() {
                return Err(Error::Divergence(format!("non-finite gradient for {}", entry.name)));
            }
            let decay = if entry.decay { self.weight_decay } else { 0.0 };
            let (Some(m), Some(v)) = (self.m[i].as_mut(), self.v[i].as_mut()) else {
                continue;
            };
            let (m, v) = (m.data_mut(), v.data_mut());
            let w = store.get_mut(id).data_mut();
            for k in 0..w.len() {
                let gk = g.data()[k] + decay * w[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                w[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
            if !store.get(id).is_finite() {
                return Err(Error::Divergence(format!("update made {} non-finite", store.entry(id).name)));
            }
        }
        Ok(())
    }
}
