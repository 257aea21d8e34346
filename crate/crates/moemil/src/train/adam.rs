//! Adam with bias correction over the parameter store.

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Scalar};

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment buffers mirroring the parameter store, plus the
/// step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState<T: Scalar> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let m = store.iter().map(|(_, _, t)| vec![T::zero(); t.numel()]).collect();
        let v = store.iter().map(|(_, _, t)| vec![T::zero(); t.numel()]).collect();
        OptimizerState { m, v, step: 0 }
    }

    /// One update over all parameters with gradients. `grads` is indexed
    /// by parameter id; parameters without a gradient are untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Option<Vec<T>>],
        hyper: &AdamHyper,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::from_f64(1.0 - hyper.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - hyper.beta2.powi(t));
        let (b1, b2) = (T::from_f64(hyper.beta1), T::from_f64(hyper.beta2));
        let (lr, eps) = (T::from_f64(hyper.lr), T::from_f64(hyper.eps));
        let one = T::one();

        for i in 0..store.len() {
            let Some(g) = grads.get(i).and_then(|g| g.as_ref()) else {
                continue;
            };
            let id = crate::tensor::ParamId(i as u32);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for parameter {}",
                    store.name(id)
                )));
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = store.get_mut(id).data_mut();
            for ((pv, &gv), (mv, vv)) in p.iter_mut().zip(g).zip(m.iter_mut().zip(v.iter_mut())) {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
