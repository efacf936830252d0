//! AdamW with decoupled weight decay.

use ndarray::ArrayD;

use crate::nn::{ParamId, ParamStore};
use crate::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

pub struct AdamW<T: Scalar> {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Option<ArrayD<T>>>,
    v: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig, store: &ParamStore<T>) -> Self {
        AdamW { cfg, step: 0, m: vec![None; store.len()], v: vec![None; store.len()] }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update. Parameters without a gradient this step are left
    /// untouched (their moments do not decay either).
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, ArrayD<T>)]) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let lr = T::from_f64(self.cfg.lr);
        let eps = T::from_f64(self.cfg.eps);
        let wd = T::from_f64(self.cfg.weight_decay);
        let bc1 = T::from_f64(1.0 - self.cfg.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - self.cfg.beta2.powi(t));
        let one = T::one();

        for (id, grad) in grads {
            let m = self.m[id.0].get_or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self.v[id.0].get_or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            m.zip_mut_with(grad, |me, &ge| *me = b1 * *me + (one - b1) * ge);
            v.zip_mut_with(grad, |ve, &ge| *ve = b2 * *ve + (one - b2) * ge * ge);
            let p = store.value_mut(*id);
            ndarray::Zip::from(&mut *p).and(&*m).and(&*v).for_each(|pe, &me, &ve| {
                let mhat = me / bc1;
                let vhat = ve / bc2;
                *pe = *pe - lr * (mhat / (vhat.sqrt() + eps) + wd * *pe);
            });
        }
    }

    /// Moment arrays in parameter order, for checkpointing. `None` entries
    /// (never-updated parameters) serialize as zeros of the param shape.
    pub fn state_arrays(&self, store: &ParamStore<T>) -> Vec<(String, ArrayD<T>, ArrayD<T>)> {
        store
            .ids()
            .map(|id| {
                let shape = store.value(id).raw_dim();
                let m = self.m[id.0].clone().unwrap_or_else(|| ArrayD::zeros(shape.clone()));
                let v = self.v[id.0].clone().unwrap_or_else(|| ArrayD::zeros(shape));
                (store.name(id).to_string(), m, v)
            })
            .collect()
    }

    pub fn restore_state(&mut self, store: &ParamStore<T>, step: u64, moments: Vec<(ArrayD<T>, ArrayD<T>)>) {
        assert_eq!(moments.len(), store.len(), "optimizer state size mismatch");
        self.step = step;
        self.m = moments.iter().map(|(m, _)| Some(m.clone())).collect();
        self.v = moments.into_iter().map(|(_, v)| Some(v)).collect();
    }
}
