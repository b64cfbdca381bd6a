//! Optimizers over a [`ParamStore`]: SGD with momentum and polynomial
//! learning-rate decay, and Adam.

use ndarray::ArrayD;

use super::{Bound, ParamStore};
use crate::autograd::{Graph, Scalar};

/// Pulls each bound parameter's accumulated gradient out of the tape;
/// `None` where no gradient reached the leaf.
pub fn collect_grads<T: Scalar>(g: &mut Graph<T>, bound: &Bound) -> Vec<Option<ArrayD<T>>> {
    bound.ids.iter().map(|&id| g.take_grad(id)).collect()
}

/// Rescales the whole gradient set so its global L2 norm is at most
/// `max_norm`; a non-positive bound disables clipping. Returns the norm
/// measured before clipping.
pub fn clip_grads<T: Scalar>(grads: &mut [Option<ArrayD<T>>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|&v| {
            let f = v.to_f64().unwrap_or(f64::INFINITY);
            f * f
        })
        .sum();
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = T::c(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

/// SGD with classical momentum; lr(z) = lr0 * (1 - z / max_iters)^power.
pub struct SgdPoly<T: Scalar> {
    pub lr0: f64,
    pub momentum: f64,
    pub power: f64,
    pub max_iters: u64,
    vel: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> SgdPoly<T> {
    pub fn new(lr0: f64, momentum: f64, power: f64, max_iters: u64) -> Self {
        SgdPoly { lr0, momentum, power, max_iters, vel: Vec::new() }
    }

    pub fn lr(&self, iter: u64) -> f64 {
        let frac = 1.0 - (iter as f64 / self.max_iters as f64).min(1.0);
        self.lr0 * frac.powf(self.power)
    }

    /// Momentum buffer of parameter `i`, if any update has touched it.
    pub fn velocity(&self, i: usize) -> Option<&ArrayD<T>> {
        self.vel.get(i).and_then(|v| v.as_ref())
    }

    /// Restores one momentum buffer; resuming a run needs these to
    /// reproduce the uninterrupted trajectory bit for bit.
    pub fn set_velocity(&mut self, i: usize, v: ArrayD<T>) {
        if self.vel.len() <= i {
            self.vel.resize_with(i + 1, || None);
        }
        self.vel[i] = Some(v);
    }

    /// One update; `grads[i]` pairs with `store` parameter `i` and `None`
    /// entries are skipped.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<ArrayD<T>>], iter: u64) {
        assert_eq!(grads.len(), store.len(), "gradient/parameter count mismatch");
        self.vel.resize_with(store.len(), || None);
        let lr = T::c(self.lr(iter));
        let mu = T::c(self.momentum);
        for i in 0..store.len() {
            let Some(g) = &grads[i] else { continue };
            let v = self.vel[i].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| *v = mu * *v + g);
            ndarray::Zip::from(store.value_mut(i)).and(&*v).for_each(|w, &v| *w = *w - lr * v);
        }
    }
}

/// Adam with bias correction.
pub struct Adam<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Option<ArrayD<T>>>,
    v: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam { lr, beta1, beta2, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Completed steps (the bias-correction exponent).
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn set_steps(&mut self, t: u64) {
        self.t = t;
    }

    /// First and second moments of parameter `i`, if it has been stepped.
    pub fn moments(&self, i: usize) -> Option<(&ArrayD<T>, &ArrayD<T>)> {
        match (self.m.get(i), self.v.get(i)) {
            (Some(Some(m)), Some(Some(v))) => Some((m, v)),
            _ => None,
        }
    }

    pub fn set_moments(&mut self, i: usize, m: ArrayD<T>, v: ArrayD<T>) {
        if self.m.len() <= i {
            self.m.resize_with(i + 1, || None);
            self.v.resize_with(i + 1, || None);
        }
        self.m[i] = Some(m);
        self.v[i] = Some(v);
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<ArrayD<T>>]) {
        assert_eq!(grads.len(), store.len(), "gradient/parameter count mismatch");
        self.m.resize_with(store.len(), || None);
        self.v.resize_with(store.len(), || None);
        self.t += 1;
        let b1 = T::c(self.beta1);
        let b2 = T::c(self.beta2);
        let c1 = T::c(1.0 / (1.0 - self.beta1.powi(self.t as i32)));
        let c2 = T::c(1.0 / (1.0 - self.beta2.powi(self.t as i32)));
        let lr = T::c(self.lr);
        let eps = T::c(self.eps);
        let one = T::one();
        for i in 0..store.len() {
            let Some(g) = &grads[i] else { continue };
            let m = self.m[i].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self.v[i].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| *m = b1 * *m + (one - b1) * g);
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| *v = b2 * *v + (one - b2) * g * g);
            ndarray::Zip::from(store.value_mut(i))
                .and(&*m)
                .and(&*v)
                .for_each(|w, &m, &v| *w = *w - lr * (m * c1) / ((v * c2).sqrt() + eps));
        }
    }
}
