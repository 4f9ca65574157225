//! Bias-corrected Adam over a fixed group of parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Self::default() }
    }
}

/// Optimizer state for one parameter group.
///
/// Only the parameters given at construction are ever modified; a member
/// with no gradient in a step is treated as having a zero gradient.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    params: Vec<ParamId>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>, params: impl IntoIterator<Item = ParamId>) -> Self {
        let params: Vec<ParamId> = params.into_iter().collect();
        let m = params.iter().map(|&id| vec![T::zero(); store.get(id).numel()]).collect();
        let v = params.iter().map(|&id| vec![T::zero(); store.get(id).numel()]).collect();
        Adam { config, step: 0, params, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.params.contains(&id)
    }

    /// Applies one update from `grads` and increments the step counter.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        for id in grads.ids() {
            if !self.params.contains(&id) {
                continue;
            }
            let (got, want) = (grads.get(id).map_or(0, <[T]>::len), store.get(id).numel());
            if got != want {
                return Err(TensorError::shape("adam_step", store.get(id).shape(), &[got]));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (ob1, ob2) = (T::one() - b1, T::one() - b2);
        let lr_t = T::of(c.lr / bc1);
        let inv_sqrt_bc2 = T::of(1.0 / bc2.sqrt());
        let eps = T::of(c.eps);

        for (k, &id) in self.params.iter().enumerate() {
            let g = grads.get(id);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let mut next = store.get(id).data().to_vec();
            for i in 0..next.len() {
                let gi = g.map_or(T::zero(), |g| g[i]);
                m[i] = b1 * m[i] + ob1 * gi;
                v[i] = b2 * v[i] + ob2 * gi * gi;
                next[i] = next[i] - lr_t * m[i] / (v[i].sqrt() * inv_sqrt_bc2 + eps);
            }
            store.get_mut(id).data_mut().copy_from_slice(&next);
            if next.iter().any(|x| !x.is_finite()) {
                return Err(TensorError::NumericFault { op: "adam_step" });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Tape, Tensor};

    fn store_with(values: Vec<f64>) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let n = values.len();
        let id = s.add("x", Tensor::new(&[n], values).unwrap().with_requires_grad(true)).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_params_but_counts_step() {
        let (mut s, id) = store_with(vec![1.0, -2.0]);
        let mut adam = Adam::new(AdamConfig::default(), &s, [id]);
        let none = Gradients::for_store(&s);
        adam.step(&mut s, &none).unwrap();
        assert_eq!(s.get(id).data(), &[1.0, -2.0]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_against_gradient_sign() {
        let (mut s, id) = store_with(vec![0.0, 0.0, 0.0]);
        let mut tape = Tape::new();
        let x = tape.param(&s, id);
        let c = tape.input(&[3], vec![3.0, -0.5, 1e-3]).unwrap();
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &s, [id]);
        adam.step(&mut s, &g).unwrap();
        let x = s.get(id).data();
        assert!(x[0] < 0.0 && x[1] > 0.0 && x[2] < 0.0);
        // bias-corrected first step has magnitude ≈ lr
        for v in x {
            assert!((v.abs() - 1e-3).abs() < 1e-5, "{v}");
        }
    }

    #[test]
    fn converges_on_shifted_parabola() {
        // f(x) = (x - 2)^2, x0 = 0, lr = 0.1, 100 steps
        let (mut s, id) = store_with(vec![0.0]);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &s, [id]);
        for _ in 0..100 {
            let mut tape = Tape::new();
            let x = tape.param(&s, id);
            let d = tape.add_scalar(x, -2.0).unwrap();
            let sq = tape.mul(d, d).unwrap();
            let g = tape.backward(sq).unwrap();
            adam.step(&mut s, &g).unwrap();
        }
        let x = s.get(id).data()[0];
        assert!((x - 2.0).abs() < 0.1, "x = {x}");
    }

    #[test]
    fn only_group_members_move() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", Tensor::scalar(1.0).with_requires_grad(true)).unwrap();
        let b = s.add("b", Tensor::scalar(1.0).with_requires_grad(true)).unwrap();
        let mut tape = Tape::new();
        let (xa, xb) = (tape.param(&s, a), tape.param(&s, b));
        let y = tape.mul(xa, xb).unwrap();
        let g = tape.backward(y).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &s, [a]);
        adam.step(&mut s, &g).unwrap();
        assert_ne!(s.get(a).data()[0], 1.0);
        assert_eq!(s.get(b).data()[0], 1.0);
    }
}
