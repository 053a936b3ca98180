use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::NumericsError;
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 2e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// AdamW with decoupled weight decay. Moment buffers are created lazily and
/// only for parameters that are trainable at step time.
#[derive(Debug, Clone)]
pub struct AdamWState<T: Scalar> {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<ParamId, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamWState { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn has_moments(&self, id: ParamId) -> bool {
        self.moments.contains_key(&id)
    }

    /// Applies one update to every trainable parameter. Frozen parameters are
    /// never written, whatever their gradient buffers hold.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<(), NumericsError> {
        if let Some((_, p)) = store.iter().find(|(_, p)| p.trainable && p.tensor.grad().is_none()) {
            return Err(NumericsError::Optimizer(format!("no gradient for trainable parameter {}", p.name)));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let decay = T::of(1.0 - c.lr * c.weight_decay);
        let lr = T::of(c.lr);
        let (bc1, bc2, eps) = (T::of(bc1), T::of(bc2), T::of(c.eps));
        for (id, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let n = p.tensor.numel();
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            let grad = p.tensor.grad().expect("checked above").to_vec();
            for (i, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w = *w * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    fn store_with(value: f64, trainable: bool, grad: Option<f64>) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::new(vec![1], vec![value]).unwrap(), trainable).unwrap();
        if let Some(g) = grad {
            s.get_mut(id).tensor.accumulate_grad(&[g]);
        }
        (s, id)
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut s, id) = store_with(0.7, true, Some(0.0));
        let mut opt = AdamWState::new(AdamWConfig { lr: 0.1, ..Default::default() });
        opt.step(&mut s).unwrap();
        assert_eq!(s.tensor(id).data()[0], 0.7);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn matches_the_update_formula_by_hand() {
        // Two steps with g = 0.5 then g = -0.25 from w = 1.0.
        let cfg = AdamWConfig { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.1 };
        let (mut s, id) = store_with(1.0, true, Some(0.5));
        let mut opt = AdamWState::new(cfg);
        opt.step(&mut s).unwrap();
        s.zero_grads();
        s.get_mut(id).tensor.accumulate_grad(&[-0.25]);
        opt.step(&mut s).unwrap();

        let mut w = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (t, g) in [(1, 0.5f64), (2, -0.25)] {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mhat = m / (1.0 - 0.9f64.powi(t));
            let vhat = v / (1.0 - 0.999f64.powi(t));
            w = w * (1.0 - 0.01 * 0.1) - 0.01 * mhat / (vhat.sqrt() + 1e-8);
        }
        assert!((s.tensor(id).data()[0] - w).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let (mut s, id) = store_with(0.3, false, Some(5.0));
        let mut opt = AdamWState::new(AdamWConfig { lr: 1.0, weight_decay: 0.5, ..Default::default() });
        opt.step(&mut s).unwrap();
        assert_eq!(s.tensor(id).data()[0].to_bits(), 0.3f64.to_bits());
        assert!(!opt.has_moments(id));
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let (mut s, _) = store_with(0.3, true, None);
        let mut opt = AdamWState::new(AdamWConfig::default());
        assert!(matches!(opt.step(&mut s), Err(NumericsError::Optimizer(_))));
        assert_eq!(opt.step_count(), 0);
    }
}
