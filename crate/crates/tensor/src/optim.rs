//! AdamW with decoupled weight decay.

use crate::error::{Result, TensorError};
use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.005,
        }
    }
}

/// Moment buffers and step counter for every parameter of one store.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn first_moment(&self, index: usize) -> &Tensor {
        &self.first[index]
    }

    pub fn second_moment(&self, index: usize) -> &Tensor {
        &self.second[index]
    }

    /// One AdamW update of every trainable parameter. Fails without touching
    /// anything if a trainable parameter lacks a gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(TensorError::InvalidArgument {
                op: "optimizer_step",
                msg: format!("state tracks {} parameters, store has {}", self.first.len(), store.len()),
            });
        }
        if let Some((_, p)) = store.iter().find(|(_, p)| p.trainable && p.grad.is_none()) {
            return Err(TensorError::MissingGrad(p.name.clone()));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let grad = p.grad.as_ref().expect("checked above");
            let (m, v) = (&mut self.first[id.index()], &mut self.second[id.index()]);
            let decay = if p.decay { c.lr * c.weight_decay } else { 0.0 };
            let values = p.value.data_mut();
            for (((w, g), m), v) in values
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *w -= decay * *w;
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: f64, decay: bool) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::new(vec![1], vec![value]).unwrap(), decay).unwrap();
        s.get_mut(id).grad = Some(Tensor::new(vec![1], vec![grad]).unwrap());
        s
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = single(1.0, 1.0, false);
        let mut opt = OptimizerState::new(&s, AdamWConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() });
        opt.step(&mut s).unwrap();
        // mhat = 1, vhat = 1 -> step = lr / (1 + eps)
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((s.value(s.id("w").unwrap()).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_without_decay_is_a_no_op() {
        let mut s = single(0.7, 0.0, true);
        let mut opt = OptimizerState::new(&s, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        opt.step(&mut s).unwrap();
        assert_eq!(s.value(s.id("w").unwrap()).data()[0], 0.7);
    }

    #[test]
    fn second_step_bias_correction_closed_form() {
        // Constant gradient g: m_t = (1 - b1^t) g, v_t = (1 - b2^t) g^2, so
        // the corrected ratio is exactly g / |g| and each step moves by lr.
        let (b1, b2, lr, g) = (0.9, 0.95, 0.01, 0.3);
        let mut s = single(2.0, g, false);
        let cfg = AdamWConfig { lr, beta1: b1, beta2: b2, eps: 0.0, weight_decay: 0.0 };
        let mut opt = OptimizerState::new(&s, cfg);
        opt.step(&mut s).unwrap();
        opt.step(&mut s).unwrap();
        let v2 = opt.second_moment(0).data()[0];
        let expected_v2 = (1.0 - b2) * b2 * g * g + (1.0 - b2) * g * g;
        assert!((v2 - expected_v2).abs() < 1e-15);
        assert!((v2 / (1.0 - b2 * b2) - g * g).abs() < 1e-15);
        let w = s.value(s.id("w").unwrap()).data()[0];
        assert!((w - (2.0 - 2.0 * lr)).abs() < 1e-12, "{w}");
    }

    #[test]
    fn decoupled_decay_precedes_moment_update() {
        let mut s = single(2.0, 0.0, true);
        let mut opt = OptimizerState::new(&s, AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() });
        opt.step(&mut s).unwrap();
        assert!((s.value(s.id("w").unwrap()).data()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(vec![2]), true).unwrap();
        let mut opt = OptimizerState::new(&s, AdamWConfig::default());
        assert_eq!(opt.step(&mut s), Err(TensorError::MissingGrad("w".into())));
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn frozen_params_are_untouched() {
        let mut s = single(1.0, 5.0, true);
        let id = s.id("w").unwrap();
        s.set_trainable(id, false);
        s.get_mut(id).grad = None;
        let mut opt = OptimizerState::new(&s, AdamWConfig::default());
        opt.step(&mut s).unwrap();
        assert_eq!(s.value(id).data()[0], 1.0);
    }
}
