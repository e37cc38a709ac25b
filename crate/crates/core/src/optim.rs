//! Adam with a cosine-decayed learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Horizon of the cosine schedule.
    pub total_steps: usize,
}

impl AdamConfig {
    pub fn new(base_lr: f64, total_steps: usize) -> Self {
        AdamConfig {
            base_lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            total_steps,
        }
    }

    /// `base_lr * 0.5 * (1 + cos(pi * t / total_steps))`.
    pub fn learning_rate(&self, t: usize) -> f64 {
        let frac = t.min(self.total_steps) as f64 / self.total_steps.max(1) as f64;
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    step: usize,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Number of updates applied so far.
    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.config.learning_rate(self.step)
    }

    /// Applies one update to every parameter in place.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
        if self.step >= self.config.total_steps {
            return Err(Error::InvalidArgument(format!(
                "adam step {} beyond schedule of {} steps",
                self.step, self.config.total_steps
            )));
        }
        if params.len() != grads.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} params vs {} grads", params.len(), grads.len()),
            ));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!("optimizer tracks {} params, got {}", self.m.len(), params.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m[i].len() != p.len() {
                return Err(Error::shape(
                    "adam_step",
                    format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
        }

        let lr = T::lit(self.current_lr());
        let (b1, b2, eps) = (
            T::lit(self.config.beta1),
            T::lit(self.config.beta2),
            T::lit(self.config.eps),
        );
        let t = (self.step + 1) as i32;
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = b1 * m[k] + (T::one() - b1) * gk;
                v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        let c = AdamConfig::new(0.1, 500);
        assert_eq!(c.learning_rate(0), 0.1);
        assert!(c.learning_rate(500) <= 1e-12 * 0.1);
        assert!((c.learning_rate(250) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut adam = Adam::new(AdamConfig::new(0.1, 10));
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let g = Tensor::vector(vec![0.0, 0.0]);
        adam.step(&mut [&mut p], &[&g]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(adam.steps_taken(), 1);
    }

    #[test]
    fn moves_against_gradient() {
        let mut adam = Adam::new(AdamConfig::new(0.1, 10));
        let mut p = Tensor::scalar(0.0);
        adam.step(&mut [&mut p], &[&Tensor::scalar(1.0)]).unwrap();
        assert!(p.data()[0] < 0.0);
    }

    #[test]
    fn converges_on_quadratic_bowl() {
        let steps = 500;
        let mut adam = Adam::new(AdamConfig::new(0.1, steps));
        let mut p = Tensor::scalar(0.0f64);
        for _ in 0..steps {
            let g = Tensor::scalar(2.0 * (p.data()[0] - 3.0));
            adam.step(&mut [&mut p], &[&g]).unwrap();
        }
        assert!((p.data()[0] - 3.0).abs() < 0.05, "p = {}", p.data()[0]);
    }

    #[test]
    fn errors() {
        let mut adam = Adam::new(AdamConfig::new(0.1, 1));
        let mut p = Tensor::vector(vec![0.0, 0.0]);
        assert!(adam.step(&mut [&mut p], &[&Tensor::scalar(1.0)]).is_err());
        adam.step(&mut [&mut p], &[&Tensor::vector(vec![1.0, 1.0])]).unwrap();
        assert!(adam.step(&mut [&mut p], &[&Tensor::vector(vec![1.0, 1.0])]).is_err());
    }
}
