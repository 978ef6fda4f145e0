use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer state: one pair of moment buffers per parameter.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        Self {
            config,
            step: 0,
            first: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            second: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of every parameter in place.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} params, {} grads, {} moment buffers",
                    params.len(),
                    grads.len(),
                    self.first.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.numel() != self.first[i].len() {
                return Err(Error::shape(
                    "adam_step",
                    format!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape()),
                ));
            }
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bias1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bias2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps) = (T::lit(c.learning_rate), T::lit(c.epsilon));
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    #[test]
    fn zero_gradient_leaves_params_bit_identical() {
        let mut params = vec![Tensor::<f32>::from_fn([4], |i| (i as f32 - 1.5) * 0.37)];
        let before = params.clone();
        let mut adam = Adam::new(AdamConfig::default(), &params);
        for _ in 0..5 {
            adam.step(&mut params, &[Tensor::zeros([4])]).unwrap();
        }
        for (a, b) in params[0].data().iter().zip(before[0].data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn constant_gradient_moves_against_sign() {
        let mut params = vec![Tensor::<f64>::zeros([2])];
        let g = Tensor::new([2], vec![0.5, -2.0]).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &params);
        for _ in 0..100 {
            adam.step(&mut params, std::slice::from_ref(&g)).unwrap();
        }
        assert!(params[0].data()[0] < 0.0);
        assert!(params[0].data()[1] > 0.0);
    }

    #[test]
    fn minimizes_quadratic_bowl() {
        let config = AdamConfig {
            learning_rate: 1e-2,
            ..Default::default()
        };
        let mut params = vec![Tensor::<f64>::new([1], vec![1.0]).unwrap()];
        let mut adam = Adam::new(config, &params);
        let mut reached = None;
        for step in 1..=2000 {
            let mut tape = Tape::new();
            let x = tape.param(params[0].clone());
            let sq = tape.square(x).unwrap();
            let loss = tape.sum(sq);
            let g = tape.grad(loss, &[x]).unwrap();
            adam.step(&mut params, &g).unwrap();
            if params[0].data()[0].abs() < 1e-3 {
                reached = Some(step);
                break;
            }
        }
        assert!(reached.is_some(), "x = {}", params[0].data()[0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut params = vec![Tensor::<f32>::zeros([3])];
        let mut adam = Adam::new(AdamConfig::default(), &params);
        assert!(adam.step(&mut params, &[Tensor::zeros([2])]).is_err());
        assert!(adam.step(&mut params, &[]).is_err());
        assert_eq!(adam.steps(), 0);
    }
}
