use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(config: AdamConfig, params: &[Tensor<F>]) -> Self {
        let zeros = || params.iter().map(|p| vec![F::ZERO; p.len()]).collect();
        AdamState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected Adam update.
    pub fn step(&mut self, params: &mut [Tensor<F>], grads: &[Tensor<F>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "adam tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.len() != self.m[i].len() {
                return Err(Error::Shape(format!(
                    "parameter {i}: shape {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let correction1 = 1.0 - c.beta1.powi(t);
        let correction2 = 1.0 - c.beta2.powi(t);
        let b1 = F::from_f64(c.beta1);
        let b2 = F::from_f64(c.beta2);
        let one_b1 = F::from_f64(1.0 - c.beta1);
        let one_b2 = F::from_f64(1.0 - c.beta2);
        let inv_c1 = F::from_f64(1.0 / correction1);
        let inv_c2 = F::from_f64(1.0 / correction2);
        let lr = F::from_f64(c.lr);
        let eps = F::from_f64(c.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((theta, &grad), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + one_b1 * grad;
                *v = b2 * *v + one_b2 * grad * grad;
                let m_hat = *m * inv_c1;
                let v_hat = *v * inv_c2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [0.3f64, -2.5, 1e-3] {
            let mut p = vec![Tensor::from_vec(vec![1.0f64])];
            let mut adam = AdamState::new(AdamConfig::default(), &p);
            adam.step(&mut p, &[Tensor::from_vec(vec![g])]).unwrap();
            let delta = p[0].data()[0] - 1.0;
            assert!((delta + 1e-3 * g.signum()).abs() < 1e-6, "{delta}");
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = vec![Tensor::from_vec(vec![1.0f32, -2.0])];
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        for _ in 0..3 {
            adam.step(&mut p, &[Tensor::from_vec(vec![0.0, 0.0])]).unwrap();
        }
        assert_eq!(p[0].data(), [1.0, -2.0]);
        assert_eq!(adam.step, 3);
    }

    #[test]
    fn quadratic_bowl_loss_decreases() {
        let loss = |x: &[f64]| x[0] * x[0] + 3.0 * x[1] * x[1];
        let mut p = vec![Tensor::from_vec(vec![0.5f64, -0.4])];
        let mut adam = AdamState::new(
            AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            &p,
        );
        let mut last = loss(p[0].data());
        for _ in 0..3 {
            let x = p[0].data().to_vec();
            let grad = Tensor::from_vec(vec![2.0 * x[0], 6.0 * x[1]]);
            adam.step(&mut p, &[grad]).unwrap();
            let now = loss(p[0].data());
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut p = vec![Tensor::from_vec(vec![1.0f64])];
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        assert!(adam.step(&mut p, &[Tensor::from_vec(vec![1.0, 2.0])]).is_err());
    }
}
