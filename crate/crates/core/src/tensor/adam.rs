//! Bias-corrected Adam over a flat parameter list.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// First/second-moment buffers plus the step counter.
pub struct AdamState {
    m: Vec<Vec<Scalar>>,
    v: Vec<Vec<Scalar>>,
    t: u64,
    pub beta1: Scalar,
    pub beta2: Scalar,
    pub eps: Scalar,
    pub lr: Scalar,
}

impl AdamState {
    pub fn new(params: &[Tensor], lr: Scalar, beta1: Scalar, beta2: Scalar, eps: Scalar) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
            beta1,
            beta2,
            eps,
            lr,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update. Consumes the gradient slot of every parameter (it is
    /// zeroed afterwards); a parameter missing its gradient is an error.
    pub fn step(&mut self, params: &mut [Tensor]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::invalid(
                "adam_step",
                format!("{} params vs state for {}", params.len(), self.m.len()),
            ));
        }
        for (i, p) in params.iter().enumerate() {
            match p.grad() {
                None => {
                    return Err(Error::invalid(
                        "adam_step",
                        format!("parameter {} has no gradient", i),
                    ))
                }
                Some(g) if g.len() != self.m[i].len() => {
                    return Err(Error::shape(
                        "adam_step",
                        format!("parameter {} gradient length changed", i),
                    ))
                }
                _ => {}
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            {
                let g = p.grad().expect("checked above");
                for ((m, v), &gi) in self.m[i].iter_mut().zip(self.v[i].iter_mut()).zip(g) {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                }
            }
            let (m, v) = (&self.m[i], &self.v[i]);
            for ((w, &mi), &vi) in p.data_mut().iter_mut().zip(m).zip(v) {
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params_with_grad(values: &[Scalar], grads: &[Scalar]) -> Vec<Tensor> {
        let mut p = Tensor::new(vec![values.len()], values.to_vec())
            .unwrap()
            .with_requires_grad();
        p.accumulate_grad(grads).unwrap();
        vec![p]
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // g = 1 everywhere, t = 1: bias correction gives m_hat = v_hat = 1,
        // so the update is lr / (1 + eps)
        let mut params = params_with_grad(&[0.0, 5.0], &[1.0, 1.0]);
        let mut adam = AdamState::new(&params, 0.01, 0.9, 0.999, 1e-8);
        adam.step(&mut params).unwrap();
        let expected = 0.01 / (1.0 + 1e-8);
        assert!((params[0].data()[0] + expected).abs() < 1e-7);
        assert!((params[0].data()[1] - (5.0 - expected)).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut params = params_with_grad(&[1.25, -0.5], &[0.0, 0.0]);
        let before = params[0].data().to_vec();
        let mut adam = AdamState::new(&params, 0.1, 0.9, 0.999, 1e-8);
        adam.step(&mut params).unwrap();
        assert_eq!(params[0].data(), &before[..]);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut params = vec![Tensor::zeros(vec![2]).with_requires_grad()];
        let mut adam = AdamState::new(&params, 0.1, 0.9, 0.999, 1e-8);
        assert!(adam.step(&mut params).is_err());
    }

    #[test]
    fn converges_on_scalar_quadratic_matching_reference_recurrence() {
        // minimize (w - 3)^2 from w = 0 with lr 0.1, and replay the same
        // recurrence with plain scalars as the oracle
        let mut params = vec![Tensor::new(vec![1], vec![0.0]).unwrap().with_requires_grad()];
        let mut adam = AdamState::new(&params, 0.1, 0.9, 0.999, 1e-8);

        let (mut w_ref, mut m_ref, mut v_ref): (Scalar, Scalar, Scalar) = (0.0, 0.0, 0.0);
        for t in 1..=100u64 {
            let w = params[0].data()[0];
            let g = 2.0 * (w - 3.0);
            params[0].accumulate_grad(&[g]).unwrap();
            adam.step(&mut params).unwrap();

            let g_ref = 2.0 * (w_ref - 3.0);
            m_ref = 0.9 * m_ref + 0.1 * g_ref;
            v_ref = 0.999 * v_ref + 0.001 * g_ref * g_ref;
            let m_hat = m_ref / (1.0 - (0.9 as Scalar).powi(t as i32));
            let v_hat = v_ref / (1.0 - (0.999 as Scalar).powi(t as i32));
            w_ref -= 0.1 * m_hat / (v_hat.sqrt() + 1e-8);

            assert!(
                (params[0].data()[0] - w_ref).abs() < 1e-4,
                "diverged from reference at step {}",
                t
            );
        }
        assert!((params[0].data()[0] - 3.0).abs() < 0.5);
        assert_eq!(adam.step_count(), 100);
    }
}
