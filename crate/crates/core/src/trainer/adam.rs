use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tensor};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias-corrected moments:
///
/// ```text
/// m <- b1 m + (1 - b1) g
/// v <- b2 v + (1 - b2) g^2
/// p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
/// ```
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &[&Tensor<T>]) -> Self {
        let zeros = |p: &&Tensor<T>| vec![T::zero(); p.len()];
        Self { config, step: 0, m: params.iter().map(zeros).collect(), v: params.iter().map(zeros).collect() }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// Returns the updated parameters; inputs are left untouched.
    pub fn step(&mut self, params: &[&Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<Vec<Tensor<T>>, AutodiffError> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(AutodiffError::InvalidShape {
                op: "adam",
                shape: vec![params.len(), grads.len()],
                reason: format!("optimizer tracks {} tensors", self.m.len()),
            });
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::one() - b1.powi(self.step);
        let bc2 = T::one() - b2.powi(self.step);
        let (lr, eps) = (T::lit(lr), T::lit(c.eps));
        let mut out = Vec::with_capacity(params.len());
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "adam",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut next = Vec::with_capacity(p.len());
            for (j, (&x, &gj)) in p.data().iter().zip(g.data()).enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                next.push(x - lr * m_hat / (v_hat.sqrt() + eps));
            }
            if next.iter().any(|v| !v.is_finite()) {
                return Err(AutodiffError::NonFinite { op: "adam" });
            }
            out.push(Tensor::new(p.shape().to_vec(), next)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_steps_on_quadratic_bowl() {
        // f(x) = x^2 / 2 per coordinate, gradient x.
        let x0 = [3.0f64, -0.5];
        let p = Tensor::vector(x0.to_vec()).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &[&p]);
        let g = Tensor::vector(x0.to_vec()).unwrap();
        let p1 = opt.step(&[&p], &[g], 0.1).unwrap().remove(0);
        // step 1: m_hat = g, v_hat = g^2, so the move is lr * g / (|g| + eps)
        for (x, y) in x0.iter().zip(p1.data()) {
            let expected = x - 0.1 * x / (x.abs() + 1e-8);
            assert!((y - expected).abs() <= 1e-12);
        }
        // step 2 by hand
        let g1 = p1.to_vec();
        let p2 = opt.step(&[&p1], &[Tensor::vector(g1.clone()).unwrap()], 0.1).unwrap().remove(0);
        for j in 0..2 {
            let m = 0.9 * (0.1 * x0[j]) + 0.1 * g1[j];
            let v = 0.999 * (0.001 * x0[j] * x0[j]) + 0.001 * g1[j] * g1[j];
            let m_hat = m / (1.0 - 0.81);
            let v_hat = v / (1.0 - 0.999f64 * 0.999);
            let expected = g1[j] - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
            assert!((p2.data()[j] - expected).abs() <= 1e-12);
        }
        assert_eq!(opt.steps_taken(), 2);
    }

    #[test]
    fn rejects_mismatched_gradients() {
        let p = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &[&p]);
        let g = Tensor::vector(vec![1.0]).unwrap();
        assert!(opt.step(&[&p], &[g], 0.1).is_err());
    }
}
