use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// Bias-corrected Adam (Kingma & Ba).
#[derive(Debug, Clone)]
pub struct AdamState<S = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor<S>>,
    second: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(lr: f64) -> Self {
        AdamState { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. Moments are allocated on the first call and every
    /// later call must pass parameters of the same shapes in the same order.
    pub fn update(&mut self, params: Vec<&mut Tensor<S>>, grads: &[&Tensor<S>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::LengthMismatch { left: params.len(), right: grads.len() });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch { expected: p.shape().to_vec(), actual: g.shape().to_vec() });
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| p.zeros_like()).collect();
            self.second = params.iter().map(|p| p.zeros_like()).collect();
        } else if self.first.len() != params.len()
            || self.first.iter().zip(&params).any(|(m, p)| m.shape() != p.shape())
        {
            return Err(Error::ShapeMismatch {
                expected: self.first.iter().map(Tensor::len).collect(),
                actual: params.iter().map(|p| p.len()).collect(),
            });
        }

        self.step += 1;
        let t = self.step as i32;
        let b1 = S::lit(self.beta1);
        let b2 = S::lit(self.beta2);
        let one = S::one();
        let corr1 = 1.0 - self.beta1.powi(t);
        let corr2 = 1.0 - self.beta2.powi(t);
        // step = lr * m_hat / (sqrt(v_hat) + eps), with the bias corrections folded in
        let lr_t = S::lit(self.lr / corr1);
        let sqrt_c2 = S::lit(corr2.sqrt());
        let eps = S::lit(self.eps);

        for (i, p) in params.into_iter().enumerate() {
            let g = grads[i].data();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j];
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let denom = v[j].sqrt() / sqrt_c2 + eps;
                *w -= lr_t * m[j] / denom;
            }
        }
        Ok(())
    }
}

pub fn adam_step<S: Scalar>(state: &mut AdamState<S>, params: Vec<&mut Tensor<S>>, grads: &[&Tensor<S>]) -> Result<()> {
    state.update(params, grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::vector(vec![0.0f64, 1.0]);
        let g = Tensor::vector(vec![1.0f64, 1.0]);
        let mut st = AdamState::new(0.01);
        adam_step(&mut st, vec![&mut p], &[&g]).unwrap();
        assert!((p.data()[0] + 0.01).abs() < 1e-9);
        assert!((p.data()[1] - 0.99).abs() < 1e-9);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::vector(vec![0.3f32, -0.7]);
        let g = Tensor::vector(vec![0.0f32, 0.0]);
        let mut st = AdamState::new(0.01);
        for _ in 0..10 {
            st.update(vec![&mut p], &[&g]).unwrap();
        }
        assert_eq!(p.data(), &[0.3, -0.7]);
        assert_eq!(st.step_count(), 10);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::vector(vec![0.0f32; 3]);
        let g = Tensor::vector(vec![0.0f32; 2]);
        let mut st = AdamState::new(0.01);
        assert!(matches!(st.update(vec![&mut p], &[&g]), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn minimizes_quadratic() {
        // f(x) = (x - 3)^2
        let mut p = Tensor::vector(vec![0.0f64]);
        let mut st = AdamState::new(0.1);
        for _ in 0..500 {
            let g = Tensor::vector(vec![2.0 * (p.data()[0] - 3.0)]);
            st.update(vec![&mut p], &[&g]).unwrap();
        }
        assert!((p.data()[0] - 3.0).abs() < 1e-2);
    }
}
