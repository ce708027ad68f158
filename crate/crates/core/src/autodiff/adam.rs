use crate::error::Error;
use crate::scalar::Scalar;
use crate::Result;

use super::Tensor;

/// Adam hyperparameters. The conventional defaults (0.9, 0.999, 1e-8) are
/// used everywhere; only the learning rate varies between training and
/// latent refinement.
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
}

impl<T: Scalar> AdamConfig<T> {
    pub fn with_lr(lr: T) -> Self {
        AdamConfig {
            lr,
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            epsilon: T::from_f64(1e-8),
        }
    }
}

/// First/second moment accumulators for a fixed list of parameter tensors.
/// Moment buffers are sized on the first step and must keep matching the
/// parameter shapes afterwards; the step counter strictly increases.
pub struct AdamState<T> {
    pub cfg: AdamConfig<T>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
    bias1: T,
    bias2: T,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(cfg: AdamConfig<T>) -> Self {
        AdamState {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
            bias1: T::one(),
            bias2: T::one(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Validates the gradients, advances the step counter, and caches the
    /// bias corrections; follow with one [`update_slot`](Self::update_slot)
    /// per parameter tensor in slot order. A non-finite gradient aborts
    /// with the offending slot.
    pub fn begin_step(&mut self, grads: &[Vec<T>]) -> Result<()> {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != grads.len() {
            return Err(Error::Contract(format!(
                "adam: state holds {} slots, got {} gradients",
                self.m.len(),
                grads.len()
            )));
        }
        for (slot, g) in grads.iter().enumerate() {
            if g.len() != self.m[slot].len() {
                return Err(Error::Contract(format!(
                    "adam: slot {slot} moment has {} values, gradient {}",
                    self.m[slot].len(),
                    g.len()
                )));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("adam: gradient of slot {slot}")));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        self.bias1 = T::from_f64(1.0 / (1.0 - self.cfg.beta1.as_f64().powf(t)));
        self.bias2 = T::from_f64(1.0 / (1.0 - self.cfg.beta2.as_f64().powf(t)));
        Ok(())
    }

    /// Bias-corrected update of one parameter tensor.
    pub fn update_slot(&mut self, slot: usize, param: &mut [T], grad: &[T]) {
        assert_eq!(param.len(), grad.len(), "adam slot {slot}: size mismatch");
        assert_eq!(
            param.len(),
            self.m[slot].len(),
            "adam slot {slot}: state mismatch"
        );
        let c = self.cfg;
        let one = T::one();
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        for (((p, &g), m), v) in param
            .iter_mut()
            .zip(grad)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = c.beta1 * *m + (one - c.beta1) * g;
            *v = c.beta2 * *v + (one - c.beta2) * g * g;
            let m_hat = *m * self.bias1;
            let v_hat = *v * self.bias2;
            *p = *p - c.lr * m_hat / (v_hat.sqrt() + c.epsilon);
        }
    }

    /// One bias-corrected Adam update over aligned (parameter, gradient)
    /// lists.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Vec<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "adam: {} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (slot, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != g.len() {
                return Err(Error::Contract(format!(
                    "adam: slot {slot} parameter has {} values, gradient {}",
                    p.numel(),
                    g.len()
                )));
            }
        }
        self.begin_step(grads)?;
        for (slot, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            self.update_slot(slot, param.data_mut(), grad);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = Tensor::vector(vec![1.5f64, -2.0, 0.25]).unwrap();
        let mut state = AdamState::new(AdamConfig::with_lr(0.1));
        state.step(&mut [&mut p], &[vec![0.0; 3]]).unwrap();
        assert_eq!(p.data(), &[1.5, -2.0, 0.25]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient() {
        // With bias correction, the first update is lr * g / (|g| + eps').
        let mut p = Tensor::scalar(0.0f64);
        let lr = 0.05;
        let mut state = AdamState::new(AdamConfig::with_lr(lr));
        state.step(&mut [&mut p], &[vec![3.7]]).unwrap();
        assert!((p.data()[0] + lr).abs() < 1e-6, "got {}", p.data()[0]);

        let mut q = Tensor::scalar(0.0f64);
        let mut state = AdamState::new(AdamConfig::with_lr(lr));
        state.step(&mut [&mut q], &[vec![-0.002]]).unwrap();
        assert!((q.data()[0] - lr).abs() < 1e-4, "got {}", q.data()[0]);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut p = Tensor::scalar(1.0f64);
        let mut state = AdamState::new(AdamConfig::with_lr(0.1));
        let err = state.step(&mut [&mut p], &[vec![f64::NAN]]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // minimize |x - c|^2 from a fixed start
        let target = [0.3f64, -1.2, 2.0];
        let mut x = Tensor::vector(vec![-2.0f64, 1.0, 0.0]).unwrap();
        let mut state = AdamState::new(AdamConfig::with_lr(0.05));
        for _ in 0..200 {
            let grad: Vec<f64> = x
                .data()
                .iter()
                .zip(&target)
                .map(|(&xi, &ci)| 2.0 * (xi - ci))
                .collect();
            state.step(&mut [&mut x], &[grad]).unwrap();
        }
        let dist: f64 = x
            .data()
            .iter()
            .zip(&target)
            .map(|(&xi, &ci)| (xi - ci).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(dist < 1e-3, "distance after 200 steps: {dist}");
    }
}
