use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        // Transformer-style betas.
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Adam with bias correction. One pair of moment buffers per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        Adam {
            config,
            step: 0,
            first: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            second: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    /// Rebuilds optimizer state from serialized moments.
    pub fn from_state(
        config: AdamConfig,
        step: u64,
        first: Vec<Vec<T>>,
        second: Vec<Vec<T>>,
    ) -> Result<Self> {
        if first.len() != second.len() || first.iter().zip(&second).any(|(a, b)| a.len() != b.len()) {
            return Err(TensorError::Invalid("adam moment buffers disagree".into()));
        }
        Ok(Adam {
            config,
            step,
            first,
            second,
        })
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.first, &self.second)
    }

    /// Applies one update using each parameter's accumulated gradient.
    /// Parameters without a gradient buffer are left untouched.
    pub fn step(&mut self, params: &mut [Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != self.first.len()
            || params.iter().zip(&self.first).any(|(p, m)| p.len() != m.len())
        {
            return Err(TensorError::Shape {
                op: "adam_step",
                left: params.iter().map(Tensor::len).collect(),
                right: self.first.iter().map(Vec::len).collect(),
            });
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
        let step_size = T::from_f64_lossy(lr / bc1);
        let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
        let eps = T::from_f64_lossy(eps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let (value, grad) = p.value_and_grad_mut();
            let Some(grad) = grad else { continue };
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let denom = (v[i] * inv_bc2).sqrt() + eps;
                value[i] -= step_size * m[i] / denom;
            }
        }
        Ok(())
    }
}
