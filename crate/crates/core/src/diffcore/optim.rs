use serde::{Deserialize, Serialize};

use super::{DiffError, Result, Tensor};

fn ensure_finite(grads: &[Tensor]) -> Result<()> {
    if grads.iter().all(Tensor::is_finite) {
        Ok(())
    } else {
        Err(DiffError::NumericalFailure("non-finite gradient".into()))
    }
}

fn ensure_aligned(params: &[&mut Tensor], grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len()
        || params.iter().zip(grads).any(|(p, g)| p.shape() != g.shape())
    {
        return Err(DiffError::Shape("parameters and gradients do not line up".into()));
    }
    Ok(())
}

/// Plain gradient descent without momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Self { lr }
    }

    pub fn step(&mut self, mut params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        ensure_finite(grads)?;
        ensure_aligned(&params, grads)?;
        for (p, g) in params.iter_mut().zip(grads) {
            for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
                *x -= self.lr * d;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, mut params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        ensure_finite(grads)?;
        ensure_aligned(&params, grads)?;
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (e, (x, d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[e] = beta1 * m[e] + (1.0 - beta1) * d;
                v[e] = beta2 * v[e] + (1.0 - beta2) * d * d;
                let mh = m[e] / bc1;
                let vh = v[e] / bc2;
                *x -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step() {
        let mut p = Tensor::vector(vec![1.0]);
        Sgd::new(0.1).step(vec![&mut p], &[Tensor::vector(vec![2.0])]).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_grad_is_noop() {
        let mut p = Tensor::vector(vec![1.5, -2.0]);
        Sgd::new(0.1).step(vec![&mut p], &[Tensor::vector(vec![0.0, 0.0])]).unwrap();
        assert_eq!(p.data(), &[1.5, -2.0]);
    }

    #[test]
    fn adam_moves_against_gradient_sign() {
        let mut p = Tensor::vector(vec![0.0, 0.0]);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(vec![&mut p], &[Tensor::vector(vec![3.0, -0.01])]).unwrap();
        assert!(p.data()[0] < 0.0);
        assert!(p.data()[1] > 0.0);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = Tensor::vector(vec![0.0]);
        let err = Adam::new(AdamConfig::default())
            .step(vec![&mut p], &[Tensor::vector(vec![f64::NAN])])
            .unwrap_err();
        assert!(matches!(err, DiffError::NumericalFailure(_)));
        let err = Sgd::new(0.1)
            .step(vec![&mut p], &[Tensor::vector(vec![f64::INFINITY])])
            .unwrap_err();
        assert!(matches!(err, DiffError::NumericalFailure(_)));
    }
}
