use crate::diffcore::params::ParameterSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Per-epoch decay: the step size at epoch `e` is `lr / (1 + decay * e)`.
    pub decay: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay: 0.0,
        }
    }
}

/// Bias-corrected Adam with moment buffers for one parameter set.
///
/// Each training phase owns its own `Adam`, so moments of different
/// objectives never mix even when they update the same parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParameterSet) -> Self {
        let first: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            config,
            second: first.clone(),
            first,
            steps: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the gradients stored in `params`, then clears
    /// them. Every trainable parameter must carry a gradient.
    pub fn step(&mut self, params: &mut ParameterSet, epoch: usize) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::Gradient("optimizer state does not match parameter set".into()));
        }
        if let Some(p) = params.iter().find(|p| p.trainable && p.grad.is_none()) {
            return Err(Error::Gradient(format!("missing gradient for {}", p.name)));
        }
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let lr = c.lr / (1.0 + c.decay * epoch as f64);
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let grad = p.grad.take().expect("checked above");
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((w, g), mi), vi) in p.value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * g;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::tensor::Tensor;

    fn single(value: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.add("w", Tensor::scalar(value), true);
        p
    }

    fn set_grad(p: &mut ParameterSet, g: f64) {
        p.get_mut(0).grad = Some(Tensor::scalar(g));
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = single(1.25);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &p);
        for _ in 0..10 {
            set_grad(&mut p, 0.0);
            adam.step(&mut p, 0).unwrap();
        }
        assert_eq!(p.get(0).value.data()[0], 1.25);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [3.0, -0.02, 150.0] {
            let mut p = single(0.0);
            let mut adam = Adam::new(AdamConfig::with_lr(1e-3), &p);
            set_grad(&mut p, g);
            adam.step(&mut p, 0).unwrap();
            // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
            let expected = -1e-3 * g / (g.abs() + 1e-8);
            assert!((p.get(0).value.data()[0] - expected).abs() < 1e-12);
            assert!((p.get(0).value.data()[0].abs() - 1e-3).abs() < 1e-6);
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut p = single(1.0);
        let mut adam = Adam::new(AdamConfig::with_lr(1e-2), &p);
        for _ in 0..500 {
            let w = p.get(0).value.data()[0];
            set_grad(&mut p, 2.0 * w);
            adam.step(&mut p, 0).unwrap();
        }
        assert!(p.get(0).value.data()[0].abs() < 1e-3);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = single(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        assert!(adam.step(&mut p, 0).is_err());
        set_grad(&mut p, 1.0);
        adam.step(&mut p, 0).unwrap();
        // gradients are consumed by the step
        assert!(adam.step(&mut p, 0).is_err());
    }

    #[test]
    fn decay_shrinks_step_per_epoch() {
        let mut a = single(0.0);
        let mut b = single(0.0);
        let cfg = AdamConfig { decay: 1.0, ..AdamConfig::with_lr(1e-2) };
        let (mut oa, mut ob) = (Adam::new(cfg, &a), Adam::new(cfg, &b));
        set_grad(&mut a, 1.0);
        set_grad(&mut b, 1.0);
        oa.step(&mut a, 0).unwrap();
        ob.step(&mut b, 1).unwrap();
        let (da, db) = (a.get(0).value.data()[0], b.get(0).value.data()[0]);
        assert!((da / db - 2.0).abs() < 1e-9);
    }
}
