use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A named trainable buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Self {
            name: name.into(),
            shape,
            values,
        }
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.values.clone()).expect("param shape")
    }
}

/// Adam hyperparameters with an epoch-based step decay of the learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epochs between decays; 0 disables decay.
    pub decay_interval: usize,
    pub decay_rate: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 8e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_interval: 20,
            decay_rate: 0.5,
        }
    }
}

impl AdamConfig {
    /// `lr * decay_rate^floor(epoch / decay_interval)`, epochs counted from 0.
    pub fn effective_lr(&self, epoch: usize) -> f64 {
        if self.decay_interval == 0 {
            return self.lr;
        }
        self.lr * self.decay_rate.powi((epoch / self.decay_interval) as i32)
    }

    pub fn validate(&self, errors: &mut Vec<String>) {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errors.push(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            errors.push("adam betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            errors.push("adam eps must be positive".into());
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            errors.push(format!("decay rate must lie in (0, 1], got {}", self.decay_rate));
        }
    }
}

/// Moment accumulators mirroring a parameter list.
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[&Param]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.values.len()]).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update at the learning rate for `epoch`.
    /// Gradients are checked before anything is modified.
    pub fn step(&mut self, params: &mut [&mut Param], grads: &[Tensor], epoch: usize) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::invalid("adam: parameter/gradient count mismatch"));
        }
        for (p, g) in params.iter().zip(grads) {
            if g.len() != p.values.len() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape.clone(),
                    right: g.shape().to_vec(),
                });
            }
            if g.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient { param: p.name.clone() });
            }
        }
        self.step += 1;
        let c = &self.config;
        let lr = c.effective_lr(epoch);
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, &gi) in g.data().iter().enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.values[i] -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_decay_schedule() {
        let c = AdamConfig {
            lr: 8e-4,
            decay_interval: 20,
            decay_rate: 0.5,
            ..Default::default()
        };
        assert_eq!(c.effective_lr(0), 8e-4);
        assert_eq!(c.effective_lr(19), 8e-4);
        assert_eq!(c.effective_lr(20), 4e-4);
        assert!((c.effective_lr(40) - 2e-4).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Param::new("w", vec![3], vec![1.0, -2.0, 0.5]);
        let before = p.values.clone();
        let mut st = AdamState::new(AdamConfig::default(), &[&p]);
        st.step(&mut [&mut p], &[Tensor::zeros(&[3])], 0).unwrap();
        assert_eq!(p.values, before);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // m_hat = g, v_hat = g^2 after one step, so the update is lr * g / (|g| + eps).
        for g in [3.0, -0.25] {
            let mut p = Param::new("w", vec![1], vec![0.0]);
            let cfg = AdamConfig::default();
            let mut st = AdamState::new(cfg.clone(), &[&p]);
            st.step(&mut [&mut p], &[Tensor::new(vec![1], vec![g]).unwrap()], 0)
                .unwrap();
            let expected = -cfg.lr * g / (g.abs() + cfg.eps);
            assert!((p.values[0] - expected).abs() < 1e-18);
            assert!((p.values[0] + cfg.lr * g.signum()).abs() < 1e-10);
        }
    }

    #[test]
    fn non_finite_gradient_names_param() {
        let mut p = Param::new("layer0.weight", vec![1], vec![0.0]);
        let mut st = AdamState::new(AdamConfig::default(), &[&p]);
        let err = st
            .step(&mut [&mut p], &[Tensor::new(vec![1], vec![f64::NAN]).unwrap()], 0)
            .unwrap_err();
        assert!(err.to_string().contains("layer0.weight"));
        assert_eq!(p.values, vec![0.0]);
    }
}
