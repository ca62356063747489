use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{AutodiffError, Result};
use crate::nn::Module;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for one parameter group. Buffers are sized on the first step.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Nothing is modified when any gradient
    /// is non-finite.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], names: &[String], lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(AutodiffError::InvalidLearningRate(lr));
        }
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
                return Err(AutodiffError::NanGradient(name));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "parameter group changed between steps");
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((x, &gr), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gr;
                *vi = beta2 * *vi + (1.0 - beta2) * gr * gr;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Store the step count and moment buffers under `prefix.`.
    pub fn save_into(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.push(format!("{prefix}.step"), Tensor::scalar(self.step as f64));
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            ck.push(format!("{prefix}.m.{i}"), Tensor::from_vec(&[m.len()], m.clone()));
            ck.push(format!("{prefix}.v.{i}"), Tensor::from_vec(&[v.len()], v.clone()));
        }
    }

    /// Inverse of [`AdamState::save_into`].
    pub fn load_from(ck: &Checkpoint, prefix: &str, config: AdamConfig) -> Result<Self> {
        let step = ck
            .get(&format!("{prefix}.step"))
            .ok_or_else(|| AutodiffError::Checkpoint(format!("missing `{prefix}.step`")))?
            .item() as u64;
        let mut state = Self::new(config);
        state.step = step;
        let mut i = 0;
        while let (Some(m), Some(v)) = (ck.get(&format!("{prefix}.m.{i}")), ck.get(&format!("{prefix}.v.{i}"))) {
            state.m.push(m.data().to_vec());
            state.v.push(v.data().to_vec());
            i += 1;
        }
        Ok(state)
    }

    pub fn step_module<M: Module + ?Sized>(&mut self, module: &mut M, grads: &[Tensor], lr: f64) -> Result<()> {
        let names: Vec<String> = module.named_params().into_iter().map(|(n, _)| n).collect();
        let mut params = module.params_mut();
        self.step(&mut params, grads, &names, lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::scalar(0.0);
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step_module(&mut p, &[Tensor::scalar(1.0)], 1e-3).unwrap();
        assert!((p.item() + 1e-3).abs() < 1e-6);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn moments_survive_a_checkpoint() {
        let mut p = Tensor::from_vec(&[2], vec![0.5, -1.0]);
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step_module(&mut p, &[Tensor::from_vec(&[2], vec![0.3, -0.2])], 1e-2).unwrap();
        let mut ck = Checkpoint::new("");
        adam.save_into(&mut ck, "opt");
        let mut restored = AdamState::load_from(&ck, "opt", AdamConfig::default()).unwrap();
        let mut q = p.clone();
        let g = [Tensor::from_vec(&[2], vec![0.1, 0.4])];
        adam.step_module(&mut p, &g, 1e-2).unwrap();
        restored.step_module(&mut q, &g, 1e-2).unwrap();
        assert_eq!(p, q);
        assert_eq!(restored.steps(), 2);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]);
        let before = p.clone();
        let mut adam = AdamState::new(AdamConfig::default());
        for _ in 0..10 {
            adam.step_module(&mut p, &[Tensor::zeros(&[3])], 0.1).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn nan_gradient_reports_name() {
        let mut p = Tensor::scalar(0.0);
        let mut adam = AdamState::new(AdamConfig::default());
        let err = adam
            .step(&mut [&mut p], &[Tensor::scalar(f64::NAN)], &["latent".to_string()], 1e-3)
            .unwrap_err();
        assert!(matches!(err, AutodiffError::NanGradient(ref n) if n == "latent"));
        assert_eq!(p.item(), 0.0);
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn rejects_non_positive_lr() {
        let mut p = Tensor::scalar(0.0);
        let mut adam = AdamState::new(AdamConfig::default());
        assert!(adam.step_module(&mut p, &[Tensor::scalar(1.0)], 0.0).is_err());
    }
}
