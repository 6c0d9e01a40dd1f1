//! Adam with bias correction and a step-decay learning-rate schedule.

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning-rate multiplier applied every `decay_period` epochs.
    pub decay_factor: f64,
    pub decay_period: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_factor: 0.1,
            decay_period: 10,
        }
    }
}

/// Per-parameter first/second moment buffers plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimState<S: Scalar> {
    pub config: AdamConfig,
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
    pub step: u64,
}

impl<S: Scalar> OptimState<S> {
    pub fn new(config: AdamConfig, params: &[Tensor<S>]) -> Self {
        OptimState {
            config,
            m: params.iter().map(|p| vec![S::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![S::zero(); p.numel()]).collect(),
            step: 0,
        }
    }

    /// Effective learning rate after step decay for the given epoch.
    pub fn effective_lr(&self, epoch: usize) -> f64 {
        let k = if self.config.decay_period == 0 {
            0
        } else {
            epoch / self.config.decay_period
        };
        self.config.lr * self.config.decay_factor.powi(k as i32)
    }

    /// One bias-corrected Adam update over all parameters.
    ///
    /// `grads[i]` may be `None` when a parameter received no gradient this
    /// step (e.g. its loss term has weight zero); such parameters and their
    /// moments are left untouched.
    pub fn step(
        &mut self,
        params: &mut [(String, Tensor<S>)],
        grads: &[Option<Vec<S>>],
        epoch: usize,
    ) -> Result<()> {
        assert_eq!(params.len(), grads.len());
        for ((name, p), g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(CoreError::NonFinite(format!("gradient of parameter {name}")));
                }
                assert_eq!(g.len(), p.numel(), "gradient shape mismatch for {name}");
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let lr = S::from_f64(self.effective_lr(epoch));
        let b1 = S::from_f64(self.config.beta1);
        let b2 = S::from_f64(self.config.beta2);
        let eps = S::from_f64(self.config.eps);
        let bc1 = S::one() - b1.powi(t);
        let bc2 = S::one() - b2.powi(t);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (j, d) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j];
                m[j] = b1 * m[j] + (S::one() - b1) * gj;
                v[j] = b2 * v[j] + (S::one() - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *d = *d - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
