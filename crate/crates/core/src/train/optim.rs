use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::diffmath::Mat;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub weight_decay: f64,
    /// Length of the cosine decay; the rate reaches zero at this step.
    pub total_steps: usize,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.95
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64, total_steps: usize) -> Self {
        AdamWConfig {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay,
            total_steps,
        }
    }
}

/// Adaptive-moment state with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    first: Vec<Mat>,
    second: Vec<Mat>,
    step: usize,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, params: &[&Mat]) -> Self {
        let zeros = || params.iter().map(|p| Mat::zeros(p.rows(), p.cols())).collect::<Vec<_>>();
        OptimizerState { config, first: zeros(), second: zeros(), step: 0 }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Learning rate for the 1-based step `t`: `lr · ½(1 + cos(π t / T))`.
    pub fn lr_at(&self, t: usize) -> f64 {
        let total = self.config.total_steps.max(1);
        let frac = t.min(total) as f64 / total as f64;
        self.config.lr * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * frac))
    }

    /// Applies one update in place. `params` and `grads` are matched by position.
    pub fn step(&mut self, params: &mut [&mut Mat], grads: &[Mat]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::ShapeMismatch {
                op: "optimizer_step",
                expected: (self.first.len(), 1),
                found: (grads.len(), 1),
            });
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.first[k].shape() || g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer_step",
                    expected: self.first[k].shape(),
                    found: g.shape(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient { node: k });
            }
        }
        self.step += 1;
        let t = self.step;
        let AdamWConfig { beta1, beta2, eps, weight_decay, .. } = self.config;
        let lr = self.lr_at(t);
        let bc1 = 1.0 - libm::pow(beta1, t as f64);
        let bc2 = 1.0 - libm::pow(beta2, t as f64);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first[k].as_mut_slice();
            let v = self.second[k].as_mut_slice();
            for (((pi, &gi), mi), vi) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * (mhat / (libm::sqrt(vhat) + eps) + weight_decay * *pi);
            }
        }
        Ok(())
    }
}

/// One update: `optimizer_step(state, params, grads)`.
pub fn optimizer_step(state: &mut OptimizerState, params: &mut [&mut Mat], grads: &[Mat]) -> Result<()> {
    state.step(params, grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = Mat::from_rows(&[[1.0, -2.0, 0.5]]);
        let g = Mat::from_rows(&[[0.3, -0.3, 0.3]]);
        let cfg = AdamWConfig::new(1e-2, 0.0, 1000);
        let mut st = OptimizerState::new(cfg, &[&p]);
        let before = p.clone();
        st.step(&mut [&mut p], core::slice::from_ref(&g)).unwrap();
        // m̂ = g, v̂ = g², update = lr_1 · g/(|g| + eps)
        let lr1 = st.lr_at(1);
        for k in 0..3 {
            let gk = g.as_slice()[k];
            let expected = -lr1 * gk / (gk.abs() + 1e-8);
            assert!((p.as_slice()[k] - before.as_slice()[k] - expected).abs() < 1e-15);
            assert!((expected.abs() - lr1).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = Mat::from_rows(&[[1.0, 2.0]]);
        let mut st = OptimizerState::new(AdamWConfig::new(0.1, 0.0, 10), &[&p]);
        for _ in 0..3 {
            st.step(&mut [&mut p], &[Mat::zeros(1, 2)]).unwrap();
        }
        assert_eq!(p, Mat::from_rows(&[[1.0, 2.0]]));
        assert_eq!(st.steps_taken(), 3);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let p = Mat::zeros(1, 1);
        let st = OptimizerState::new(AdamWConfig::new(5e-4, 0.2, 400), &[&p]);
        assert!((st.lr_at(0) - 5e-4).abs() < 1e-18);
        assert!((st.lr_at(200) - 2.5e-4).abs() < 1e-15);
        assert!(st.lr_at(400) <= 1e-8 * 5e-4);
    }

    #[test]
    fn decay_is_decoupled_from_the_gradient() {
        let mut p = Mat::from_rows(&[[2.0]]);
        let cfg = AdamWConfig::new(0.1, 0.5, 1_000_000);
        let mut st = OptimizerState::new(cfg, &[&p]);
        st.step(&mut [&mut p], &[Mat::zeros(1, 1)]).unwrap();
        let lr = st.lr_at(1);
        assert!((p.as_slice()[0] - (2.0 - lr * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut p = Mat::zeros(1, 2);
        let mut st = OptimizerState::new(AdamWConfig::new(0.1, 0.0, 10), &[&p]);
        assert!(matches!(
            st.step(&mut [&mut p], &[Mat::from_rows(&[[f64::NAN, 0.0]])]),
            Err(Error::NonFiniteGradient { .. })
        ));
        assert!(st.step(&mut [&mut p], &[Mat::zeros(2, 2)]).is_err());
        assert_eq!(st.steps_taken(), 0);
    }
}
