//! Bias-corrected Adam over a flat list of parameter tensors.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    /// GAN-training defaults: lr 2e-4, beta1 0.5, beta2 0.999.
    fn default() -> Self {
        AdamConfig { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    /// Standard classifier defaults (higher momentum than the GAN setting).
    pub fn classifier() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter first/second moment state plus the shared step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, params: &[Tensor]) -> Self {
        AdamState {
            cfg,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Apply one update. `grads` must align one-to-one with `params`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.t += 1;
        let c1 = 1.0 - (self.cfg.beta1 as f64).powi(self.t as i32);
        let c2 = 1.0 - (self.cfg.beta2 as f64).powi(self.t as i32);
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.len(), g.len(), "gradient shape mismatch");
            let gd = g.data();
            for (i, pv) in p.data_mut().iter_mut().enumerate() {
                let gi = gd[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] as f64 / c1;
                let v_hat = v[i] as f64 / c2;
                *pv -= (self.cfg.lr as f64 * m_hat / (v_hat.sqrt() + self.cfg.eps as f64)) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // theta = 0, g = 1, lr = 1e-3: bias correction gives m_hat = v_hat = 1,
        // so the first step is -lr / (1 + eps).
        let cfg = AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let mut params = vec![Tensor::new(vec![1], vec![0.0])];
        let mut adam = AdamState::new(cfg, &params);
        adam.step(&mut params, &[Tensor::new(vec![1], vec![1.0])]);
        let got = params[0].data()[0];
        assert!((got + 1e-3).abs() < 1e-9, "{got}");
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![Tensor::new(vec![3], vec![0.1, -0.2, 0.3])];
        let before = params[0].clone();
        let mut adam = AdamState::new(AdamConfig::default(), &params);
        for _ in 0..25 {
            adam.step(&mut params, &[Tensor::zeros(vec![3])]);
        }
        assert_eq!(params[0], before);
    }

    #[test]
    fn ten_steps_on_quadratic_match_scalar_recurrence() {
        // Minimize f(theta) = theta^2 from theta = 1; oracle is an
        // independent f64 recurrence of the same update rule.
        let cfg = AdamConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let mut params = vec![Tensor::new(vec![1], vec![1.0])];
        let mut adam = AdamState::new(cfg, &params);

        let mut theta = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=10u32 {
            // implementation step
            let g = 2.0 * params[0].data()[0];
            adam.step(&mut params, &[Tensor::new(vec![1], vec![g])]);

            // oracle step
            let og = 2.0 * theta;
            m = 0.9 * m + 0.1 * og;
            v = 0.999 * v + 0.001 * og * og;
            let m_hat = m / (1.0 - 0.9f64.powi(t as i32));
            let v_hat = v / (1.0 - 0.999f64.powi(t as i32));
            theta -= 0.1 * m_hat / (v_hat.sqrt() + 1e-8);

            let got = params[0].data()[0] as f64;
            assert!((got - theta).abs() < 1e-6, "step {t}: {got} vs {theta}");
        }
    }

    #[test]
    #[should_panic(expected = "gradient shape mismatch")]
    fn shape_mismatch_panics() {
        let mut params = vec![Tensor::zeros(vec![2])];
        let mut adam = AdamState::new(AdamConfig::default(), &params);
        adam.step(&mut params, &[Tensor::zeros(vec![3])]);
    }
}
