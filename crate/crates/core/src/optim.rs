//! Adam with bias correction.

use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment buffers for one flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, cfg: AdamConfig) -> Self {
        Self { cfg, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    /// Applies one update in place. A zero learning rate leaves the
    /// parameters untouched bit for bit.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - libm::pow(beta1, self.t as f64);
        let c2 = 1.0 - libm::pow(beta2, self.t as f64);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            if lr != 0.0 {
                let mh = self.m[i] / c1;
                let vh = self.v[i] / c2;
                params[i] -= lr * mh / (libm::sqrt(vh) + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut a = Adam::new(2, AdamConfig::default());
        let mut p = [1.0, -1.0];
        a.step(&mut p, &[0.5, -2.0], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut a = Adam::new(1, AdamConfig::default());
        let mut p = [0.123456789];
        for _ in 0..5 {
            a.step(&mut p, &[3.0], 0.0);
        }
        assert_eq!(p[0].to_bits(), 0.123456789f64.to_bits());
    }

    #[test]
    fn minimizes_quadratic() {
        let mut a = Adam::new(1, AdamConfig::default());
        let mut p = [5.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 2.0)];
            a.step(&mut p, &g, 0.05);
        }
        assert!((p[0] - 2.0).abs() < 1e-2);
    }
}
