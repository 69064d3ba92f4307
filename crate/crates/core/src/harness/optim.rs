use serde::{Deserialize, Serialize};

use super::OptimizerConfig;

/// Bias-corrected Adam, used for ascent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(cfg: &OptimizerConfig, n: usize) -> Self {
        Adam {
            learning_rate: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// One step uphill along `grad`.
    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] += self.learning_rate * mh / (vh.sqrt() + self.epsilon);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut a = Adam::new(&OptimizerConfig::default(), 2);
        let mut p = [1.0, -1.0];
        a.ascend(&mut p, &[3.0, -0.5]);
        assert!((p[0] - 1.001).abs() < 1e-9);
        assert!((p[1] + 1.001).abs() < 1e-9);
    }

    #[test]
    fn zero_rate_leaves_parameters() {
        let cfg = OptimizerConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        let mut a = Adam::new(&cfg, 1);
        let mut p = [0.25];
        for _ in 0..10 {
            a.ascend(&mut p, &[1.0]);
        }
        assert_eq!(p, [0.25]);
    }

    #[test]
    fn maximizes_concave_quadratic() {
        let cfg = OptimizerConfig {
            learning_rate: 0.05,
            ..Default::default()
        };
        let mut a = Adam::new(&cfg, 2);
        let mut p = [3.0, -2.0];
        for _ in 0..2000 {
            let g = [-(p[0] - 1.0), -2.0 * (p[1] + 0.5)];
            a.ascend(&mut p, &g);
        }
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3, "{p:?}");
    }
}
