use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::Param;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
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

/// Adaptive-moment optimizer. Parameters must be passed in the same order on
/// every step; moment buffers are matched by position.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    t: i32,
    moments: Vec<(Array2<f64>, Array2<f64>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One update over `(param, learning rate)` pairs.
    pub fn step(&mut self, params: &mut [(&mut Param, f64)]) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (i, (p, lr)) in params.iter_mut().enumerate() {
            if self.moments.len() <= i {
                self.moments
                    .push((Array2::zeros(p.value.raw_dim()), Array2::zeros(p.value.raw_dim())));
            }
            let (m, v) = &mut self.moments[i];
            assert_eq!(m.dim(), p.value.dim(), "parameter order changed between steps");
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *w -= *lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}
