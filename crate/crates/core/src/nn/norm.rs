use ndarray::{Array1, Array2, Axis};

use super::Param;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    /// `(1, d)`.
    pub gamma: Param,
    /// `(1, d)`.
    pub beta: Param,
    pub eps: f64,
    pub frozen: bool,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: Param::new(Array2::ones((1, d))),
            beta: Param::zeros(1, d),
            eps: 1e-5,
            frozen: false,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mean = x.mean_axis(Axis(1)).expect("non-empty rows");
        let centered = x - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let xhat = centered * inv_std.view().insert_axis(Axis(1));
        let y = &xhat * &self.gamma.value + &self.beta.value;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: &Array2<f64>) -> Array2<f64> {
        if !self.frozen {
            self.gamma.grad += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
            self.beta.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        let dxhat = dy * &self.gamma.value;
        let m1 = dxhat.mean_axis(Axis(1)).unwrap();
        let m2 = (&dxhat * &cache.xhat).mean_axis(Axis(1)).unwrap();
        let mut dx = dxhat - &m1.insert_axis(Axis(1)) - &cache.xhat * &m2.insert_axis(Axis(1));
        dx *= &cache.inv_std.view().insert_axis(Axis(1));
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        if self.frozen {
            Vec::new()
        } else {
            vec![&mut self.gamma, &mut self.beta]
        }
    }
}
