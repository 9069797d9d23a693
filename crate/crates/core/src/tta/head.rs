use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::AffinePair;
use crate::nn::{gelu_backward, gelu_forward, LayerNorm, LayerNormCache, Linear, LinearCache, Param};

/// Three-layer perceptron mapping a token feature to a `(scale, shift)`
/// correction around an initial affine pair.
///
/// `Linear -> LN -> GELU -> Linear -> LN -> GELU -> Linear(2)`, last layer
/// zero-initialized. Per token:
/// `(s, b) = (init.scale + k * raw_s, init.shift + k * raw_b)` with
/// `k = output_scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleShiftHead {
    pub fc1: Linear,
    pub ln1: LayerNorm,
    pub fc2: Linear,
    pub ln2: LayerNorm,
    pub fc3: Linear,
    pub init_affine: AffinePair,
    pub output_scale: f64,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    fc1: LinearCache,
    ln1: LayerNormCache,
    a1: Array2<f64>,
    fc2: LinearCache,
    ln2: LayerNormCache,
    a2: Array2<f64>,
    fc3: LinearCache,
}

impl ScaleShiftHead {
    pub fn new(seed: u64, input_dim: usize, hidden: usize, init_affine: AffinePair, output_scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            fc1: Linear::random(&mut rng, input_dim, hidden),
            ln1: LayerNorm::new(hidden),
            fc2: Linear::random(&mut rng, hidden, hidden),
            ln2: LayerNorm::new(hidden),
            fc3: Linear::zeros(hidden, 2),
            init_affine,
            output_scale,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.fc1.d_in()
    }

    /// Raw `(n, 2)` outputs for `(n, input_dim)` tokens.
    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, HeadCache) {
        let (h1, fc1) = self.fc1.forward(x);
        let (n1, ln1) = self.ln1.forward(&h1);
        let g1 = gelu_forward(&n1);
        let (h2, fc2) = self.fc2.forward(&g1);
        let (n2, ln2) = self.ln2.forward(&h2);
        let g2 = gelu_forward(&n2);
        let (raw, fc3) = self.fc3.forward(&g2);
        (
            raw,
            HeadCache {
                fc1,
                ln1,
                a1: n1,
                fc2,
                ln2,
                a2: n2,
                fc3,
            },
        )
    }

    /// Accumulates gradients for `d_raw` and returns the token gradient.
    pub fn backward(&mut self, c: &HeadCache, d_raw: &Array2<f64>) -> Array2<f64> {
        let dg2 = self.fc3.backward(&c.fc3, d_raw);
        let dh2 = self.ln2.backward(&c.ln2, &gelu_backward(&c.a2, &dg2));
        let dg1 = self.fc2.backward(&c.fc2, &dh2);
        let dh1 = self.ln1.backward(&c.ln1, &gelu_backward(&c.a1, &dg1));
        self.fc1.backward(&c.fc1, &dh1)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.fc1.params_mut();
        v.extend(self.ln1.params_mut());
        v.extend(self.fc2.params_mut());
        v.extend(self.ln2.params_mut());
        v.extend(self.fc3.params_mut());
        v
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::*;

    #[test]
    fn zero_initialized_output() {
        let head = ScaleShiftHead::new(0, 8, 16, AffinePair::new(2.0, 1.0), 1.0);
        let (raw, _) = head.forward(&rand_matrix(1, 5, 8));
        assert!(raw.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut head = ScaleShiftHead::new(3, 6, 10, AffinePair::IDENTITY, 1.0);
        head.fc3.weight.value = rand_matrix(4, 2, 10);
        let x = rand_matrix(5, 4, 6);
        let w = rand_matrix(6, 4, 2);
        let (_, c) = head.forward(&x);
        let dx = head.backward(&c, &w);
        assert_close(&dx, &numeric_grad(&x, |x| probe(&head.forward(x).0, &w)), 1e-6);
        let base = head.clone();
        let num = numeric_grad(&base.fc1.weight.value, |v| {
            let mut m = base.clone();
            m.fc1.weight.value = v.clone();
            probe(&m.forward(&x).0, &w)
        });
        assert_close(&head.fc1.weight.grad, &num, 1e-6);
    }
}
