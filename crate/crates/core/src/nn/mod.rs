//! Small dense network toolkit with explicit backward passes.
//!
//! Activations are `(tokens, channels)` matrices. Each layer's `forward`
//! returns its output and a cache; `backward` consumes the cache and the
//! output gradient, accumulates parameter gradients and returns the input
//! gradient.

mod adam;
mod attention;
mod block;
mod linear;
mod norm;

pub use adam::{Adam, AdamConfig};
pub use attention::{AttentionCache, MultiHeadAttention};
pub use block::{Block, BlockCache};
pub use linear::{Linear, LinearCache, Lora};
pub use norm::{LayerNorm, LayerNormCache};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// A trainable matrix and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
}

impl Param {
    pub fn new(value: Array2<f64>) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(Array2::zeros((rows, cols)))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

pub(crate) fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub fn gelu_forward(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(gelu)
}

/// `dy * gelu'(x)`.
pub fn gelu_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &x| *d *= gelu_grad(x));
    dx
}


#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &x in &[-4.0, -1.3, -0.2, 0.0, 0.4, 1.7, 5.0] {
            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((num - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(3.0) - 3.0).abs() < 0.01);
    }

    #[test]
    fn gelu_backward_matches_numeric() {
        let x = rand_matrix(1, 3, 5);
        let w = rand_matrix(2, 3, 5);
        let an = gelu_backward(&x, &w);
        let num = numeric_grad(&x, |x| probe(&gelu_forward(x), &w));
        assert_close(&an, &num, 1e-6);
    }
}
