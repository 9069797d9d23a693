use ndarray::{Array2, Axis};
use rand::Rng;

use super::{normal_matrix, Param};

/// Low-rank additive update `(alpha / rank) * B A` on a frozen projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Lora {
    pub rank: usize,
    pub alpha: f64,
    /// `(rank, d_in)`.
    pub a: Param,
    /// `(d_out, rank)`, zero at creation.
    pub b: Param,
}

impl Lora {
    /// `A ~ N(0, 1/sqrt(d_in))`, `B = 0`.
    pub fn new<R: Rng>(rng: &mut R, d_in: usize, d_out: usize, rank: usize, alpha: f64) -> Self {
        Self {
            rank,
            alpha,
            a: Param::new(normal_matrix(rng, rank, d_in, 1.0 / (d_in as f64).sqrt())),
            b: Param::zeros(d_out, rank),
        }
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `Delta W`, shape `(d_out, d_in)`.
    pub fn delta(&self) -> Array2<f64> {
        self.b.value.dot(&self.a.value) * self.scaling()
    }

    pub fn num_params(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// `y = x W^T + b`, optionally plus a LoRA term.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `(d_out, d_in)`.
    pub weight: Param,
    /// `(1, d_out)`.
    pub bias: Param,
    pub lora: Option<Lora>,
    /// Frozen layers skip weight and bias gradients; LoRA factors still get
    /// theirs.
    pub frozen: bool,
}

#[derive(Debug, Clone)]
pub struct LinearCache {
    x: Array2<f64>,
    u: Option<Array2<f64>>,
}

impl Linear {
    pub fn new(weight: Array2<f64>, bias: Array2<f64>) -> Self {
        assert_eq!(bias.dim(), (1, weight.nrows()));
        Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
            lora: None,
            frozen: false,
        }
    }

    /// Weights `N(0, 1/sqrt(d_in))`, zero bias.
    pub fn random<R: Rng>(rng: &mut R, d_in: usize, d_out: usize) -> Self {
        Self::new(
            normal_matrix(rng, d_out, d_in, 1.0 / (d_in as f64).sqrt()),
            Array2::zeros((1, d_out)),
        )
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self::new(Array2::zeros((d_out, d_in)), Array2::zeros((1, d_out)))
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LinearCache) {
        let mut y = x.dot(&self.weight.value.t()) + &self.bias.value;
        let u = self.lora.as_ref().map(|l| {
            let u = x.dot(&l.a.value.t());
            y.scaled_add(l.scaling(), &u.dot(&l.b.value.t()));
            u
        });
        (y, LinearCache { x: x.clone(), u })
    }

    pub fn backward(&mut self, cache: &LinearCache, dy: &Array2<f64>) -> Array2<f64> {
        if !self.frozen {
            self.weight.grad += &dy.t().dot(&cache.x);
            self.bias.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        let mut dx = dy.dot(&self.weight.value);
        if let (Some(l), Some(u)) = (self.lora.as_mut(), cache.u.as_ref()) {
            let s = l.scaling();
            l.b.grad.scaled_add(s, &dy.t().dot(u));
            let du = dy.dot(&l.b.value) * s;
            l.a.grad += &du.t().dot(&cache.x);
            dx += &du.dot(&l.a.value);
        }
        dx
    }

    /// Trainable parameters: weight and bias unless frozen, then LoRA factors.
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        if !self.frozen {
            out.push(&mut self.weight);
            out.push(&mut self.bias);
        }
        if let Some(l) = self.lora.as_mut() {
            out.push(&mut l.a);
            out.push(&mut l.b);
        }
        out
    }
}
