use ndarray::{s, Array2, Axis};
use rand::Rng;

use super::{Linear, LinearCache, Param};

/// Multi-head self-attention over all tokens, with a fused `qkv` projection
/// and an output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub qkv: Linear,
    pub out_proj: Linear,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    qkv: LinearCache,
    qkv_out: Array2<f64>,
    probs: Vec<Array2<f64>>,
    out: LinearCache,
}

fn softmax_rows(mut s: Array2<f64>) -> Array2<f64> {
    for mut row in s.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
    s
}

impl MultiHeadAttention {
    pub fn random<R: Rng>(rng: &mut R, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim must split evenly over heads");
        Self {
            heads,
            qkv: Linear::random(rng, dim, 3 * dim),
            out_proj: Linear::random(rng, dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.out_proj.d_out()
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, AttentionCache) {
        let d = self.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qkv_out, qkv_cache) = self.qkv.forward(x);
        let mut ctx = Array2::zeros((x.nrows(), d));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = qkv_out.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv_out.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv_out.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let p = softmax_rows(q.dot(&k.t()) * scale);
            ctx.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&p.dot(&v));
            probs.push(p);
        }
        let (y, out) = self.out_proj.forward(&ctx);
        (
            y,
            AttentionCache {
                qkv: qkv_cache,
                qkv_out,
                probs,
                out,
            },
        )
    }

    pub fn backward(&mut self, cache: &AttentionCache, dy: &Array2<f64>) -> Array2<f64> {
        let d = self.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let dctx = self.out_proj.backward(&cache.out, dy);
        let qkv = &cache.qkv_out;
        let mut dqkv = Array2::zeros(qkv.raw_dim());
        for h in 0..self.heads {
            let (qs, ks, vs) = (h * dh, d + h * dh, 2 * d + h * dh);
            let q = qkv.slice(s![.., qs..qs + dh]);
            let k = qkv.slice(s![.., ks..ks + dh]);
            let v = qkv.slice(s![.., vs..vs + dh]);
            let p = &cache.probs[h];
            let dout = dctx.slice(s![.., h * dh..(h + 1) * dh]);
            let dp = dout.dot(&v.t());
            let dv = p.t().dot(&dout);
            let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let ds = (dp - &row_dot) * p * scale;
            dqkv.slice_mut(s![.., qs..qs + dh]).assign(&ds.dot(&k));
            dqkv.slice_mut(s![.., ks..ks + dh]).assign(&ds.t().dot(&q));
            dqkv.slice_mut(s![.., vs..vs + dh]).assign(&dv);
        }
        self.qkv.backward(&cache.qkv, &dqkv)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.qkv.params_mut();
        v.extend(self.out_proj.params_mut());
        v
    }
}
