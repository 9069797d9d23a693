use ndarray::Array2;
use rand::Rng;

use super::{gelu_backward, gelu_forward, AttentionCache, LayerNorm, LayerNormCache, Linear, LinearCache};
use super::{MultiHeadAttention, Param};

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    fc1: LinearCache,
    pre_act: Array2<f64>,
    fc2: LinearCache,
}

impl Block {
    pub fn random<R: Rng>(rng: &mut R, dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        Self {
            ln1: LayerNorm::new(dim),
            attn: MultiHeadAttention::random(rng, dim, heads),
            ln2: LayerNorm::new(dim),
            fc1: Linear::random(rng, dim, mlp_ratio * dim),
            fc2: Linear::random(rng, mlp_ratio * dim, dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, BlockCache) {
        let (n1, ln1) = self.ln1.forward(x);
        let (a, attn) = self.attn.forward(&n1);
        let x1 = x + &a;
        let (n2, ln2) = self.ln2.forward(&x1);
        let (pre_act, fc1) = self.fc1.forward(&n2);
        let (m, fc2) = self.fc2.forward(&gelu_forward(&pre_act));
        (
            x1 + &m,
            BlockCache {
                ln1,
                attn,
                ln2,
                fc1,
                pre_act,
                fc2,
            },
        )
    }

    pub fn backward(&mut self, c: &BlockCache, dy: &Array2<f64>) -> Array2<f64> {
        let dh = self.fc2.backward(&c.fc2, dy);
        let dpre = gelu_backward(&c.pre_act, &dh);
        let dn2 = self.fc1.backward(&c.fc1, &dpre);
        let dx1 = dy + &self.ln2.backward(&c.ln2, &dn2);
        let dn1 = self.attn.backward(&c.attn, &dx1);
        &dx1 + &self.ln1.backward(&c.ln1, &dn1)
    }

    pub fn freeze(&mut self) {
        self.ln1.frozen = true;
        self.ln2.frozen = true;
        self.attn.qkv.frozen = true;
        self.attn.out_proj.frozen = true;
        self.fc1.frozen = true;
        self.fc2.frozen = true;
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.ln1.params_mut();
        v.extend(self.attn.params_mut());
        v.extend(self.ln2.params_mut());
        v.extend(self.fc1.params_mut());
        v.extend(self.fc2.params_mut());
        v
    }
}
