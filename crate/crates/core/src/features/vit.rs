use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Block, BlockCache, LayerNorm, LayerNormCache, Linear, Lora, Param};

/// Attention projections that accept low-rank adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionTarget {
    Qkv,
    OutProj,
}

impl FromStr for ProjectionTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qkv" => Ok(Self::Qkv),
            "out_proj" => Ok(Self::OutProj),
            other => Err(Error::UnknownTarget(other.to_string())),
        }
    }
}

impl fmt::Display for ProjectionTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Qkv => "qkv",
            Self::OutProj => "out_proj",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Fixed 2-D sinusoidal position code added after patch embedding.
    pub positional: bool,
}

/// A plain ViT encoder: patch embedding, pre-norm blocks, final norm.
///
/// Weights are frozen; only adapters injected into the attention
/// projections are trainable. Any window whose sides are multiples of the
/// patch size is accepted.
#[derive(Debug, Clone, PartialEq)]
pub struct VitBackbone {
    pub name: String,
    pub config: VitConfig,
    pub patch_embed: Linear,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

/// Forward record of one window, enough to backpropagate into adapters.
#[derive(Debug, Clone)]
pub struct VitCache {
    blocks: Vec<BlockCache>,
    norm: LayerNormCache,
}

/// Token grid of one window: `tokens` is `(rows * cols, dim)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
    pub tokens: Array2<f64>,
}

/// Snapshot of one adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub target: ProjectionTarget,
    pub block_index: usize,
    pub rank: usize,
    pub alpha: f64,
    /// `(rank, d_in)`.
    pub a: Array2<f64>,
    /// `(d_out, rank)`.
    pub b: Array2<f64>,
}

impl LoraAdapter {
    pub fn delta(&self) -> Array2<f64> {
        self.b.dot(&self.a) * (self.alpha / self.rank as f64)
    }

    pub fn num_params(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// 2-D sinusoidal position code: the first half of the channels encodes the
/// row, the second half the column.
pub fn sincos_position(rows: usize, cols: usize, dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let mut pe = Array2::zeros((rows * cols, dim));
    for i in 0..rows {
        for j in 0..cols {
            let t = i * cols + j;
            for (offset, pos) in [(0usize, i as f64), (half, j as f64)] {
                for k in 0..half / 2 {
                    let freq = 1.0 / 10000f64.powf(2.0 * k as f64 / half as f64);
                    pe[[t, offset + 2 * k]] = (pos * freq).sin();
                    pe[[t, offset + 2 * k + 1]] = (pos * freq).cos();
                }
            }
        }
    }
    pe
}

/// Flattens `P x P` patches in `(channel, row, col)` order, row-major over
/// the patch grid.
pub fn patchify(window: ArrayView3<'_, f64>, p: usize) -> Array2<f64> {
    let (ch, h, w) = window.dim();
    let (rows, cols) = (h / p, w / p);
    let mut out = Array2::zeros((rows * cols, ch * p * p));
    for ti in 0..rows {
        for tj in 0..cols {
            let patch = window.slice(s![.., ti * p..(ti + 1) * p, tj * p..(tj + 1) * p]);
            for (k, v) in patch.iter().enumerate() {
                out[[ti * cols + tj, k]] = *v;
            }
        }
    }
    out
}

impl VitBackbone {
    pub fn patch_size(&self) -> usize {
        self.config.patch_size
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn layer_count(&self) -> usize {
        self.blocks.len()
    }

    /// The named attention projection of block `block`.
    pub fn projection(&self, block: usize, target: ProjectionTarget) -> &Linear {
        let attn = &self.blocks[block].attn;
        match target {
            ProjectionTarget::Qkv => &attn.qkv,
            ProjectionTarget::OutProj => &attn.out_proj,
        }
    }

    pub fn projection_mut(&mut self, block: usize, target: ProjectionTarget) -> &mut Linear {
        let attn = &mut self.blocks[block].attn;
        match target {
            ProjectionTarget::Qkv => &mut attn.qkv,
            ProjectionTarget::OutProj => &mut attn.out_proj,
        }
    }

    pub fn has_adapters(&self) -> bool {
        self.blocks
            .iter()
            .any(|b| b.attn.qkv.lora.is_some() || b.attn.out_proj.lora.is_some())
    }

    pub fn adapters(&self) -> Vec<LoraAdapter> {
        let mut out = Vec::new();
        for (i, _) in self.blocks.iter().enumerate() {
            for target in [ProjectionTarget::Qkv, ProjectionTarget::OutProj] {
                if let Some(l) = &self.projection(i, target).lora {
                    out.push(LoraAdapter {
                        target,
                        block_index: i,
                        rank: l.rank,
                        alpha: l.alpha,
                        a: l.a.value.clone(),
                        b: l.b.value.clone(),
                    });
                }
            }
        }
        out
    }

    /// Adapter factors in a fixed order (block, qkv before out_proj, A before B).
    pub fn adapter_params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            for lin in [&mut b.attn.qkv, &mut b.attn.out_proj] {
                if let Some(l) = lin.lora.as_mut() {
                    out.push(&mut l.a);
                    out.push(&mut l.b);
                }
            }
        }
        out
    }

    pub fn zero_adapter_grads(&mut self) {
        for p in self.adapter_params_mut() {
            p.zero_grad();
        }
    }

    fn check_window(&self, window: &ArrayView3<'_, f64>) -> Result<(usize, usize)> {
        let p = self.patch_size();
        let (c, h, w) = window.dim();
        if c != 3 {
            return Err(Error::BandCount { expected: 3, found: c });
        }
        if h < p || w < p || h % p != 0 || w % p != 0 {
            return Err(Error::InvalidArgument(format!(
                "window {w}x{h} is not a positive multiple of the {p} px patch"
            )));
        }
        Ok((h / p, w / p))
    }

    /// Tokens of an RGB window `(3, h, w)` with values in `[0, 1]`.
    pub fn forward(&self, window: ArrayView3<'_, f64>) -> Result<TokenGrid> {
        Ok(self.forward_cached(window)?.0)
    }

    pub fn forward_cached(&self, window: ArrayView3<'_, f64>) -> Result<(TokenGrid, VitCache)> {
        let (rows, cols) = self.check_window(&window)?;
        let patches = patchify(window, self.patch_size());
        let (mut x, _) = self.patch_embed.forward(&patches);
        if self.config.positional {
            x += &sincos_position(rows, cols, self.embed_dim());
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&x);
            caches.push(c);
            x = y;
        }
        let (tokens, norm) = self.norm.forward(&x);
        Ok((
            TokenGrid { rows, cols, tokens },
            VitCache {
                blocks: caches,
                norm,
            },
        ))
    }

    /// Accumulates adapter gradients for `d_tokens`. Frozen weights receive
    /// nothing; the image gradient is discarded.
    pub fn backward(&mut self, cache: &VitCache, d_tokens: &Array2<f64>) {
        let mut dx = self.norm.backward(&cache.norm, d_tokens);
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            dx = b.backward(c, &dx);
        }
    }

    fn freeze(&mut self) {
        self.patch_embed.frozen = true;
        self.norm.frozen = true;
        for b in &mut self.blocks {
            b.freeze();
        }
    }

    pub(crate) fn from_parts(
        name: &str,
        config: VitConfig,
        patch_embed: Linear,
        blocks: Vec<Block>,
        norm: LayerNorm,
    ) -> Self {
        let mut v = Self {
            name: name.to_string(),
            config,
            patch_embed,
            blocks,
            norm,
        };
        v.freeze();
        v
    }
}

/// Small seeded ViT with the same access points as a production encoder.
/// Heads are `dim / 8`, the MLP ratio is 2.
pub fn make_toy_backbone(
    seed: u64,
    patch_size: usize,
    dim: usize,
    layers: usize,
    positional: bool,
) -> Result<VitBackbone> {
    if patch_size != 8 && patch_size != 16 {
        return Err(Error::InvalidArgument(format!(
            "toy backbone patch size must be 8 or 16, got {patch_size}"
        )));
    }
    if dim < 8 || !dim.is_multiple_of(8) || layers == 0 {
        return Err(Error::InvalidArgument(format!(
            "toy backbone needs dim >= 8 (multiple of 8) and >= 1 layer, got dim {dim}, layers {layers}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = VitConfig {
        patch_size,
        embed_dim: dim,
        layers,
        heads: dim / 8,
        mlp_ratio: 2,
        positional,
    };
    let patch_embed = Linear::random(&mut rng, 3 * patch_size * patch_size, dim);
    let blocks = (0..layers)
        .map(|_| Block::random(&mut rng, dim, dim / 8, 2))
        .collect();
    Ok(VitBackbone::from_parts(
        "toy",
        config,
        patch_embed,
        blocks,
        LayerNorm::new(dim),
    ))
}

/// Adds zero-initialized adapters to every targeted projection of every
/// block. The input backbone is left as is.
pub fn inject_lora(
    backbone: &VitBackbone,
    rank: usize,
    alpha: f64,
    targets: &[&str],
    seed: u64,
) -> Result<VitBackbone> {
    if rank == 0 {
        return Err(Error::InvalidArgument("LoRA rank must be at least 1".into()));
    }
    let mut parsed: Vec<ProjectionTarget> = targets
        .iter()
        .map(|t| t.parse())
        .collect::<Result<_>>()?;
    parsed.sort();
    parsed.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = backbone.clone();
    for i in 0..out.blocks.len() {
        for &t in &parsed {
            let lin = out.projection_mut(i, t);
            lin.lora = Some(Lora::new(&mut rng, lin.d_in(), lin.d_out(), rank, alpha));
        }
    }
    Ok(out)
}
