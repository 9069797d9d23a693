//! Backbone weights in the `.safetensors` layout.
//!
//! Expected tensor names (timm-style ViT):
//!
//! | name | shape |
//! |---|---|
//! | `patch_embed.proj.weight` | `(D, 3, P, P)` |
//! | `patch_embed.proj.bias` | `(D)` |
//! | `blocks.{i}.norm1.{weight,bias}` | `(D)` |
//! | `blocks.{i}.attn.qkv.{weight,bias}` | `(3D, D)`, `(3D)` |
//! | `blocks.{i}.attn.proj.{weight,bias}` | `(D, D)`, `(D)` |
//! | `blocks.{i}.norm2.{weight,bias}` | `(D)` |
//! | `blocks.{i}.mlp.fc1.{weight,bias}` | `(mD, D)`, `(mD)` |
//! | `blocks.{i}.mlp.fc2.{weight,bias}` | `(D, mD)`, `(D)` |
//! | `norm.{weight,bias}` | `(D)` |
//!
//! `__metadata__` may carry `num_heads` (default `D / 64`, at least 1) and
//! `positional = "sincos"`. Supported dtypes are F32 and F64.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::Deserialize;

use super::vit::{make_toy_backbone, VitBackbone, VitConfig};
use crate::error::{Error, Result};
use crate::nn::{Block, LayerNorm, Linear, MultiHeadAttention};

#[derive(Debug, Deserialize)]
struct TensorInfo {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// Named tensors flattened to `f64`, with their shapes.
#[derive(Debug, Clone, Default)]
pub struct TensorFile {
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    pub metadata: HashMap<String, String>,
}

impl TensorFile {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Weights(m.to_string());
        if bytes.len() < 8 {
            return Err(bad("file shorter than its header length"));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header = bytes.get(8..8 + n).ok_or_else(|| bad("truncated header"))?;
        let data = &bytes[8 + n..];
        let raw: HashMap<String, serde_json::Value> =
            serde_json::from_slice(header).map_err(|e| Error::Weights(format!("header: {e}")))?;
        let mut out = TensorFile::default();
        for (name, v) in raw {
            if name == "__metadata__" {
                out.metadata = serde_json::from_value(v)
                    .map_err(|e| Error::Weights(format!("metadata: {e}")))?;
                continue;
            }
            let info: TensorInfo =
                serde_json::from_value(v).map_err(|e| Error::Weights(format!("{name}: {e}")))?;
            let [b, e] = info.data_offsets;
            let buf = data
                .get(b..e)
                .ok_or_else(|| Error::Weights(format!("{name}: offsets out of range")))?;
            let count: usize = info.shape.iter().product();
            let values: Vec<f64> = match info.dtype.as_str() {
                "F64" => buf
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                "F32" => buf
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                other => return Err(Error::Weights(format!("{name}: unsupported dtype {other}"))),
            };
            if values.len() != count {
                return Err(Error::Weights(format!(
                    "{name}: {} values for shape {:?}",
                    values.len(),
                    info.shape
                )));
            }
            out.tensors.insert(name, (info.shape, values));
        }
        Ok(out)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Serializes as F64 tensors.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = serde_json::Map::new();
        if !self.metadata.is_empty() {
            header.insert("__metadata__".into(), serde_json::to_value(&self.metadata).unwrap());
        }
        let mut data = Vec::new();
        for (name, (shape, values)) in &self.tensors {
            let b = data.len();
            for v in values {
                data.extend_from_slice(&v.to_le_bytes());
            }
            header.insert(
                name.clone(),
                serde_json::json!({"dtype": "F64", "shape": shape, "data_offsets": [b, data.len()]}),
            );
        }
        let mut h = serde_json::to_vec(&header).unwrap();
        while !h.len().is_multiple_of(8) {
            h.push(b' ');
        }
        let mut out = (h.len() as u64).to_le_bytes().to_vec();
        out.extend(h);
        out.extend(data);
        out
    }

    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let (s, v) = self
            .tensors
            .remove(name)
            .ok_or_else(|| Error::Weights(format!("missing tensor {name}")))?;
        if s != shape {
            return Err(Error::Weights(format!("{name}: shape {s:?}, expected {shape:?}")));
        }
        Ok(v)
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let v = self.take(name, &[rows, cols])?;
        Ok(Array2::from_shape_vec((rows, cols), v).unwrap())
    }

    fn row(&mut self, name: &str, d: usize) -> Result<Array2<f64>> {
        let v = self.take(name, &[d])?;
        Ok(Array2::from_shape_vec((1, d), v).unwrap())
    }

    fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) -> Result<Linear> {
        Ok(Linear::new(
            self.matrix(&format!("{prefix}.weight"), d_out, d_in)?,
            self.row(&format!("{prefix}.bias"), d_out)?,
        ))
    }

    fn layer_norm(&mut self, prefix: &str, d: usize) -> Result<LayerNorm> {
        let mut ln = LayerNorm::new(d);
        ln.gamma.value = self.row(&format!("{prefix}.weight"), d)?;
        ln.beta.value = self.row(&format!("{prefix}.bias"), d)?;
        Ok(ln)
    }
}

/// Builds a backbone from a tensor file.
pub fn backbone_from_tensors(name: &str, mut tf: TensorFile) -> Result<VitBackbone> {
    let (shape, _) = tf
        .tensors
        .get("patch_embed.proj.weight")
        .ok_or_else(|| Error::Weights("missing tensor patch_embed.proj.weight".into()))?;
    let [d, c, p, p2] = shape[..] else {
        return Err(Error::Weights(format!("patch_embed.proj.weight has shape {shape:?}")));
    };
    if c != 3 || p != p2 {
        return Err(Error::Weights(format!("patch_embed.proj.weight has shape {shape:?}")));
    }
    let layers = (0..)
        .take_while(|i| tf.tensors.contains_key(&format!("blocks.{i}.attn.qkv.weight")))
        .count();
    if layers == 0 {
        return Err(Error::Weights("no transformer blocks found".into()));
    }
    let hidden = tf
        .tensors
        .get("blocks.0.mlp.fc1.weight")
        .map(|(s, _)| s[0])
        .ok_or_else(|| Error::Weights("missing tensor blocks.0.mlp.fc1.weight".into()))?;
    let heads = match tf.metadata.get("num_heads") {
        Some(h) => h
            .parse()
            .map_err(|_| Error::Weights(format!("num_heads = {h:?}")))?,
        None => (d / 64).max(1),
    };
    if heads == 0 || d % heads != 0 || hidden % d != 0 {
        return Err(Error::Weights(format!("inconsistent dims: D={d}, heads={heads}, mlp={hidden}")));
    }
    let positional = tf.metadata.get("positional").map(String::as_str) == Some("sincos");

    let embed_w = tf.take("patch_embed.proj.weight", &[d, 3, p, p])?;
    let patch_embed = Linear::new(
        Array2::from_shape_vec((d, 3 * p * p), embed_w).unwrap(),
        tf.row("patch_embed.proj.bias", d)?,
    );
    let mut blocks = Vec::with_capacity(layers);
    for i in 0..layers {
        let pre = format!("blocks.{i}");
        blocks.push(Block {
            ln1: tf.layer_norm(&format!("{pre}.norm1"), d)?,
            attn: MultiHeadAttention {
                heads,
                qkv: tf.linear(&format!("{pre}.attn.qkv"), d, 3 * d)?,
                out_proj: tf.linear(&format!("{pre}.attn.proj"), d, d)?,
            },
            ln2: tf.layer_norm(&format!("{pre}.norm2"), d)?,
            fc1: tf.linear(&format!("{pre}.mlp.fc1"), d, hidden)?,
            fc2: tf.linear(&format!("{pre}.mlp.fc2"), hidden, d)?,
        });
    }
    let norm = tf.layer_norm("norm", d)?;
    if !tf.tensors.is_empty() {
        log::debug!(
            "ignored {} unused tensors (first: {})",
            tf.tensors.len(),
            tf.tensors.keys().next().unwrap()
        );
    }
    let config = VitConfig {
        patch_size: p,
        embed_dim: d,
        layers,
        heads,
        mlp_ratio: hidden / d,
        positional,
    };
    Ok(VitBackbone::from_parts(name, config, patch_embed, blocks, norm))
}

/// Exports a backbone (without adapters) in the layout read by
/// [`backbone_from_tensors`].
pub fn backbone_to_tensors(bb: &VitBackbone) -> TensorFile {
    let mut tf = TensorFile::default();
    let d = bb.embed_dim();
    let p = bb.patch_size();
    let mut put = |name: String, shape: Vec<usize>, a: &Array2<f64>| {
        tf.tensors.insert(name, (shape, a.iter().copied().collect()));
    };
    put("patch_embed.proj.weight".into(), vec![d, 3, p, p], &bb.patch_embed.weight.value);
    put("patch_embed.proj.bias".into(), vec![d], &bb.patch_embed.bias.value);
    let lin = |put: &mut dyn FnMut(String, Vec<usize>, &Array2<f64>), pre: String, l: &Linear| {
        put(format!("{pre}.weight"), vec![l.d_out(), l.d_in()], &l.weight.value);
        put(format!("{pre}.bias"), vec![l.d_out()], &l.bias.value);
    };
    let ln = |put: &mut dyn FnMut(String, Vec<usize>, &Array2<f64>), pre: String, l: &LayerNorm| {
        put(format!("{pre}.weight"), vec![l.gamma.value.len()], &l.gamma.value);
        put(format!("{pre}.bias"), vec![l.beta.value.len()], &l.beta.value);
    };
    for (i, b) in bb.blocks.iter().enumerate() {
        ln(&mut put, format!("blocks.{i}.norm1"), &b.ln1);
        lin(&mut put, format!("blocks.{i}.attn.qkv"), &b.attn.qkv);
        lin(&mut put, format!("blocks.{i}.attn.proj"), &b.attn.out_proj);
        ln(&mut put, format!("blocks.{i}.norm2"), &b.ln2);
        lin(&mut put, format!("blocks.{i}.mlp.fc1"), &b.fc1);
        lin(&mut put, format!("blocks.{i}.mlp.fc2"), &b.fc2);
    }
    ln(&mut put, "norm".into(), &bb.norm);
    tf.metadata
        .insert("num_heads".into(), bb.config.heads.to_string());
    if bb.config.positional {
        tf.metadata.insert("positional".into(), "sincos".into());
    }
    tf
}

pub fn load_backbone(path: &Path) -> Result<VitBackbone> {
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "vit".into());
    backbone_from_tensors(&name, TensorFile::read(path)?)
}

/// Loads production weights, or falls back to a toy backbone when the file
/// is absent. Returns the backbone and whether the fallback was taken.
pub fn load_backbone_or_toy(
    path: Option<&Path>,
    toy_seed: u64,
    toy_patch: usize,
    toy_dim: usize,
    toy_layers: usize,
) -> Result<(VitBackbone, bool)> {
    match path {
        Some(p) if p.exists() => Ok((load_backbone(p)?, false)),
        _ => {
            log::warn!(
                "!!! backbone weights {} not found; using the TOY backbone (seed {toy_seed}). \
                 Features will not be semantically meaningful. !!!",
                path.map_or("<none>".into(), |p| p.display().to_string())
            );
            Ok((make_toy_backbone(toy_seed, toy_patch, toy_dim, toy_layers, true)?, true))
        }
    }
}
