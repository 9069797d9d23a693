//! Dispatch from method names to completion routines.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use heightcomp::align::{bilinear_fill, global_complete, knn_affine_complete, lwlr_complete, NeighborMetric};
use heightcomp::depth::{AffineOfGt, BackendKind, DepthBackend, PrecomputedDepth};
use heightcomp::features::{load_backbone, load_backbone_or_toy, make_toy_backbone, strided_dense_extract, VitBackbone};
use heightcomp::raster::{HeightRaster, RelativeDepthMap, RgbImage};
use heightcomp::tta::{prepare_backbone, tta_optimize, StepRecord, TtaConfig, TtaMode};

use crate::config::{BackboneConfig, BackboneKind, ExperimentConfig};
use crate::manifest::SceneManifest;

/// The encoder named by the config, and whether the toy fallback was used.
pub fn build_backbone(cfg: &BackboneConfig) -> Result<(VitBackbone, bool)> {
    let toy = || make_toy_backbone(cfg.toy_seed, cfg.toy_patch, cfg.toy_dim, cfg.toy_layers, true);
    match cfg.kind {
        BackboneKind::Toy => Ok((toy()?, false)),
        BackboneKind::Weights => {
            let Some(path) = &cfg.weights else {
                bail!("backbone.kind = \"weights\" needs backbone.weights; set backbone.kind = \"toy\" to use the toy encoder");
            };
            if cfg.allow_toy_fallback {
                Ok(load_backbone_or_toy(Some(path.as_path()), cfg.toy_seed, cfg.toy_patch, cfg.toy_dim, cfg.toy_layers)?)
            } else if !path.exists() {
                bail!(
                    "backbone weights {} not found; export them first, or set backbone.kind = \"toy\" \
                     (or backbone.allow_toy_fallback = true)",
                    path.display()
                );
            } else {
                Ok((load_backbone(path)?, false))
            }
        }
    }
}

/// Relative depth for a scene from the configured backend.
pub fn relative_depth(manifest: &SceneManifest, rgb: &RgbImage, gt: &HeightRaster, cfg: &ExperimentConfig) -> Result<RelativeDepthMap> {
    let d = &cfg.depth_backend;
    let rel = match d.kind {
        BackendKind::AffineOfGt => AffineOfGt::new(gt.clone(), d.a, d.b, d.noise_sigma, d.seed)?.predict(rgb)?,
        kind => {
            let path = manifest.relative_depth.get(kind.as_str()).with_context(|| {
                format!(
                    "manifest {} has no relative_depth.{} entry; add the precomputed output or set depth_backend.kind = \"affine_of_gt\"",
                    manifest.scene_id,
                    kind.as_str()
                )
            })?;
            PrecomputedDepth::new(kind, manifest.resolve(path))?.predict(rgb)?
        }
    };
    Ok(rel)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MethodExtras {
    pub loss_trace: Option<Vec<StepRecord>>,
    pub backbone_fallback: bool,
    pub n_anchors: Option<usize>,
}

fn tta_mode(method: &str) -> Option<TtaMode> {
    match method {
        "prior2dsm" => Some(TtaMode::Full),
        "prior2dsm_frozen" => Some(TtaMode::FrozenBackbone),
        "prior2dsm_direct" => Some(TtaMode::DirectHeight),
        _ => None,
    }
}

/// The TTA settings a method runs with: its mode overrides `cfg.tta.mode`.
pub fn tta_config_for(method: &str, cfg: &ExperimentConfig) -> TtaConfig {
    let mut t = cfg.tta.clone();
    if let Some(m) = tta_mode(method) {
        t.mode = m;
    }
    t.seed = cfg.seed();
    t
}

pub fn run_method(
    method: &str,
    rgb: &RgbImage,
    rel: &RelativeDepthMap,
    prior: &HeightRaster,
    cfg: &ExperimentConfig,
) -> Result<(HeightRaster, MethodExtras)> {
    let mut extras = MethodExtras::default();
    let out = match method {
        "global" => global_complete(rel, prior)?,
        "lwlr" => lwlr_complete(rel, prior, &cfg.neighbors)?,
        "bilinear" => bilinear_fill(prior)?,
        "knn" => {
            if cfg.neighbors.metric == NeighborMetric::Feature {
                let (bb, fallback) = build_backbone(&cfg.backbone)?;
                extras.backbone_fallback = fallback;
                let features = strided_dense_extract(rgb, &bb, cfg.tta.stride)?;
                knn_affine_complete(rel, prior, &cfg.neighbors, Some(&features))?
            } else {
                knn_affine_complete(rel, prior, &cfg.neighbors, None)?
            }
        }
        m if tta_mode(m).is_some() => {
            let t = tta_config_for(m, cfg);
            let (base, fallback) = build_backbone(&cfg.backbone)?;
            extras.backbone_fallback = fallback;
            let mut bb = prepare_backbone(&base, &t)?;
            let res = tta_optimize(rgb, rel, prior, &t, &mut bb)?;
            extras.loss_trace = Some(res.trace);
            extras.n_anchors = Some(res.n_anchors);
            res.completed
        }
        other => bail!(
            "unknown method {other:?} (expected one of {})",
            crate::config::METHODS.join(", ")
        ),
    };
    Ok((out, extras))
}
