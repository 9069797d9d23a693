use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::field::{corners, field_from_raw, AxisInterp};
use super::{compose_metric, AffineField, ScaleShiftHead};
use crate::align::{fit_line, merge_with_prior, AffinePair, GlobalFit};
use crate::error::{Error, Result};
use crate::features::{dense_backward, strided_dense_extract_full, DenseFeatureMap, VitBackbone};
use crate::nn::{Adam, AdamConfig, Param};
use crate::raster::{HeightRaster, RelativeDepthMap, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TtaMode {
    /// Adapters and head optimized jointly.
    Full,
    /// Features computed once; only the head is optimized.
    FrozenBackbone,
    /// The head predicts heights directly; relative depth is ignored.
    DirectHeight,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AnchorPolicy {
    AllValid,
    /// A seeded fraction of the valid cells is kept out of the loss and
    /// reported separately.
    Holdout { fraction: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TtaConfig {
    pub steps: usize,
    pub lr_head: f64,
    pub lr_lora: f64,
    pub loss: LossKind,
    pub mode: TtaMode,
    pub anchor_policy: AnchorPolicy,
    /// Feature stride in pixels.
    pub stride: usize,
    pub hidden: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_targets: Vec<String>,
    /// Seeds the head initialization and the adapters.
    pub seed: u64,
    /// Min-max normalize relative depth per tile before fitting.
    pub normalize_rel: bool,
    pub adam: AdamConfig,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            lr_head: 1e-3,
            lr_lora: 1e-4,
            loss: LossKind::L1,
            mode: TtaMode::Full,
            anchor_policy: AnchorPolicy::AllValid,
            stride: 4,
            hidden: 256,
            lora_rank: 8,
            lora_alpha: 16.0,
            lora_targets: vec!["qkv".into(), "out_proj".into()],
            seed: 0,
            normalize_rel: true,
            adam: AdamConfig::default(),
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr_head > 0.0 && self.lr_lora > 0.0) {
            return bad(format!("learning rates must be positive ({}, {})", self.lr_head, self.lr_lora));
        }
        if self.hidden == 0 || self.stride == 0 {
            return bad("hidden width and stride must be positive".into());
        }
        if let AnchorPolicy::Holdout { fraction, .. } = self.anchor_policy {
            if !(fraction > 0.0 && fraction < 1.0) {
                return bad(format!("holdout fraction {fraction} outside (0, 1)"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Anchor loss before the update of this step.
    pub loss: f64,
    pub holdout_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TtaOutcome {
    /// Valid prior cells copied, the rest from the composed field.
    pub completed: HeightRaster,
    /// Composition over every pixel, before merging with the prior.
    pub composed: HeightRaster,
    pub field: AffineField,
    /// One record per step plus the final state.
    pub trace: Vec<StepRecord>,
    pub head: ScaleShiftHead,
    /// Global fit against the (normalized) relative depth on training anchors.
    pub global: GlobalFit,
    pub n_anchors: usize,
    pub n_holdout: usize,
}

impl TtaOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.trace.first().map_or(f64::NAN, |r| r.loss)
    }

    pub fn final_loss(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |r| r.loss)
    }
}

const RESIDUAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy)]
struct Anchor {
    r: usize,
    c: usize,
    rel: f64,
    h: f64,
}

/// Anchor loss of a head output over a stride-cell grid, with its gradient
/// with respect to the raw head outputs.
#[derive(Debug, Clone)]
pub struct AnchorObjective {
    rows: AxisInterp,
    cols: AxisInterp,
    cw: usize,
    anchors: Vec<Anchor>,
    holdout: Vec<Anchor>,
    pub loss: LossKind,
    pub direct: bool,
    pub init: AffinePair,
    pub output_scale: f64,
}

impl AnchorObjective {
    /// Anchors are the valid prior cells not flagged in `holdout`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        features: &DenseFeatureMap,
        rel: &RelativeDepthMap,
        prior: &HeightRaster,
        holdout: &Array2<bool>,
        loss: LossKind,
        direct: bool,
        init: AffinePair,
        output_scale: f64,
    ) -> Self {
        let (ch, cw) = features.cell_shape();
        let mut anchors = Vec::new();
        let mut held = Vec::new();
        for ((r, c), &h) in prior.values.indexed_iter() {
            if prior.nodata.bits[[r, c]] {
                continue;
            }
            let a = Anchor {
                r,
                c,
                rel: rel.values[[r, c]],
                h,
            };
            if holdout[[r, c]] {
                held.push(a);
            } else {
                anchors.push(a);
            }
        }
        Self {
            rows: AxisInterp::new(prior.meta.height, ch, features.stride),
            cols: AxisInterp::new(prior.meta.width, cw, features.stride),
            cw,
            anchors,
            holdout: held,
            loss,
            direct,
            init,
            output_scale,
        }
    }

    pub fn n_anchors(&self) -> usize {
        self.anchors.len()
    }

    fn cell_pair(&self, raw: &Array2<f64>, t: usize) -> (f64, f64) {
        let k = self.output_scale;
        let s = if self.direct { 0.0 } else { self.init.scale + k * raw[[t, 0]] };
        (s, self.init.shift + k * raw[[t, 1]])
    }

    fn eval(&self, set: &[Anchor], raw: &Array2<f64>, mut grad: Option<&mut Array2<f64>>) -> f64 {
        let n = set.len() as f64;
        let mut total = 0.0;
        for a in set {
            let (mut s, mut b) = (0.0, 0.0);
            let cs = corners(&self.rows, &self.cols, a.r, a.c);
            for &(i, j, w) in &cs {
                let (cs_, cb) = self.cell_pair(raw, i * self.cw + j);
                s += w * cs_;
                b += w * cb;
            }
            let res = s * a.rel + b - a.h;
            let (l, g) = match self.loss {
                LossKind::L1 => {
                    // residuals at rounding level count as zero
                    let g = if res.abs() <= RESIDUAL_TOL * (1.0 + a.h.abs()) { 0.0 } else { res.signum() };
                    (res.abs(), g)
                }
                LossKind::L2 => (res * res, 2.0 * res),
            };
            total += l;
            if let Some(d) = grad.as_deref_mut() {
                let g = g / n * self.output_scale;
                for &(i, j, w) in &cs {
                    let t = i * self.cw + j;
                    if !self.direct {
                        d[[t, 0]] += w * g * a.rel;
                    }
                    d[[t, 1]] += w * g;
                }
            }
        }
        total / n
    }

    /// Mean anchor loss and its gradient with respect to `raw`.
    pub fn loss_and_grad(&self, raw: &Array2<f64>) -> (f64, Array2<f64>) {
        let mut d = Array2::zeros(raw.raw_dim());
        let l = self.eval(&self.anchors, raw, Some(&mut d));
        (l, d)
    }

    pub fn anchor_loss(&self, raw: &Array2<f64>) -> f64 {
        self.eval(&self.anchors, raw, None)
    }

    pub fn holdout_loss(&self, raw: &Array2<f64>) -> Option<f64> {
        (!self.holdout.is_empty()).then(|| self.eval(&self.holdout, raw, None))
    }
}

fn holdout_mask(prior: &HeightRaster, policy: AnchorPolicy) -> Array2<bool> {
    let mut mask = Array2::from_elem(prior.meta.shape(), false);
    if let AnchorPolicy::Holdout { fraction, seed } = policy {
        let mut cells: Vec<(usize, usize)> = prior.valid_cells().into_iter().map(|(r, c, _)| (r, c)).collect();
        cells.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n = (fraction * cells.len() as f64).round() as usize;
        for &(r, c) in &cells[..n] {
            mask[[r, c]] = true;
        }
    }
    mask
}

fn cells_gradient(d_tokens: &Array2<f64>, map: &DenseFeatureMap) -> Array3<f64> {
    let (ch, cw) = map.cell_shape();
    d_tokens
        .to_owned()
        .into_shape_with_order((ch, cw, map.dim()))
        .expect("token matrix matches the cell grid")
}

/// Test-time optimization of the affine-field head (and adapters in `full`
/// mode) against the valid prior cells.
///
/// The head starts at the global fit, so with `steps = 0` the output equals
/// global rescaling on nodata cells. In `full` mode the backbone must carry
/// adapters (see [`crate::features::inject_lora`]); only adapter factors are
/// updated, frozen weights never change.
pub fn tta_optimize(
    img: &RgbImage,
    rel: &RelativeDepthMap,
    prior: &HeightRaster,
    cfg: &TtaConfig,
    backbone: &mut VitBackbone,
) -> Result<TtaOutcome> {
    cfg.validate()?;
    img.meta.ensure_same(&prior.meta)?;
    rel.meta.ensure_same(&prior.meta)?;
    if cfg.mode == TtaMode::Full && !backbone.has_adapters() {
        return Err(Error::InvalidArgument(
            "mode full needs a backbone with injected adapters".into(),
        ));
    }
    let rel_n = if cfg.normalize_rel { rel.min_max_normalized() } else { rel.clone() };
    let holdout = holdout_mask(prior, cfg.anchor_policy);

    let (mut xs, mut hs) = (Vec::new(), Vec::new());
    for (r, c, h) in prior.valid_cells() {
        if !holdout[[r, c]] {
            xs.push(rel_n.values[[r, c]]);
            hs.push(h);
        }
    }
    if xs.len() < 2 {
        return Err(Error::InsufficientValid {
            needed: 2,
            found: xs.len(),
        });
    }
    let global = fit_line(&xs, &hs);
    let mean_h = hs.iter().sum::<f64>() / hs.len() as f64;
    let sigma_h = {
        let v = hs.iter().map(|h| (h - mean_h).powi(2)).sum::<f64>() / hs.len() as f64;
        if v > 0.0 { v.sqrt() } else { 1.0 }
    };
    let init = match cfg.mode {
        TtaMode::DirectHeight => AffinePair::new(0.0, mean_h),
        _ => global.pair,
    };

    let mut extraction = strided_dense_extract_full(img, backbone, cfg.stride)?;
    let mut head = ScaleShiftHead::new(cfg.seed, backbone.embed_dim(), cfg.hidden, init, sigma_h);
    let objective = AnchorObjective::new(
        &extraction.map,
        &rel_n,
        prior,
        &holdout,
        cfg.loss,
        cfg.mode == TtaMode::DirectHeight,
        init,
        sigma_h,
    );
    log::info!(
        "tta: mode {:?}, {} anchors ({} held out), {} cells, {} steps",
        cfg.mode,
        objective.n_anchors(),
        objective.holdout.len(),
        extraction.map.cell_shape().0 * extraction.map.cell_shape().1,
        cfg.steps
    );

    let mut adam = Adam::new(cfg.adam);
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let mut raw;
    let mut step = 0;
    loop {
        let tokens = extraction.map.token_matrix();
        let (r, cache) = head.forward(&tokens);
        raw = r;
        let (loss, d_raw) = objective.loss_and_grad(&raw);
        trace.push(StepRecord {
            step,
            loss,
            holdout_loss: objective.holdout_loss(&raw),
        });
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        if step == cfg.steps {
            break;
        }
        head.zero_grad();
        let d_tokens = head.backward(&cache, &d_raw);
        let full = cfg.mode == TtaMode::Full;
        if full {
            backbone.zero_adapter_grads();
            dense_backward(img, backbone, &extraction, &cells_gradient(&d_tokens, &extraction.map))?;
        }
        {
            let mut params: Vec<(&mut Param, f64)> =
                head.params_mut().into_iter().map(|p| (p, cfg.lr_head)).collect();
            if full {
                params.extend(backbone.adapter_params_mut().into_iter().map(|p| (p, cfg.lr_lora)));
            }
            adam.step(&mut params);
        }
        if full {
            extraction = strided_dense_extract_full(img, backbone, cfg.stride)?;
        }
        step += 1;
    }

    let field = field_from_raw(&extraction.map, &raw, init, sigma_h);
    let field = if cfg.mode == TtaMode::DirectHeight {
        AffineField {
            scale: Array2::zeros(field.scale.raw_dim()),
            ..field
        }
    } else {
        field
    };
    let composed = compose_metric(&rel_n, &field)?;
    let completed = merge_with_prior(prior, composed.values.clone());
    log::info!(
        "tta: anchor loss {:.4} -> {:.4}",
        trace[0].loss,
        trace.last().unwrap().loss
    );
    Ok(TtaOutcome {
        completed,
        composed,
        field,
        trace,
        head,
        global,
        n_anchors: objective.n_anchors(),
        n_holdout: objective.holdout.len(),
    })
}

/// The backbone `tta_optimize` expects for `cfg.mode`: adapters injected
/// for `full`, the frozen backbone otherwise.
pub fn prepare_backbone(base: &VitBackbone, cfg: &TtaConfig) -> Result<VitBackbone> {
    if cfg.mode != TtaMode::Full {
        return Ok(base.clone());
    }
    let targets: Vec<&str> = cfg.lora_targets.iter().map(String::as_str).collect();
    crate::features::inject_lora(base, cfg.lora_rank, cfg.lora_alpha, &targets, cfg.seed)
}
