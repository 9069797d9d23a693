//! Non-learned completion baselines: global affine rescaling, bilinear
//! filling, locally weighted rescaling and k-nearest-neighbour rescaling.
//!
//! Every completion copies valid prior cells through unchanged.

mod bilinear;
mod knn;
mod lwlr;
mod spatial;

pub use bilinear::bilinear_fill;
pub use knn::knn_affine_complete;
pub use lwlr::{gaussian_weight, lwlr_complete};
pub use spatial::SpatialIndex;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BitMask, HeightRaster, RelativeDepthMap};

/// Relative weighted variance below which a local fit is treated as having
/// fewer than two distinct relative values.
pub(crate) const DEGENERATE_VARIANCE_RATIO: f64 = 1e-6;

/// Scale (meters per relative unit) and shift (meters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffinePair {
    pub scale: f64,
    pub shift: f64,
}

impl AffinePair {
    pub const IDENTITY: AffinePair = AffinePair {
        scale: 1.0,
        shift: 0.0,
    };

    pub fn new(scale: f64, shift: f64) -> Self {
        Self { scale, shift }
    }

    #[inline]
    pub fn apply(&self, r: f64) -> f64 {
        self.scale * r + self.shift
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalFit {
    pub pair: AffinePair,
    /// Relative values were constant over the valid cells; `pair` is then
    /// `(0, mean height)`.
    pub degenerate: bool,
    pub n_valid: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborMetric {
    Spatial,
    Feature,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeighborQueryConfig {
    pub k: usize,
    pub bandwidth_m: f64,
    pub metric: NeighborMetric,
}

impl Default for NeighborQueryConfig {
    fn default() -> Self {
        Self {
            k: 16,
            bandwidth_m: 30.0,
            metric: NeighborMetric::Spatial,
        }
    }
}

impl NeighborQueryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if !(self.bandwidth_m > 0.0 && self.bandwidth_m.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "bandwidth {} m must be positive",
                self.bandwidth_m
            )));
        }
        Ok(())
    }
}

/// Valid `(rel, height)` samples of a scene, row-major.
pub(crate) struct Samples {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub rel: Vec<f64>,
    pub height: Vec<f64>,
}

impl Samples {
    pub fn collect(rel: &RelativeDepthMap, prior: &HeightRaster) -> Result<Self> {
        rel.meta.ensure_same(&prior.meta)?;
        let mut s = Samples {
            rows: Vec::new(),
            cols: Vec::new(),
            rel: Vec::new(),
            height: Vec::new(),
        };
        for ((r, c), &h) in prior.values.indexed_iter() {
            if !prior.nodata.bits[[r, c]] {
                s.rows.push(r);
                s.cols.push(c);
                s.rel.push(rel.values[[r, c]]);
                s.height.push(h);
            }
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.rel.len()
    }

    pub fn require(&self, needed: usize) -> Result<()> {
        if self.len() < needed {
            Err(Error::InsufficientValid {
                needed,
                found: self.len(),
            })
        } else {
            Ok(())
        }
    }
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub(crate) fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

/// Least-squares line through `(r, h)` pairs. Falls back to `(0, mean h)`
/// when `r` has no spread.
pub(crate) fn fit_line(rel: &[f64], height: &[f64]) -> GlobalFit {
    let n = rel.len();
    let mr = mean(rel);
    let mh = mean(height);
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (&r, &h) in rel.iter().zip(height) {
        sxx += (r - mr) * (r - mr);
        sxy += (r - mr) * (h - mh);
    }
    let scale_ref = rel.iter().fold(0.0f64, |a, r| a.max(r.abs())).max(1e-300);
    if sxx / n as f64 <= 1e-24 * scale_ref * scale_ref {
        return GlobalFit {
            pair: AffinePair::new(0.0, mh),
            degenerate: true,
            n_valid: n,
        };
    }
    let s = sxy / sxx;
    GlobalFit {
        pair: AffinePair::new(s, mh - s * mr),
        degenerate: false,
        n_valid: n,
    }
}

/// One scale/shift pair over all valid prior cells, closed-form least
/// squares.
pub fn global_affine_fit(rel: &RelativeDepthMap, prior: &HeightRaster) -> Result<GlobalFit> {
    let samples = Samples::collect(rel, prior)?;
    samples.require(2)?;
    let fit = fit_line(&samples.rel, &samples.height);
    if fit.degenerate {
        log::warn!("global affine fit is degenerate: relative depth is constant over anchors");
    }
    Ok(fit)
}

/// `scale * rel + shift` everywhere, no nodata.
pub fn apply_affine(rel: &RelativeDepthMap, p: AffinePair) -> HeightRaster {
    let values = rel.values.mapv(|r| p.apply(r));
    HeightRaster {
        meta: rel.meta.clone(),
        values,
        nodata: BitMask::filled(&rel.meta, false),
    }
}

/// Keeps valid prior cells and takes `filled` everywhere else.
pub(crate) fn merge_with_prior(prior: &HeightRaster, filled: Array2<f64>) -> HeightRaster {
    let mut values = filled;
    ndarray::Zip::from(&mut values)
        .and(&prior.values)
        .and(&prior.nodata.bits)
        .for_each(|out, &p, &nd| {
            if !nd {
                *out = p;
            }
        });
    HeightRaster {
        meta: prior.meta.clone(),
        values,
        nodata: BitMask::filled(&prior.meta, false),
    }
}

/// Global-rescaling baseline: global fit composed on nodata cells, prior kept
/// elsewhere.
pub fn global_complete(rel: &RelativeDepthMap, prior: &HeightRaster) -> Result<HeightRaster> {
    let fit = global_affine_fit(rel, prior)?;
    Ok(merge_with_prior(prior, apply_affine(rel, fit.pair).values))
}

/// Solves a local fit from centered moments. Returns `(scale, shift)` in the
/// centered frame, and whether the shift-only fallback was used.
pub(crate) fn local_fit(
    mean_r: f64,
    mean_h: f64,
    var_r: f64,
    cov_rh: f64,
    global_var_r: f64,
    global_scale: f64,
) -> (f64, f64, bool) {
    if !(var_r > DEGENERATE_VARIANCE_RATIO * global_var_r) || global_var_r <= 0.0 {
        (global_scale, mean_h - global_scale * mean_r, true)
    } else {
        let s = cov_rh / var_r;
        (s, mean_h - s * mean_r, false)
    }
}
