//! MAE, RMSE and windowed SSIM on completed pixels, plus report rows.

use std::fmt;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BitMask, HeightRaster};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// Recorded in every report.
pub const SSIM_CONVENTION: &str =
    "gaussian window 11 / sigma 1.5, valid windows only; unchanged pred pixels replaced by gt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Completed,
    All,
    Changed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae_m: f64,
    pub rmse_m: f64,
    pub ssim: f64,
    pub n_pixels: usize,
    pub region: Region,
    pub data_range_m: f64,
    pub ssim_convention: String,
}

fn region_errors(pred: &HeightRaster, gt: &HeightRaster, region: &BitMask) -> Result<Vec<f64>> {
    pred.meta.ensure_same(&gt.meta)?;
    gt.meta.ensure_same(&region.meta)?;
    let mut errs = Vec::new();
    for ((r, c), &inside) in region.bits.indexed_iter() {
        if inside && !gt.nodata.bits[[r, c]] {
            if pred.nodata.bits[[r, c]] {
                return Err(Error::InvalidArgument(format!(
                    "prediction has nodata at ({r}, {c}) inside the evaluation region"
                )));
            }
            errs.push(pred.values[[r, c]] - gt.values[[r, c]]);
        }
    }
    if errs.is_empty() {
        return Err(Error::EmptyRegion);
    }
    Ok(errs)
}

/// Mean absolute error over `region` (cells with valid ground truth).
pub fn mae(pred: &HeightRaster, gt: &HeightRaster, region: &BitMask) -> Result<f64> {
    let e = region_errors(pred, gt, region)?;
    Ok(e.iter().map(|v| v.abs()).sum::<f64>() / e.len() as f64)
}

pub fn rmse(pred: &HeightRaster, gt: &HeightRaster, region: &BitMask) -> Result<f64> {
    let e = region_errors(pred, gt, region)?;
    Ok((e.iter().map(|v| v * v).sum::<f64>() / e.len() as f64).sqrt())
}

fn gaussian_kernel() -> Array1<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let k = Array1::from_shape_fn(SSIM_WINDOW, |i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s = k.sum();
    k / s
}

/// Separable filtering keeping only windows fully inside the grid.
fn filter_valid(x: &Array2<f64>, k: &Array1<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let rows = Array2::from_shape_fn((h, ow), |(r, c)| (0..n).map(|i| k[i] * x[[r, c + i]]).sum::<f64>());
    Array2::from_shape_fn((oh, ow), |(r, c)| (0..n).map(|i| k[i] * rows[[r + i, c]]).sum::<f64>())
}

/// Mean SSIM over all 11x11 Gaussian windows that fit inside the grid.
pub fn ssim_arrays(a: &Array2<f64>, b: &Array2<f64>, data_range: f64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    if !(data_range > 0.0 && data_range.is_finite()) {
        return Err(Error::InvalidArgument(format!("data range {data_range} must be positive")));
    }
    let (h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "{w}x{h} raster is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let k = gaussian_kernel();
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let mu_a = filter_valid(a, &k);
    let mu_b = filter_valid(b, &k);
    let aa = filter_valid(&(a * a), &k);
    let bb = filter_valid(&(b * b), &k);
    let ab = filter_valid(&(a * b), &k);
    let mut total = 0.0;
    for ((i, j), &ma) in mu_a.indexed_iter() {
        let mb = mu_b[[i, j]];
        let va = aa[[i, j]] - ma * ma;
        let vb = bb[[i, j]] - mb * mb;
        let cov = ab[[i, j]] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// SSIM of two rasters. Cells where either is nodata are filled with the
/// mean of `gt` in both.
pub fn ssim(pred: &HeightRaster, gt: &HeightRaster, data_range: f64) -> Result<f64> {
    pred.meta.ensure_same(&gt.meta)?;
    let valid: Vec<f64> = gt.valid_cells().into_iter().map(|(_, _, v)| v).collect();
    let fill = if valid.is_empty() { 0.0 } else { valid.iter().sum::<f64>() / valid.len() as f64 };
    let hole = |r: usize, c: usize| pred.nodata.bits[[r, c]] || gt.nodata.bits[[r, c]];
    let a = Array2::from_shape_fn(pred.meta.shape(), |(r, c)| if hole(r, c) { fill } else { pred.values[[r, c]] });
    let b = Array2::from_shape_fn(gt.meta.shape(), |(r, c)| if hole(r, c) { fill } else { gt.values[[r, c]] });
    ssim_arrays(&a, &b, data_range)
}

/// Metrics on the changed (completed) pixels. SSIM runs on the full tile
/// with pred outside `change` replaced by gt; the data range is the gt span
/// (1 m when gt is flat).
pub fn evaluate_completed(pred: &HeightRaster, gt: &HeightRaster, change: &BitMask) -> Result<MetricsReport> {
    if change.count() == 0 {
        return Err(Error::EmptyRegion);
    }
    let errs = region_errors(pred, gt, change)?;
    let n = errs.len() as f64;
    let mae_m = errs.iter().map(|v| v.abs()).sum::<f64>() / n;
    let rmse_m = (errs.iter().map(|v| v * v).sum::<f64>() / n).sqrt();

    let mut merged = gt.clone();
    for ((r, c), &ch) in change.bits.indexed_iter() {
        if ch {
            merged.values[[r, c]] = pred.values[[r, c]];
            merged.nodata.bits[[r, c]] = pred.nodata.bits[[r, c]] || gt.nodata.bits[[r, c]];
        }
    }
    let (lo, hi) = gt
        .valid_cells()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, _, v)| (lo.min(v), hi.max(v)));
    let data_range = if hi > lo { hi - lo } else { 1.0 };
    Ok(MetricsReport {
        mae_m,
        rmse_m,
        ssim: ssim(&merged, gt, data_range)?,
        n_pixels: errs.len(),
        region: Region::Completed,
        data_range_m: data_range,
        ssim_convention: SSIM_CONVENTION.into(),
    })
}

/// Arithmetic mean of per-tile reports; pixel counts are summed.
pub fn mean_report(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let first = reports.first().ok_or(Error::EmptyRegion)?;
    let n = reports.len() as f64;
    let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(MetricsReport {
        mae_m: avg(|r| r.mae_m),
        rmse_m: avg(|r| r.rmse_m),
        ssim: avg(|r| r.ssim),
        n_pixels: reports.iter().map(|r| r.n_pixels).sum(),
        region: first.region,
        data_range_m: avg(|r| r.data_range_m),
        ssim_convention: first.ssim_convention.clone(),
    })
}

/// `"25%"` for 0.25.
pub fn level_label(level: f64) -> String {
    format!("{}%", (level * 100.0).round() as i64)
}

impl MetricsReport {
    /// `"2.71 & 5.31 & 0.92"`.
    pub fn table_cell(&self) -> String {
        format!("{:.2} & {:.2} & {:.2}", self.mae_m, self.rmse_m, self.ssim)
    }

    /// `"Global Rescaling, 25%: 5.08 / 9.01 / 0.82"`.
    pub fn row(&self, method: &str, level: f64) -> String {
        format!("{method}, {}: {self}", level_label(level))
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} / {:.2} / {:.2}", self.mae_m, self.rmse_m, self.ssim)
    }
}

/// One line of the per-tile results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub dataset: String,
    pub level: f64,
    pub mae: f64,
    pub rmse: f64,
    pub ssim: f64,
    pub n: usize,
    pub tile_id: String,
}

impl ReportRow {
    pub fn new(method: &str, dataset: &str, level: f64, tile_id: &str, m: &MetricsReport) -> Self {
        Self {
            method: method.into(),
            dataset: dataset.into(),
            level,
            mae: m.mae_m,
            rmse: m.rmse_m,
            ssim: m.ssim,
            n: m.n_pixels,
            tile_id: tile_id.into(),
        }
    }
}

/// Display names used in tables.
pub fn method_display_name(method: &str) -> &str {
    match method {
        "global" => "Global Rescaling",
        "lwlr" => "LWLR",
        "knn" => "kNN",
        "bilinear" => "Bilinear",
        "prior2dsm" => "Prior2DSM",
        other => other,
    }
}
