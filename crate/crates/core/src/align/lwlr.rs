use ndarray::{Array2, Axis};
use rayon::prelude::*;

use super::{fit_line, local_fit, mean, merge_with_prior, variance, NeighborQueryConfig, Samples};
use crate::error::Result;
use crate::raster::{HeightRaster, RelativeDepthMap};

/// Gaussian kernel weight for a distance `d_m` at bandwidth `bandwidth_m`.
#[inline]
pub fn gaussian_weight(d_m: f64, bandwidth_m: f64) -> f64 {
    (-(d_m * d_m) / (2.0 * bandwidth_m * bandwidth_m)).exp()
}

/// 1-D kernel in pixels, truncated at 8 sigma or the grid extent.
fn kernel(sigma_px: f64, extent: usize) -> Vec<f64> {
    let radius = ((8.0 * sigma_px).ceil() as usize).min(extent.saturating_sub(1));
    (0..=radius)
        .map(|d| (-(d as f64).powi(2) / (2.0 * sigma_px * sigma_px)).exp())
        .collect()
}

fn convolve_axis(field: &Array2<f64>, k: &[f64], axis: Axis) -> Array2<f64> {
    let mut out = Array2::zeros(field.raw_dim());
    let radius = k.len() as isize - 1;
    out.axis_iter_mut(axis.other())
        .into_par_iter()
        .zip(field.axis_iter(axis.other()).into_par_iter())
        .for_each(|(mut o, f)| {
            let n = f.len() as isize;
            for i in 0..n {
                let lo = (i - radius).max(0);
                let hi = (i + radius).min(n - 1);
                let mut acc = 0.0;
                for j in lo..=hi {
                    let v = f[j as usize];
                    if v != 0.0 {
                        acc += k[(i - j).unsigned_abs()] * v;
                    }
                }
                o[i as usize] = acc;
            }
        });
    out
}

trait OtherAxis {
    fn other(self) -> Axis;
}

impl OtherAxis for Axis {
    fn other(self) -> Axis {
        if self.0 == 0 {
            Axis(1)
        } else {
            Axis(0)
        }
    }
}

/// 2-D Gaussian blur as two 1-D passes (the kernel is separable).
fn blur(field: &Array2<f64>, sigma_px: f64) -> Array2<f64> {
    let (h, w) = field.dim();
    let rows = convolve_axis(field, &kernel(sigma_px, w), Axis(1));
    convolve_axis(&rows, &kernel(sigma_px, h), Axis(0))
}

/// Locally weighted linear rescaling.
///
/// Every nodata cell gets its own weighted least-squares `(scale, shift)`
/// over all valid cells, with Gaussian weights on the metric distance. The
/// five weighted moments are Gaussian blurs of masked fields, computed with a
/// separable filter. Cells whose weighted relative-depth variance collapses
/// fall back to the global scale with a locally weighted shift.
pub fn lwlr_complete(
    rel: &RelativeDepthMap,
    prior: &HeightRaster,
    cfg: &NeighborQueryConfig,
) -> Result<HeightRaster> {
    cfg.validate()?;
    let samples = Samples::collect(rel, prior)?;
    samples.require(2)?;
    let global = fit_line(&samples.rel, &samples.height);
    let r0 = mean(&samples.rel);
    let h0 = mean(&samples.height);
    let global_var = variance(&samples.rel);

    let shape = prior.meta.shape();
    let mut m0 = Array2::zeros(shape);
    let mut m1 = Array2::zeros(shape);
    let mut m2 = Array2::zeros(shape);
    let mut m3 = Array2::zeros(shape);
    let mut m4 = Array2::zeros(shape);
    for i in 0..samples.len() {
        let idx = [samples.rows[i], samples.cols[i]];
        let r = samples.rel[i] - r0;
        let h = samples.height[i] - h0;
        m0[idx] = 1.0;
        m1[idx] = r;
        m2[idx] = r * r;
        m3[idx] = h;
        m4[idx] = r * h;
    }
    let sigma_px = cfg.bandwidth_m / prior.meta.pixel_size;
    let [s0, s1, s2, s3, s4] = [m0, m1, m2, m3, m4].map(|m| blur(&m, sigma_px));

    let mut filled = Array2::zeros(shape);
    let mut fallbacks = 0usize;
    let mut empty = 0usize;
    for ((r, c), out) in filled.indexed_iter_mut() {
        if !prior.nodata.bits[[r, c]] {
            continue;
        }
        let rq = rel.values[[r, c]] - r0;
        let sw = s0[[r, c]];
        if !(sw > 1e-300) {
            // no valid cell within reach of the kernel
            empty += 1;
            *out = global.pair.apply(rel.values[[r, c]]);
            continue;
        }
        let mr = s1[[r, c]] / sw;
        let mh = s3[[r, c]] / sw;
        let var_r = s2[[r, c]] / sw - mr * mr;
        let cov = s4[[r, c]] / sw - mr * mh;
        let (s, b, fb) = local_fit(mr, mh, var_r, cov, global_var, global.pair.scale);
        fallbacks += usize::from(fb);
        *out = s * rq + b + h0;
    }
    if fallbacks > 0 || empty > 0 {
        log::debug!("lwlr: {fallbacks} shift-only fallbacks, {empty} cells beyond kernel reach");
    }
    Ok(merge_with_prior(prior, filled))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::{apply_affine, global_affine_fit};
    use crate::raster::{BitMask, GridMeta};
    use approx::assert_abs_diff_eq;

    /// Direct per-cell weighted least squares, no blurring.
    fn brute_lwlr(rel: &RelativeDepthMap, prior: &HeightRaster, bw: f64) -> Array2<f64> {
        let valid = prior.valid_cells();
        let rv: Vec<f64> = valid.iter().map(|&(r, c, _)| rel.values[[r, c]]).collect();
        let hv: Vec<f64> = valid.iter().map(|&(_, _, h)| h).collect();
        let global = fit_line(&rv, &hv);
        let gvar = variance(&rv);
        let ps = prior.meta.pixel_size;
        let mut out = prior.values.clone();
        for ((r, c), o) in out.indexed_iter_mut() {
            if prior.is_valid(r, c) {
                continue;
            }
            let (mut sw, mut swr, mut swh) = (0.0, 0.0, 0.0);
            let w: Vec<f64> = valid
                .iter()
                .map(|&(vr, vc, _)| {
                    let d = ps * (((vr as f64 - r as f64).powi(2) + (vc as f64 - c as f64).powi(2)).sqrt());
                    gaussian_weight(d, bw)
                })
                .collect();
            for i in 0..w.len() {
                sw += w[i];
                swr += w[i] * rv[i];
                swh += w[i] * hv[i];
            }
            let (mr, mh) = (swr / sw, swh / sw);
            let mut var = 0.0;
            let mut cov = 0.0;
            for i in 0..w.len() {
                var += w[i] * (rv[i] - mr).powi(2);
                cov += w[i] * (rv[i] - mr) * (hv[i] - mh);
            }
            var /= sw;
            cov /= sw;
            let (s, b, _) = local_fit(mr, mh, var, cov, gvar, global.pair.scale);
            *o = s * rel.values[[r, c]] + b;
        }
        out
    }

    fn scene(n: usize, hole: impl Fn(usize, usize) -> bool) -> (RelativeDepthMap, HeightRaster) {
        let meta = GridMeta::new(n, n, 1.0).unwrap();
        let rel = Array2::from_shape_fn((n, n), |(r, c)| {
            ((r as f64 * 0.7).sin() + (c as f64 * 0.3).cos()) * 2.0 + 0.05 * (r * c) as f64
        });
        let h = Array2::from_shape_fn((n, n), |(r, c)| {
            3.0 * rel[[r, c]] + 1.0 + 0.4 * ((r * 7 + c * 3) % 5) as f64 + 0.1 * r as f64
        });
        let mut nd = BitMask::filled(&meta, false);
        for r in 0..n {
            for c in 0..n {
                nd.bits[[r, c]] = hole(r, c);
            }
        }
        (
            RelativeDepthMap::new(meta.clone(), rel).unwrap(),
            HeightRaster::new(meta, h, nd).unwrap(),
        )
    }

    #[test]
    fn weight_at_one_bandwidth() {
        assert_abs_diff_eq!(gaussian_weight(30.0, 30.0), (-0.5f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(gaussian_weight(30.0, 30.0), 0.6065, epsilon = 1e-4);
    }

    #[test]
    fn matches_direct_weighted_least_squares() {
        let (rel, prior) = scene(12, |r, c| (3..8).contains(&r) && (2..9).contains(&c));
        let cfg = NeighborQueryConfig {
            bandwidth_m: 2.5,
            ..Default::default()
        };
        let fast = lwlr_complete(&rel, &prior, &cfg).unwrap();
        let slow = brute_lwlr(&rel, &prior, 2.5);
        for (a, b) in fast.values.iter().zip(slow.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-8);
        }
    }

    #[test]
    fn huge_bandwidth_converges_to_global_fit() {
        let (rel, prior) = scene(16, |r, c| (r + c) % 3 == 0 || (5..11).contains(&r) && c < 6);
        let extent = 16.0;
        let cfg = NeighborQueryConfig {
            bandwidth_m: 1e4 * extent,
            ..Default::default()
        };
        let out = lwlr_complete(&rel, &prior, &cfg).unwrap();
        let g = apply_affine(&rel, global_affine_fit(&rel, &prior).unwrap().pair);
        for ((r, c), v) in out.values.indexed_iter() {
            if !prior.is_valid(r, c) {
                assert_abs_diff_eq!(*v, g.values[[r, c]], epsilon = 1e-6);
            } else {
                assert_eq!(*v, prior.values[[r, c]]);
            }
        }
    }

    #[test]
    fn isolated_neighbor_gives_shift_only_fallback() {
        // 5x5 grid at 1 m, sigma 0.5 m: the anchor next to the query dominates
        // and the other anchors sit >= 6 sigma away.
        let meta = GridMeta::new(5, 5, 1.0).unwrap();
        let rel = Array2::from_shape_fn((5, 5), |(r, c)| (r * 5 + c) as f64 * 0.37 + ((r * c) % 3) as f64);
        let mut h = rel.mapv(|v| 2.0 * v + 1.0);
        h[[4, 4]] += 3.0;
        h[[0, 4]] -= 2.0;
        let mut nd = BitMask::filled(&meta, true);
        for &(r, c) in &[(0usize, 0usize), (0, 4), (4, 4), (4, 0)] {
            nd.bits[[r, c]] = false;
        }
        let rel = RelativeDepthMap::new(meta.clone(), rel).unwrap();
        let prior = HeightRaster::new(meta, h, nd).unwrap();
        let cfg = NeighborQueryConfig {
            bandwidth_m: 0.5,
            ..Default::default()
        };
        let out = lwlr_complete(&rel, &prior, &cfg).unwrap();
        let slow = brute_lwlr(&rel, &prior, 0.5);
        let g = global_affine_fit(&rel, &prior).unwrap().pair;
        // query (0, 1): anchor (0, 0) at 1 m = 2 sigma, the rest >= 3 m = 6 sigma
        let anchored = prior.values[[0, 0]] + g.scale * (rel.values[[0, 1]] - rel.values[[0, 0]]);
        assert_abs_diff_eq!(out.values[[0, 1]], slow[[0, 1]], epsilon = 1e-9);
        assert_abs_diff_eq!(out.values[[0, 1]], anchored, epsilon = 1e-6);
    }
}
