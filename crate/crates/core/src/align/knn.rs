use std::collections::BTreeMap;

use ndarray::Array2;
use rayon::prelude::*;

use super::spatial::SpatialIndex;
use super::{fit_line, local_fit, merge_with_prior, variance, NeighborMetric, NeighborQueryConfig, Samples};
use crate::error::{Error, Result};
use crate::features::DenseFeatureMap;
use crate::raster::{HeightRaster, RelativeDepthMap};

/// Unweighted local fit over the neighbor sample indices.
fn fit_neighbors(idx: &[usize], samples: &Samples, global_var: f64, global_scale: f64) -> (f64, f64) {
    let n = idx.len() as f64;
    let mr = idx.iter().map(|&i| samples.rel[i]).sum::<f64>() / n;
    let mh = idx.iter().map(|&i| samples.height[i]).sum::<f64>() / n;
    let (mut var, mut cov) = (0.0, 0.0);
    for &i in idx {
        let dr = samples.rel[i] - mr;
        var += dr * dr;
        cov += dr * (samples.height[i] - mh);
    }
    let (s, b, _) = local_fit(mr, mh, var / n, cov / n, global_var, global_scale);
    (s, b)
}

/// Local k-nearest-neighbour rescaling.
///
/// For each nodata cell the `k` nearest valid cells are found, either by
/// metric distance or by cosine distance between dense features, and an
/// unweighted least-squares `(scale, shift)` is fitted on them. Ties go to
/// the lower row-major index. Degenerate neighbourhoods use the global scale
/// with a local shift.
pub fn knn_affine_complete(
    rel: &RelativeDepthMap,
    prior: &HeightRaster,
    cfg: &NeighborQueryConfig,
    features: Option<&DenseFeatureMap>,
) -> Result<HeightRaster> {
    cfg.validate()?;
    let samples = Samples::collect(rel, prior)?;
    samples.require(2)?;
    let k = if cfg.k > samples.len() {
        log::warn!(
            "k = {} exceeds the {} valid cells; clamping",
            cfg.k,
            samples.len()
        );
        samples.len()
    } else {
        cfg.k
    };
    let global = fit_line(&samples.rel, &samples.height);
    let global_var = variance(&samples.rel);
    let (h, w) = prior.meta.shape();
    let holes: Vec<(usize, usize)> = prior
        .nodata
        .bits
        .indexed_iter()
        .filter(|(_, &b)| b)
        .map(|(i, _)| i)
        .collect();

    let values: Vec<f64> = match cfg.metric {
        NeighborMetric::Spatial => {
            if features.is_some() {
                log::debug!("knn: features ignored for the spatial metric");
            }
            let index = SpatialIndex::new(w, h, samples.rows.iter().copied().zip(samples.cols.iter().copied()));
            let pos: BTreeMap<(usize, usize), usize> = (0..samples.len())
                .map(|i| ((samples.rows[i], samples.cols[i]), i))
                .collect();
            holes
                .par_iter()
                .map(|&(r, c)| {
                    let idx: Vec<usize> = index
                        .nearest(r, c, k)
                        .into_iter()
                        .map(|(_, vr, vc)| pos[&(vr, vc)])
                        .collect();
                    let (s, b) = fit_neighbors(&idx, &samples, global_var, global.pair.scale);
                    s * rel.values[[r, c]] + b
                })
                .collect()
        }
        NeighborMetric::Feature => {
            let f = features.ok_or_else(|| {
                Error::InvalidArgument("feature-space kNN requires a dense feature map".into())
            })?;
            prior.meta.ensure_same(&f.meta)?;
            feature_knn(rel, &samples, &holes, f, k, global_var, global.pair.scale)
        }
    };
    let mut filled = Array2::zeros((h, w));
    for (&(r, c), v) in holes.iter().zip(values) {
        filled[[r, c]] = v;
    }
    Ok(merge_with_prior(prior, filled))
}

/// Feature-space search. Pixels of one stride cell share a feature, so
/// distances are computed once per (query cell, anchor cell) pair; anchors
/// within a cell stay in row-major order and equal distances across cells are
/// merged by row-major index.
fn feature_knn(
    rel: &RelativeDepthMap,
    samples: &Samples,
    holes: &[(usize, usize)],
    f: &DenseFeatureMap,
    k: usize,
    global_var: f64,
    global_scale: f64,
) -> Vec<f64> {
    let (ch, cw) = f.cell_shape();
    let w = f.meta.width;
    let unit: Vec<Vec<f64>> = (0..ch * cw)
        .map(|t| {
            let v = f.cell(t / cw, t % cw);
            let n = v.dot(&v).sqrt();
            if n > 0.0 {
                v.iter().map(|x| x / n).collect()
            } else {
                vec![0.0; v.len()]
            }
        })
        .collect();
    // anchor cells -> sample indices, already row-major
    let mut by_cell: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..samples.len() {
        let (ci, cj) = f.cell_of(samples.rows[i], samples.cols[i]);
        by_cell.entry(ci * cw + cj).or_default().push(i);
    }
    let anchor_cells: Vec<(usize, &Vec<usize>)> = by_cell.iter().map(|(&c, v)| (c, v)).collect();
    let pixel_index = |i: usize| samples.rows[i] * w + samples.cols[i];

    let mut query_cells: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (n, &(r, c)) in holes.iter().enumerate() {
        let (ci, cj) = f.cell_of(r, c);
        query_cells.entry(ci * cw + cj).or_default().push(n);
    }
    let fits: Vec<(Vec<usize>, (f64, f64))> = query_cells
        .into_par_iter()
        .map(|(qc, members)| {
            let q = &unit[qc];
            let mut ranked: Vec<(f64, usize)> = anchor_cells
                .iter()
                .enumerate()
                .map(|(a, &(ac, _))| {
                    let dot: f64 = q.iter().zip(&unit[ac]).map(|(x, y)| x * y).sum();
                    (1.0 - dot, a)
                })
                .collect();
            ranked.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            let mut chosen: Vec<usize> = Vec::with_capacity(k);
            let mut g = 0;
            while chosen.len() < k && g < ranked.len() {
                let d = ranked[g].0;
                let mut tied: Vec<usize> = Vec::new();
                while g < ranked.len() && ranked[g].0 == d {
                    tied.extend(anchor_cells[ranked[g].1].1.iter().copied());
                    g += 1;
                }
                tied.sort_unstable_by_key(|&i| pixel_index(i));
                let take = (k - chosen.len()).min(tied.len());
                chosen.extend_from_slice(&tied[..take]);
            }
            (members, fit_neighbors(&chosen, samples, global_var, global_scale))
        })
        .collect();
    let mut out = vec![0.0; holes.len()];
    for (members, (s, b)) in fits {
        for n in members {
            let (r, c) = holes[n];
            out[n] = s * rel.values[[r, c]] + b;
        }
    }
    out
}
