use ndarray::Array2;

use super::spatial::SpatialIndex;
use super::merge_with_prior;
use crate::error::{Error, Result};
use crate::raster::HeightRaster;

/// Nearest valid cell before/after each cell along one line.
fn bracket(valid: &[bool]) -> (Vec<Option<usize>>, Vec<Option<usize>>) {
    let n = valid.len();
    let mut before = vec![None; n];
    let mut after = vec![None; n];
    let mut last = None;
    for i in 0..n {
        if valid[i] {
            last = Some(i);
        }
        before[i] = last;
    }
    last = None;
    for i in (0..n).rev() {
        if valid[i] {
            last = Some(i);
        }
        after[i] = last;
    }
    (before, after)
}

/// Fills nodata cells from the valid lattice.
///
/// Each hole cell is linearly interpolated between the nearest valid cells
/// on its row and on its column; when both are available they are blended
/// with weights inversely proportional to the bracket spans. Both passes are
/// exact on any `a + b*x + c*y + d*x*y` surface, so the blend is too. Cells
/// with no two-sided bracket in either direction (holes touching the border)
/// take the value of the nearest valid cell.
pub fn bilinear_fill(prior: &HeightRaster) -> Result<HeightRaster> {
    let (h, w) = prior.meta.shape();
    let valid = prior.nodata.bits.mapv(|b| !b);
    if !valid.iter().any(|&v| v) {
        return Err(Error::InsufficientValid {
            needed: 1,
            found: 0,
        });
    }
    let vals = &prior.values;

    let mut row_est = Array2::<Option<(f64, f64)>>::from_elem((h, w), None);
    for r in 0..h {
        let line: Vec<bool> = (0..w).map(|c| valid[[r, c]]).collect();
        let (before, after) = bracket(&line);
        for c in 0..w {
            if let (Some(a), Some(b)) = (before[c], after[c]) {
                if a != b {
                    let t = (c - a) as f64 / (b - a) as f64;
                    let v = vals[[r, a]] * (1.0 - t) + vals[[r, b]] * t;
                    row_est[[r, c]] = Some((v, (b - a) as f64));
                }
            }
        }
    }
    let mut col_est = Array2::<Option<(f64, f64)>>::from_elem((h, w), None);
    for c in 0..w {
        let line: Vec<bool> = (0..h).map(|r| valid[[r, c]]).collect();
        let (before, after) = bracket(&line);
        for r in 0..h {
            if let (Some(a), Some(b)) = (before[r], after[r]) {
                if a != b {
                    let t = (r - a) as f64 / (b - a) as f64;
                    let v = vals[[a, c]] * (1.0 - t) + vals[[b, c]] * t;
                    col_est[[r, c]] = Some((v, (b - a) as f64));
                }
            }
        }
    }

    let index = SpatialIndex::new(
        w,
        h,
        valid.indexed_iter().filter(|(_, &v)| v).map(|(i, _)| i),
    );
    let mut filled = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            if valid[[r, c]] {
                continue;
            }
            filled[[r, c]] = match (row_est[[r, c]], col_est[[r, c]]) {
                (Some((vr, sr)), Some((vc, sc))) => {
                    let (wr, wc) = (1.0 / sr, 1.0 / sc);
                    (wr * vr + wc * vc) / (wr + wc)
                }
                (Some((v, _)), None) | (None, Some((v, _))) => v,
                (None, None) => {
                    let nn = index.nearest(r, c, 1);
                    vals[[nn[0].1, nn[0].2]]
                }
            };
        }
    }
    Ok(merge_with_prior(prior, filled))
}
