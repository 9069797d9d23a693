use ndarray::Array2;

use super::ScaleShiftHead;
use crate::align::AffinePair;
use crate::error::{Error, Result};
use crate::features::DenseFeatureMap;
use crate::raster::{BitMask, GridMeta, HeightRaster, RelativeDepthMap};

/// Per-cell `(scale, shift)` on the stride-cell grid of a feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineField {
    pub meta: GridMeta,
    pub stride: usize,
    /// `(cell_rows, cell_cols)`.
    pub scale: Array2<f64>,
    pub shift: Array2<f64>,
}

/// Linear interpolation weights from cell centres to pixels along one axis.
/// Cell `i` is centred on pixel coordinate `(i + 0.5) * stride - 0.5`;
/// coordinates outside the first/last centre are clamped.
#[derive(Debug, Clone)]
pub(crate) struct AxisInterp {
    pub i0: Vec<usize>,
    pub i1: Vec<usize>,
    pub w1: Vec<f64>,
}

impl AxisInterp {
    pub fn new(n_px: usize, n_cells: usize, stride: usize) -> Self {
        let mut out = AxisInterp {
            i0: Vec::with_capacity(n_px),
            i1: Vec::with_capacity(n_px),
            w1: Vec::with_capacity(n_px),
        };
        let last = (n_cells - 1) as f64;
        for y in 0..n_px {
            let t = ((y as f64 + 0.5) / stride as f64 - 0.5).clamp(0.0, last);
            let i0 = t.floor() as usize;
            out.i0.push(i0);
            out.i1.push((i0 + 1).min(n_cells - 1));
            out.w1.push(t - i0 as f64);
        }
        out
    }
}

/// The four `(cell_row, cell_col, weight)` contributions to pixel `(r, c)`.
#[inline]
pub(crate) fn corners(rows: &AxisInterp, cols: &AxisInterp, r: usize, c: usize) -> [(usize, usize, f64); 4] {
    let (wr, wc) = (rows.w1[r], cols.w1[c]);
    [
        (rows.i0[r], cols.i0[c], (1.0 - wr) * (1.0 - wc)),
        (rows.i0[r], cols.i1[c], (1.0 - wr) * wc),
        (rows.i1[r], cols.i0[c], wr * (1.0 - wc)),
        (rows.i1[r], cols.i1[c], wr * wc),
    ]
}

impl AffineField {
    pub fn constant(meta: GridMeta, stride: usize, pair: AffinePair) -> Self {
        let cells = (meta.height.div_ceil(stride), meta.width.div_ceil(stride));
        Self {
            meta,
            stride,
            scale: Array2::from_elem(cells, pair.scale),
            shift: Array2::from_elem(cells, pair.shift),
        }
    }

    pub(crate) fn interpolators(&self) -> (AxisInterp, AxisInterp) {
        let (ch, cw) = self.scale.dim();
        (
            AxisInterp::new(self.meta.height, ch, self.stride),
            AxisInterp::new(self.meta.width, cw, self.stride),
        )
    }

    /// Bilinear upsampling to pixel resolution: `(scale, shift)` grids.
    pub fn upsample(&self) -> (Array2<f64>, Array2<f64>) {
        let (rows, cols) = self.interpolators();
        let shape = self.meta.shape();
        let mut s = Array2::zeros(shape);
        let mut b = Array2::zeros(shape);
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let (mut vs, mut vb) = (0.0, 0.0);
                for (i, j, w) in corners(&rows, &cols, r, c) {
                    vs += w * self.scale[[i, j]];
                    vb += w * self.shift[[i, j]];
                }
                s[[r, c]] = vs;
                b[[r, c]] = vb;
            }
        }
        (s, b)
    }
}

/// One `(scale, shift)` per feature cell.
pub fn predict_affine_field(features: &DenseFeatureMap, head: &ScaleShiftHead) -> Result<AffineField> {
    if features.dim() != head.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: head.input_dim(),
            found: features.dim(),
        });
    }
    let (raw, _) = head.forward(&features.token_matrix());
    Ok(field_from_raw(features, &raw, head.init_affine, head.output_scale))
}

pub(crate) fn field_from_raw(features: &DenseFeatureMap, raw: &Array2<f64>, init: AffinePair, k: f64) -> AffineField {
    let (ch, cw) = features.cell_shape();
    AffineField {
        meta: features.meta.clone(),
        stride: features.stride,
        scale: Array2::from_shape_fn((ch, cw), |(i, j)| init.scale + k * raw[[i * cw + j, 0]]),
        shift: Array2::from_shape_fn((ch, cw), |(i, j)| init.shift + k * raw[[i * cw + j, 1]]),
    }
}

/// `s(x, y) * r(x, y) + b(x, y)` at every pixel, no nodata.
pub fn compose_metric(rel: &RelativeDepthMap, field: &AffineField) -> Result<HeightRaster> {
    rel.meta.ensure_same(&field.meta)?;
    let (s, b) = field.upsample();
    let values = s * &rel.values + b;
    Ok(HeightRaster {
        meta: rel.meta.clone(),
        values,
        nodata: BitMask::filled(&rel.meta, false),
    })
}
