use ndarray::{Array2, Array3, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::GridMeta;

/// Dense features at stride-cell resolution.
///
/// Cell `(i, j)` covers pixels `[i*stride, (i+1)*stride) x [j*stride, (j+1)*stride)`
/// clipped to the grid; pixel features replicate their cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseFeatureMap {
    pub meta: GridMeta,
    pub stride: usize,
    /// `(cell_rows, cell_cols, dim)`.
    pub cells: Array3<f64>,
}

impl DenseFeatureMap {
    pub fn new(meta: GridMeta, stride: usize, cells: Array3<f64>) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        let (h, w) = meta.shape();
        let (ch, cw, _) = cells.dim();
        if (ch, cw) != (h.div_ceil(stride), w.div_ceil(stride)) {
            return Err(Error::DimensionMismatch {
                expected: h.div_ceil(stride) * w.div_ceil(stride),
                found: ch * cw,
            });
        }
        if cells.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite feature value".into()));
        }
        Ok(Self { meta, stride, cells })
    }

    pub fn dim(&self) -> usize {
        self.cells.dim().2
    }

    /// `(cell_rows, cell_cols)`.
    pub fn cell_shape(&self) -> (usize, usize) {
        let (ch, cw, _) = self.cells.dim();
        (ch, cw)
    }

    #[inline]
    pub fn cell_of(&self, row: usize, col: usize) -> (usize, usize) {
        (row / self.stride, col / self.stride)
    }

    pub fn cell(&self, i: usize, j: usize) -> ArrayView1<'_, f64> {
        self.cells.slice(ndarray::s![i, j, ..])
    }

    pub fn pixel(&self, row: usize, col: usize) -> ArrayView1<'_, f64> {
        let (i, j) = self.cell_of(row, col);
        self.cell(i, j)
    }

    /// Nearest-cell upsampling to `(height, width, dim)`.
    pub fn to_pixels(&self) -> Array3<f64> {
        let (h, w) = self.meta.shape();
        Array3::from_shape_fn((h, w, self.dim()), |(r, c, d)| {
            self.cells[[r / self.stride, c / self.stride, d]]
        })
    }

    /// Cells as rows of a `(cell_rows * cell_cols, dim)` matrix, row-major.
    pub fn token_matrix(&self) -> Array2<f64> {
        let (ch, cw, d) = self.cells.dim();
        self.cells
            .to_owned()
            .into_shape_with_order((ch * cw, d))
            .expect("contiguous")
    }
}
