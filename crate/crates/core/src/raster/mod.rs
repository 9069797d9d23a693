//! Raster containers shared by every stage of the pipeline.
//!
//! All grids are stored as `ndarray` arrays of shape `(height, width)` and
//! indexed `[[row, col]]`. Rasters belonging to one scene share a single
//! [`GridMeta`]; mismatches are rejected rather than resampled.

mod io;
mod morph;

pub use io::{
    load_height, load_height_with_nodata, load_labels, load_mask, load_raster, load_raster_with_nodata,
    load_relative, load_rgb, save_labels, save_raster, save_raster_with_nodata, RasterKind,
    WritableRaster, DEFAULT_NODATA,
};
pub use morph::{connected_components, dilate_mask, dilate_seeds, squared_distance_transform, Component};

use ndarray::{s, Array2, Array3};

use crate::error::{Error, Result};

/// Shape and georeferencing of a raster.
///
/// `origin` is the (easting, northing) of the top-left corner of the top-left
/// pixel. Rows advance southwards.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridMeta {
    pub width: usize,
    pub height: usize,
    pub pixel_size: f64,
    pub origin: (f64, f64),
    pub crs_tag: String,
}

impl GridMeta {
    pub fn new(width: usize, height: usize, pixel_size: f64) -> Result<Self> {
        Self::with_origin(width, height, pixel_size, (0.0, 0.0), String::new())
    }

    pub fn with_origin(
        width: usize,
        height: usize,
        pixel_size: f64,
        origin: (f64, f64),
        crs_tag: impl Into<String>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidGrid(format!("empty grid {width}x{height}")));
        }
        if !(pixel_size.is_finite() && pixel_size > 0.0) {
            return Err(Error::InvalidGrid(format!("pixel size {pixel_size}")));
        }
        Ok(Self {
            width,
            height,
            pixel_size,
            origin,
            crs_tag: crs_tag.into(),
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Metadata of a sub-window, with the origin shifted accordingly.
    pub fn window(&self, w: &Window) -> GridMeta {
        GridMeta {
            width: w.width,
            height: w.height,
            pixel_size: self.pixel_size,
            origin: (
                self.origin.0 + w.x0 as f64 * self.pixel_size,
                self.origin.1 - w.y0 as f64 * self.pixel_size,
            ),
            crs_tag: self.crs_tag.clone(),
        }
    }

    pub fn ensure_same(&self, other: &GridMeta) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::MetaMismatch(format!(
                "{}x{} @ {} {:?} vs {}x{} @ {} {:?}",
                self.width,
                self.height,
                self.pixel_size,
                self.origin,
                other.width,
                other.height,
                other.pixel_size,
                other.origin
            )))
        }
    }

    fn check_shape(&self, shape: &[usize]) -> Result<()> {
        let (h, w) = self.shape();
        if shape.len() >= 2 && shape[shape.len() - 2] == h && shape[shape.len() - 1] == w {
            Ok(())
        } else {
            Err(Error::MetaMismatch(format!(
                "array shape {shape:?} does not match grid {w}x{h}"
            )))
        }
    }
}

/// Pixel-aligned rectangular sub-region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Window {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

/// Binary grid. Used both for change masks and validity masks.
#[derive(Debug, Clone, PartialEq)]
pub struct BitMask {
    pub meta: GridMeta,
    pub bits: Array2<bool>,
}

impl BitMask {
    pub fn new(meta: GridMeta, bits: Array2<bool>) -> Result<Self> {
        meta.check_shape(bits.shape())?;
        Ok(Self { meta, bits })
    }

    pub fn filled(meta: &GridMeta, value: bool) -> Self {
        Self {
            meta: meta.clone(),
            bits: Array2::from_elem(meta.shape(), value),
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.meta.len() as f64
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[[row, col]]
    }

    pub fn union(&self, other: &BitMask) -> Result<BitMask> {
        self.meta.ensure_same(&other.meta)?;
        let bits = ndarray::Zip::from(&self.bits)
            .and(&other.bits)
            .map_collect(|&a, &b| a || b);
        Ok(BitMask {
            meta: self.meta.clone(),
            bits,
        })
    }

    pub fn and(&self, other: &BitMask) -> Result<BitMask> {
        self.meta.ensure_same(&other.meta)?;
        let bits = ndarray::Zip::from(&self.bits)
            .and(&other.bits)
            .map_collect(|&a, &b| a && b);
        Ok(BitMask {
            meta: self.meta.clone(),
            bits,
        })
    }

    pub fn not(&self) -> BitMask {
        BitMask {
            meta: self.meta.clone(),
            bits: self.bits.mapv(|b| !b),
        }
    }

    pub fn is_subset_of(&self, other: &BitMask) -> bool {
        self.bits.shape() == other.bits.shape()
            && self.bits.iter().zip(other.bits.iter()).all(|(&a, &b)| !a || b)
    }
}

/// Metric heights with an explicit nodata mask.
///
/// Cells flagged nodata hold `NaN` so that any accidental use in arithmetic
/// poisons the result instead of silently mixing in a sentinel.
#[derive(Debug, Clone)]
pub struct HeightRaster {
    pub meta: GridMeta,
    pub values: Array2<f64>,
    pub nodata: BitMask,
}

impl HeightRaster {
    pub fn new(meta: GridMeta, mut values: Array2<f64>, nodata: BitMask) -> Result<Self> {
        meta.check_shape(values.shape())?;
        meta.ensure_same(&nodata.meta)?;
        ndarray::Zip::from(&mut values)
            .and(&nodata.bits)
            .for_each(|v, &nd| {
                if nd {
                    *v = f64::NAN;
                }
            });
        if values
            .iter()
            .zip(nodata.bits.iter())
            .any(|(v, &nd)| !nd && !v.is_finite())
        {
            return Err(Error::InvalidGrid(
                "non-finite height outside the nodata mask".into(),
            ));
        }
        Ok(Self {
            meta,
            values,
            nodata,
        })
    }

    /// Builds a raster where every non-finite cell becomes nodata.
    pub fn from_values(meta: GridMeta, values: Array2<f64>) -> Result<Self> {
        meta.check_shape(values.shape())?;
        let nodata = BitMask::new(meta.clone(), values.mapv(|v| !v.is_finite()))?;
        Self::new(meta, values, nodata)
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        !self.nodata.bits[[row, col]]
    }

    pub fn valid_mask(&self) -> BitMask {
        self.nodata.not()
    }

    pub fn valid_count(&self) -> usize {
        self.meta.len() - self.nodata.count()
    }

    /// Valid cells as `(row, col, value)` in row-major order.
    pub fn valid_cells(&self) -> Vec<(usize, usize, f64)> {
        self.values
            .indexed_iter()
            .filter(|(idx, _)| !self.nodata.bits[*idx])
            .map(|((r, c), &v)| (r, c, v))
            .collect()
    }

    pub fn has_nodata(&self) -> bool {
        self.nodata.bits.iter().any(|&b| b)
    }
}

/// Three-plane reflectance image with values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct RgbImage {
    pub meta: GridMeta,
    /// Shape `(3, height, width)`.
    pub data: Array3<f64>,
}

impl RgbImage {
    pub fn new(meta: GridMeta, data: Array3<f64>) -> Result<Self> {
        if data.shape()[0] != 3 {
            return Err(Error::BandCount {
                expected: 3,
                found: data.shape()[0],
            });
        }
        meta.check_shape(data.shape())?;
        let data = data.mapv(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 });
        Ok(Self { meta, data })
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        [
            self.data[[0, row, col]],
            self.data[[1, row, col]],
            self.data[[2, row, col]],
        ]
    }
}

/// Unitless relative depth; meaningful only up to scale and shift.
#[derive(Debug, Clone)]
pub struct RelativeDepthMap {
    pub meta: GridMeta,
    pub values: Array2<f64>,
}

impl RelativeDepthMap {
    pub fn new(meta: GridMeta, values: Array2<f64>) -> Result<Self> {
        meta.check_shape(values.shape())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid("non-finite relative depth".into()));
        }
        Ok(Self { meta, values })
    }

    /// Min-max rescaling to `[0, 1]`; a constant map becomes all zeros.
    pub fn min_max_normalized(&self) -> RelativeDepthMap {
        let (lo, hi) = self
            .values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let span = hi - lo;
        let values = if span > 0.0 {
            self.values.mapv(|v| (v - lo) / span)
        } else {
            Array2::zeros(self.values.raw_dim())
        };
        RelativeDepthMap {
            meta: self.meta.clone(),
            values,
        }
    }
}

/// Integer class raster (land use / land cover codes).
#[derive(Debug, Clone)]
pub struct LabelRaster {
    pub meta: GridMeta,
    pub labels: Array2<u32>,
}

/// Something that can be cut into pixel-aligned windows.
pub trait Crop: Sized {
    fn meta(&self) -> &GridMeta;
    fn crop(&self, w: &Window) -> Self;
}

fn crop2<T: Clone>(a: &Array2<T>, w: &Window) -> Array2<T> {
    a.slice(s![w.y0..w.y0 + w.height, w.x0..w.x0 + w.width])
        .to_owned()
}

impl Crop for BitMask {
    fn meta(&self) -> &GridMeta {
        &self.meta
    }
    fn crop(&self, w: &Window) -> Self {
        BitMask {
            meta: self.meta.window(w),
            bits: crop2(&self.bits, w),
        }
    }
}

impl Crop for HeightRaster {
    fn meta(&self) -> &GridMeta {
        &self.meta
    }
    fn crop(&self, w: &Window) -> Self {
        HeightRaster {
            meta: self.meta.window(w),
            values: crop2(&self.values, w),
            nodata: self.nodata.crop(w),
        }
    }
}

impl Crop for RgbImage {
    fn meta(&self) -> &GridMeta {
        &self.meta
    }
    fn crop(&self, w: &Window) -> Self {
        RgbImage {
            meta: self.meta.window(w),
            data: self
                .data
                .slice(s![.., w.y0..w.y0 + w.height, w.x0..w.x0 + w.width])
                .to_owned(),
        }
    }
}

impl Crop for RelativeDepthMap {
    fn meta(&self) -> &GridMeta {
        &self.meta
    }
    fn crop(&self, w: &Window) -> Self {
        RelativeDepthMap {
            meta: self.meta.window(w),
            values: crop2(&self.values, w),
        }
    }
}

impl Crop for LabelRaster {
    fn meta(&self) -> &GridMeta {
        &self.meta
    }
    fn crop(&self, w: &Window) -> Self {
        LabelRaster {
            meta: self.meta.window(w),
            labels: crop2(&self.labels, w),
        }
    }
}

/// Any raster kind the pipeline reads from disk.
#[derive(Debug, Clone)]
pub enum AnyRaster {
    Height(HeightRaster),
    Rgb(RgbImage),
    Mask(BitMask),
    Relative(RelativeDepthMap),
    Labels(LabelRaster),
}

impl Crop for AnyRaster {
    fn meta(&self) -> &GridMeta {
        match self {
            AnyRaster::Height(r) => r.meta(),
            AnyRaster::Rgb(r) => r.meta(),
            AnyRaster::Mask(r) => r.meta(),
            AnyRaster::Relative(r) => r.meta(),
            AnyRaster::Labels(r) => r.meta(),
        }
    }
    fn crop(&self, w: &Window) -> Self {
        match self {
            AnyRaster::Height(r) => AnyRaster::Height(r.crop(w)),
            AnyRaster::Rgb(r) => AnyRaster::Rgb(r.crop(w)),
            AnyRaster::Mask(r) => AnyRaster::Mask(r.crop(w)),
            AnyRaster::Relative(r) => AnyRaster::Relative(r.crop(w)),
            AnyRaster::Labels(r) => AnyRaster::Labels(r.crop(w)),
        }
    }
}

/// Non-overlapping `tile_px` windows in row-major order. Trailing partial
/// tiles are dropped.
pub fn tile_windows(meta: &GridMeta, tile_px: usize) -> Result<Vec<Window>> {
    if tile_px == 0 {
        return Err(Error::InvalidArgument("tile size must be positive".into()));
    }
    if tile_px > meta.width.min(meta.height) {
        return Err(Error::InvalidArgument(format!(
            "tile size {tile_px} exceeds scene {}x{}",
            meta.width, meta.height
        )));
    }
    let nx = meta.width / tile_px;
    let ny = meta.height / tile_px;
    Ok((0..ny)
        .flat_map(|ty| {
            (0..nx).map(move |tx| Window {
                x0: tx * tile_px,
                y0: ty * tile_px,
                width: tile_px,
                height: tile_px,
            })
        })
        .collect())
}

/// One aligned tile cut from every raster of a scene.
#[derive(Debug, Clone)]
pub struct Tile<T> {
    pub index: usize,
    pub window: Window,
    pub rasters: Vec<T>,
}

/// Cuts a scene of rasters sharing one grid into aligned tiles.
pub fn tile<T: Crop>(scene: &[T], tile_px: usize) -> Result<Vec<Tile<T>>> {
    let first = scene
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty scene".into()))?;
    for r in &scene[1..] {
        first.meta().ensure_same(r.meta())?;
    }
    let windows = tile_windows(first.meta(), tile_px)?;
    Ok(windows
        .into_iter()
        .enumerate()
        .map(|(index, window)| Tile {
            index,
            window,
            rasters: scene.iter().map(|r| r.crop(&window)).collect(),
        })
        .collect())
}
