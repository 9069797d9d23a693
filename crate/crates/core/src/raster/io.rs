//! GeoTIFF reading and writing.
//!
//! Georeferencing uses the ModelPixelScale / ModelTiepoint pair (north-up,
//! square pixels). The CRS tag is carried verbatim in GeoAsciiParams and the
//! nodata sentinel in the GDAL_NODATA tag.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array2, Array3};
use tiff::decoder::{Decoder, DecodingResult, Limits};
use tiff::encoder::{colortype, TiffEncoder};
use tiff::tags::Tag;
use tiff::ColorType;

use super::{AnyRaster, BitMask, GridMeta, HeightRaster, LabelRaster, RelativeDepthMap, RgbImage};
use crate::error::{Error, Result};

pub const DEFAULT_NODATA: f64 = -9999.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RasterKind {
    Height,
    Rgb,
    Mask,
    Relative,
    Labels,
}

impl RasterKind {
    fn bands(self) -> usize {
        match self {
            RasterKind::Rgb => 3,
            _ => 1,
        }
    }
}

fn tiff_err(path: &Path, e: tiff::TiffError) -> Error {
    match e {
        tiff::TiffError::IoError(source) => Error::io(path, source),
        other => Error::Tiff {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

fn band_count(ct: ColorType) -> usize {
    match ct {
        ColorType::Gray(_) | ColorType::Palette(_) => 1,
        ColorType::GrayA(_) => 2,
        ColorType::RGB(_) | ColorType::YCbCr(_) | ColorType::Lab(_) => 3,
        ColorType::RGBA(_) | ColorType::CMYK(_) => 4,
        ColorType::CMYKA(_) => 5,
        ColorType::Multiband { num_samples, .. } => num_samples as usize,
        _ => 0,
    }
}

/// Samples as f64 plus the full-scale value of integer sample types.
fn samples_f64(data: DecodingResult) -> (Vec<f64>, f64) {
    let full_scale = match &data {
        DecodingResult::U8(_) => f64::from(u8::MAX),
        DecodingResult::U16(_) => f64::from(u16::MAX),
        DecodingResult::U32(_) => f64::from(u32::MAX),
        _ => 1.0,
    };
    let v = match data {
        DecodingResult::U8(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::U16(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::U32(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::U64(v) => v.into_iter().map(|x| x as f64).collect(),
        DecodingResult::I8(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::I16(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::I32(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::I64(v) => v.into_iter().map(|x| x as f64).collect(),
        DecodingResult::F16(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::F32(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::F64(v) => v,
    };
    (v, full_scale)
}

struct Decoded {
    meta: GridMeta,
    bands: usize,
    /// Pixel-interleaved samples.
    samples: Vec<f64>,
    full_scale: f64,
    nodata: Option<f64>,
}

fn decode(path: &Path, expected_bands: usize) -> Result<Decoded> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = Decoder::new(BufReader::new(file))
        .map_err(|e| tiff_err(path, e))?
        .with_limits(Limits::unlimited());
    let (w, h) = dec.dimensions().map_err(|e| tiff_err(path, e))?;
    let bands = band_count(dec.colortype().map_err(|e| tiff_err(path, e))?);
    if bands != expected_bands {
        return Err(Error::BandCount {
            expected: expected_bands,
            found: bands,
        });
    }

    let scale = dec
        .find_tag(Tag::ModelPixelScaleTag)
        .map_err(|e| tiff_err(path, e))?
        .map(|v| v.into_f64_vec())
        .transpose()
        .map_err(|e| tiff_err(path, e))?;
    let tie = dec
        .find_tag(Tag::ModelTiepointTag)
        .map_err(|e| tiff_err(path, e))?
        .map(|v| v.into_f64_vec())
        .transpose()
        .map_err(|e| tiff_err(path, e))?;
    let (Some(scale), Some(tie)) = (scale, tie) else {
        return Err(Error::MissingGeotransform(path.to_path_buf()));
    };
    if scale.len() < 2 || tie.len() < 6 {
        return Err(Error::MissingGeotransform(path.to_path_buf()));
    }
    let (sx, sy) = (scale[0], scale[1]);
    if (sx - sy).abs() > 1e-12 * sx.abs().max(1.0) {
        return Err(Error::Anisotropic { x: sx, y: sy });
    }
    // tiepoint maps raster (i, j) to model (x, y)
    let origin = (tie[3] - tie[0] * sx, tie[4] + tie[1] * sy);

    let crs_tag = dec
        .find_tag(Tag::GeoAsciiParamsTag)
        .map_err(|e| tiff_err(path, e))?
        .map(|v| v.into_string())
        .transpose()
        .map_err(|e| tiff_err(path, e))?
        .map(|s| s.trim_end_matches(['|', '\0']).to_string())
        .unwrap_or_default();

    let nodata = dec
        .find_tag(Tag::GdalNodata)
        .map_err(|e| tiff_err(path, e))?
        .and_then(|v| v.into_string().ok())
        .and_then(|s| s.trim_matches(['\0', ' ']).parse::<f64>().ok());

    let meta = GridMeta::with_origin(w as usize, h as usize, sx, origin, crs_tag)?;
    let (samples, full_scale) = samples_f64(dec.read_image().map_err(|e| tiff_err(path, e))?);
    if samples.len() != meta.len() * bands {
        return Err(Error::Tiff {
            path: path.to_path_buf(),
            message: format!(
                "expected {} samples, decoded {}",
                meta.len() * bands,
                samples.len()
            ),
        });
    }
    Ok(Decoded {
        meta,
        bands,
        samples,
        full_scale,
        nodata,
    })
}

/// Reads a raster of the requested kind.
///
/// Height rasters map cells equal to the file's nodata sentinel (or
/// [`DEFAULT_NODATA`] when the file declares none) and non-finite cells to
/// the nodata mask.
pub fn load_raster(path: impl AsRef<Path>, kind: RasterKind) -> Result<AnyRaster> {
    load_raster_with_nodata(path, kind, DEFAULT_NODATA)
}

pub fn load_raster_with_nodata(
    path: impl AsRef<Path>,
    kind: RasterKind,
    fallback_nodata: f64,
) -> Result<AnyRaster> {
    let path = path.as_ref();
    let d = decode(path, kind.bands())?;
    let shape = d.meta.shape();
    Ok(match kind {
        RasterKind::Height => {
            let sentinel = d.nodata.unwrap_or(fallback_nodata);
            let values = Array2::from_shape_vec(shape, d.samples).expect("sample count checked");
            let nodata = values.mapv(|v| !v.is_finite() || v == sentinel);
            let nodata = BitMask::new(d.meta.clone(), nodata)?;
            AnyRaster::Height(HeightRaster::new(d.meta, values, nodata)?)
        }
        RasterKind::Relative => {
            let values = Array2::from_shape_vec(shape, d.samples).expect("sample count checked");
            AnyRaster::Relative(RelativeDepthMap::new(d.meta, values)?)
        }
        RasterKind::Mask => {
            let bits = Array2::from_shape_vec(shape, d.samples)
                .expect("sample count checked")
                .mapv(|v| v != 0.0);
            AnyRaster::Mask(BitMask::new(d.meta, bits)?)
        }
        RasterKind::Labels => {
            let labels = Array2::from_shape_vec(shape, d.samples)
                .expect("sample count checked")
                .mapv(|v| v.max(0.0) as u32);
            AnyRaster::Labels(LabelRaster {
                meta: d.meta,
                labels,
            })
        }
        RasterKind::Rgb => {
            let (h, w) = shape;
            let bands = d.bands;
            let scale = d.full_scale;
            let data = Array3::from_shape_fn((3, h, w), |(b, r, c)| {
                d.samples[(r * w + c) * bands + b] / scale
            });
            AnyRaster::Rgb(RgbImage::new(d.meta, data)?)
        }
    })
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelRaster> {
    match load_raster(path, RasterKind::Labels)? {
        AnyRaster::Labels(l) => Ok(l),
        _ => unreachable!("kind is labels"),
    }
}

pub fn save_labels(labels: &LabelRaster, path: impl AsRef<Path>) -> Result<()> {
    let data: Vec<u32> = labels.labels.iter().copied().collect();
    write_tiff::<colortype::Gray32>(path.as_ref(), &labels.meta, &data, None)
}

fn write_tiff<C>(path: &Path, meta: &GridMeta, data: &[C::Inner], nodata: Option<f64>) -> Result<()>
where
    C: colortype::ColorType,
    [C::Inner]: tiff::encoder::TiffValue,
{
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = TiffEncoder::new(BufWriter::new(file)).map_err(|e| tiff_err(path, e))?;
    let mut image = enc
        .new_image::<C>(meta.width as u32, meta.height as u32)
        .map_err(|e| tiff_err(path, e))?;
    let dir = image.encoder();
    let ps = meta.pixel_size;
    dir.write_tag(Tag::ModelPixelScaleTag, &[ps, ps, 0.0][..])
        .map_err(|e| tiff_err(path, e))?;
    dir.write_tag(
        Tag::ModelTiepointTag,
        &[0.0, 0.0, 0.0, meta.origin.0, meta.origin.1, 0.0][..],
    )
    .map_err(|e| tiff_err(path, e))?;
    // minimal key directory: projected model, pixel-is-area, citation in ascii params
    let citation = format!("{}|", meta.crs_tag);
    let keys: [u16; 16] = [
        1,
        1,
        0,
        3,
        1024,
        0,
        1,
        1,
        1025,
        0,
        1,
        1,
        1026,
        34737,
        citation.len() as u16,
        0,
    ];
    dir.write_tag(Tag::GeoKeyDirectoryTag, &keys[..])
        .map_err(|e| tiff_err(path, e))?;
    dir.write_tag(Tag::GeoAsciiParamsTag, citation.as_str())
        .map_err(|e| tiff_err(path, e))?;
    if let Some(nd) = nodata {
        dir.write_tag(Tag::GdalNodata, format!("{nd}").as_str())
            .map_err(|e| tiff_err(path, e))?;
    }
    image.write_data(data).map_err(|e| tiff_err(path, e))
}

/// Types that [`save_raster`] can encode.
pub trait WritableRaster {
    fn write(&self, path: &Path, nodata: f64) -> Result<()>;
}

impl WritableRaster for HeightRaster {
    fn write(&self, path: &Path, nodata: f64) -> Result<()> {
        let data: Vec<f64> = self
            .values
            .iter()
            .zip(self.nodata.bits.iter())
            .map(|(&v, &nd)| if nd { nodata } else { v })
            .collect();
        write_tiff::<colortype::Gray64Float>(path, &self.meta, &data, Some(nodata))
    }
}

impl WritableRaster for RelativeDepthMap {
    fn write(&self, path: &Path, _nodata: f64) -> Result<()> {
        let data: Vec<f64> = self.values.iter().copied().collect();
        write_tiff::<colortype::Gray64Float>(path, &self.meta, &data, None)
    }
}

impl WritableRaster for BitMask {
    fn write(&self, path: &Path, _nodata: f64) -> Result<()> {
        let data: Vec<u8> = self.bits.iter().map(|&b| u8::from(b)).collect();
        write_tiff::<colortype::Gray8>(path, &self.meta, &data, None)
    }
}

impl WritableRaster for RgbImage {
    fn write(&self, path: &Path, _nodata: f64) -> Result<()> {
        let (h, w) = self.meta.shape();
        let mut data = Vec::with_capacity(h * w * 3);
        for r in 0..h {
            for c in 0..w {
                for b in 0..3 {
                    data.push((self.data[[b, r, c]] * 255.0).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        write_tiff::<colortype::RGB8>(path, &self.meta, &data, None)
    }
}

impl WritableRaster for LabelRaster {
    fn write(&self, path: &Path, _nodata: f64) -> Result<()> {
        save_labels(self, path)
    }
}

impl WritableRaster for AnyRaster {
    fn write(&self, path: &Path, nodata: f64) -> Result<()> {
        match self {
            AnyRaster::Height(r) => r.write(path, nodata),
            AnyRaster::Rgb(r) => r.write(path, nodata),
            AnyRaster::Mask(r) => r.write(path, nodata),
            AnyRaster::Relative(r) => r.write(path, nodata),
            AnyRaster::Labels(r) => r.write(path, nodata),
        }
    }
}

/// Writes a raster as GeoTIFF: 64-bit float for heights and relative depth,
/// 8-bit for masks and RGB.
pub fn save_raster<R: WritableRaster + ?Sized>(obj: &R, path: impl AsRef<Path>) -> Result<()> {
    obj.write(path.as_ref(), DEFAULT_NODATA)
}

pub fn save_raster_with_nodata<R: WritableRaster + ?Sized>(
    obj: &R,
    path: impl AsRef<Path>,
    nodata: f64,
) -> Result<()> {
    obj.write(path.as_ref(), nodata)
}

macro_rules! typed_loader {
    ($name:ident, $kind:ident, $ty:ty) => {
        pub fn $name(path: impl AsRef<Path>) -> Result<$ty> {
            match load_raster(path, RasterKind::$kind)? {
                AnyRaster::$kind(r) => Ok(r),
                _ => unreachable!(),
            }
        }
    };
}

typed_loader!(load_height, Height, HeightRaster);
typed_loader!(load_rgb, Rgb, RgbImage);
typed_loader!(load_mask, Mask, BitMask);
typed_loader!(load_relative, Relative, RelativeDepthMap);

pub fn load_height_with_nodata(path: impl AsRef<Path>, nodata: f64) -> Result<HeightRaster> {
    match load_raster_with_nodata(path, RasterKind::Height, nodata)? {
        AnyRaster::Height(r) => Ok(r),
        _ => unreachable!(),
    }
}
