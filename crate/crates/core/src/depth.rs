//! Relative-depth backends: RGB window in, unitless relative depth out.
//!
//! Foundation-model backends run outside this crate; their outputs are read
//! from precomputed rasters. The oracle backend derives depth from ground
//! truth and exists for tests and demos.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{load_relative, HeightRaster, RelativeDepthMap, RgbImage};

pub trait DepthBackend {
    fn name(&self) -> &str;
    fn predict(&self, img: &RgbImage) -> Result<RelativeDepthMap>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Synthetic `a * gt + b + noise`.
    AffineOfGt,
    Dav2,
    DepthPro,
    Moge2,
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "affine_of_gt" | "oracle" => Ok(Self::AffineOfGt),
            "dav2" => Ok(Self::Dav2),
            "depth_pro" => Ok(Self::DepthPro),
            "moge2" => Ok(Self::Moge2),
            other => Err(Error::InvalidArgument(format!(
                "unknown depth backend {other:?} (expected affine_of_gt, dav2, depth_pro or moge2)"
            ))),
        }
    }
}

impl BackendKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::AffineOfGt => "affine_of_gt",
            Self::Dav2 => "dav2",
            Self::DepthPro => "depth_pro",
            Self::Moge2 => "moge2",
        }
    }
}

/// `rel = a * gt + b + N(0, noise_sigma)`, nodata cells of `gt` mapped to `b`.
#[derive(Debug, Clone)]
pub struct AffineOfGt {
    pub gt: HeightRaster,
    pub a: f64,
    pub b: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl AffineOfGt {
    pub fn new(gt: HeightRaster, a: f64, b: f64, noise_sigma: f64, seed: u64) -> Result<Self> {
        if !(a.is_finite() && a != 0.0 && b.is_finite()) {
            return Err(Error::InvalidArgument(format!("oracle needs finite a != 0 and b, got ({a}, {b})")));
        }
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise sigma {noise_sigma}")));
        }
        Ok(Self {
            gt,
            a,
            b,
            noise_sigma,
            seed,
        })
    }
}

impl DepthBackend for AffineOfGt {
    fn name(&self) -> &str {
        "affine_of_gt"
    }

    fn predict(&self, img: &RgbImage) -> Result<RelativeDepthMap> {
        img.meta.ensure_same(&self.gt.meta)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let noise = Normal::new(0.0, self.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
        let mut values = self.gt.values.clone();
        for ((r, c), v) in values.indexed_iter_mut() {
            let base = if self.gt.nodata.bits[[r, c]] { 0.0 } else { *v };
            let n = if self.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            *v = self.a * base + self.b + n;
        }
        RelativeDepthMap::new(self.gt.meta.clone(), values)
    }
}

/// Output of an external model, stored as a single-band raster.
#[derive(Debug, Clone)]
pub struct PrecomputedDepth {
    pub kind: BackendKind,
    pub path: PathBuf,
}

impl PrecomputedDepth {
    pub fn new(kind: BackendKind, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if !path.exists() {
            return Err(Error::Weights(format!(
                "no {} output at {}; run the model externally or use the affine_of_gt oracle",
                kind.as_str(),
                path.display()
            )));
        }
        Ok(Self { kind, path })
    }
}

impl DepthBackend for PrecomputedDepth {
    fn name(&self) -> &str {
        self.kind.as_str()
    }

    fn predict(&self, img: &RgbImage) -> Result<RelativeDepthMap> {
        let rel = load_relative(&self.path)?;
        img.meta.ensure_same(&rel.meta)?;
        Ok(rel)
    }
}
