//! Seeded synthetic scenes: terrain, buildings and trees with matching RGB
//! and land-cover labels. Used by tests, demos and the harness `synth`
//! command.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::degrade::{LulcClass, LulcRaster};
use crate::error::{Error, Result};
use crate::raster::{BitMask, GridMeta, HeightRaster, RelativeDepthMap, RgbImage};

pub const GROUND: u32 = 0;
pub const BUILDING: u32 = 1;
pub const TREE: u32 = 2;

pub fn default_class_table() -> BTreeMap<u32, LulcClass> {
    BTreeMap::from([
        (
            GROUND,
            LulcClass {
                name: "ground".into(),
                is_object: false,
            },
        ),
        (
            BUILDING,
            LulcClass {
                name: "building".into(),
                is_object: true,
            },
        ),
        (
            TREE,
            LulcClass {
                name: "tree".into(),
                is_object: true,
            },
        ),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub pixel_size: f64,
    pub buildings: usize,
    pub trees: usize,
    /// Object side length range in pixels.
    pub min_size_px: usize,
    pub max_size_px: usize,
    /// Minimum empty gap between objects, in pixels (>= 1 keeps objects
    /// distinct under 8-connectivity).
    pub gap_px: usize,
    pub seed: u64,
    pub origin: (f64, f64),
    pub crs: String,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            pixel_size: 1.0,
            buildings: 12,
            trees: 12,
            min_size_px: 4,
            max_size_px: 14,
            gap_px: 1,
            seed: 0,
            origin: (500_000.0, 4_400_000.0),
            crs: "EPSG:32613".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub rgb: RgbImage,
    pub gt: HeightRaster,
    pub lulc: LulcRaster,
}

/// Cheap deterministic value noise in `[0, 1)`.
fn hash_noise(seed: u64, r: usize, c: usize) -> f64 {
    let mut x = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((r as u64) << 32 | c as u64);
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51_afd7_ed55_8ccd);
    x ^= x >> 33;
    x = x.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    x ^= x >> 33;
    (x >> 11) as f64 / (1u64 << 53) as f64
}

struct Placed {
    r0: usize,
    c0: usize,
    h: usize,
    w: usize,
}

fn place<R: Rng>(rng: &mut R, occupied: &mut Array2<bool>, spec: &SceneSpec, count: usize) -> Result<Vec<Placed>> {
    let (rows, cols) = occupied.dim();
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > 200 * count.max(1) + 1000 {
            return Err(Error::InvalidArgument(format!(
                "could not place {count} objects without overlap on a {cols}x{rows} grid"
            )));
        }
        let h = rng.random_range(spec.min_size_px..=spec.max_size_px).min(rows);
        let w = rng.random_range(spec.min_size_px..=spec.max_size_px).min(cols);
        let r0 = rng.random_range(0..=rows - h);
        let c0 = rng.random_range(0..=cols - w);
        let g = spec.gap_px;
        let (ra, rb) = (r0.saturating_sub(g), (r0 + h + g).min(rows));
        let (ca, cb) = (c0.saturating_sub(g), (c0 + w + g).min(cols));
        if occupied.slice(ndarray::s![ra..rb, ca..cb]).iter().any(|&o| o) {
            continue;
        }
        occupied.slice_mut(ndarray::s![r0..r0 + h, c0..c0 + w]).fill(true);
        out.push(Placed { r0, c0, h, w });
    }
    Ok(out)
}

/// Terrain, buildings (flat or gabled roofs) and trees (domed crowns).
///
/// Heights are above-ground meters; the ground undulates by under a meter.
pub fn synth_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    if spec.min_size_px == 0 || spec.min_size_px > spec.max_size_px {
        return Err(Error::InvalidArgument("object size range is empty".into()));
    }
    let meta = GridMeta::with_origin(spec.width, spec.height, spec.pixel_size, spec.origin, &spec.crs)?;
    let (rows, cols) = meta.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);

    let mut height = Array2::from_shape_fn((rows, cols), |(r, c)| {
        let (y, x) = (r as f64 * spec.pixel_size, c as f64 * spec.pixel_size);
        0.4 + 0.3 * (x / 23.0 + phase).sin() * (y / 31.0).cos() + 0.05 * hash_noise(spec.seed, r, c)
    });
    let mut labels = Array2::from_elem((rows, cols), GROUND);
    let mut rgb = Array3::from_shape_fn((3, rows, cols), |(ch, r, c)| {
        let n = hash_noise(spec.seed ^ 0xA5, r, c);
        [0.42, 0.38, 0.30][ch] + 0.08 * n
    });

    let mut occupied = Array2::from_elem((rows, cols), false);
    let blds = place(&mut rng, &mut occupied, spec, spec.buildings)?;
    let trees = place(&mut rng, &mut occupied, spec, spec.trees)?;

    for b in &blds {
        let eave: f64 = rng.random_range(4.0..18.0);
        let gable: bool = rng.random_bool(0.5);
        let ridge: f64 = if gable { rng.random_range(1.0..4.0) } else { 0.0 };
        let tone: f64 = rng.random_range(0.45..0.85);
        let tint: [f64; 3] = [tone, tone * rng.random_range(0.85..1.0), tone * rng.random_range(0.8..1.0)];
        for r in b.r0..b.r0 + b.h {
            for c in b.c0..b.c0 + b.w {
                let t = if b.w > 1 { (c - b.c0) as f64 / (b.w - 1) as f64 } else { 0.5 };
                let roof = ridge * (1.0 - (2.0 * t - 1.0).abs());
                height[[r, c]] = eave + roof;
                labels[[r, c]] = BUILDING;
                let shade = if gable && t > 0.5 { 0.85 } else { 1.0 };
                for ch in 0..3 {
                    rgb[[ch, r, c]] = tint[ch] * shade;
                }
            }
        }
    }
    for t in &trees {
        let top: f64 = rng.random_range(3.0..12.0);
        let (cr, cc) = (t.r0 as f64 + (t.h as f64 - 1.0) / 2.0, t.c0 as f64 + (t.w as f64 - 1.0) / 2.0);
        let (ar, ac) = (t.h as f64 / 2.0, t.w as f64 / 2.0);
        for r in t.r0..t.r0 + t.h {
            for c in t.c0..t.c0 + t.w {
                let d2 = ((r as f64 - cr) / ar).powi(2) + ((c as f64 - cc) / ac).powi(2);
                if d2 > 1.0 {
                    continue;
                }
                height[[r, c]] = top * (1.0 - 0.6 * d2);
                labels[[r, c]] = TREE;
                let n = hash_noise(spec.seed ^ 0x7E, r, c);
                rgb[[0, r, c]] = 0.12 + 0.05 * n;
                rgb[[1, r, c]] = 0.30 + 0.12 * n;
                rgb[[2, r, c]] = 0.10 + 0.04 * n;
            }
        }
    }

    Ok(SyntheticScene {
        rgb: RgbImage::new(meta.clone(), rgb)?,
        gt: HeightRaster::from_values(meta.clone(), height)?,
        lulc: LulcRaster::new(meta, labels, default_class_table())?,
    })
}

/// A scene split into a left and a right half with distinct colour
/// palettes. Returns the scene and the region index per pixel (0 left,
/// 1 right).
pub fn two_region_scene(spec: &SceneSpec) -> Result<(SyntheticScene, Array2<u8>)> {
    let mut scene = synth_scene(spec)?;
    let (rows, cols) = scene.gt.meta.shape();
    let region = Array2::from_shape_fn((rows, cols), |(_, c)| u8::from(c >= cols / 2));
    for ((r, c), &k) in region.indexed_iter() {
        if k == 1 {
            // bluish palette on the right: rotate channels and cool the tone
            let px = [scene.rgb.data[[0, r, c]], scene.rgb.data[[1, r, c]], scene.rgb.data[[2, r, c]]];
            scene.rgb.data[[0, r, c]] = 0.5 * px[2];
            scene.rgb.data[[1, r, c]] = 0.6 * px[0];
            scene.rgb.data[[2, r, c]] = (0.35 + px[1]).min(1.0);
        }
    }
    Ok((scene, region))
}

/// `rel = a * gt + b` with per-pixel `(a, b)` chosen by region index.
pub fn region_affine_relative(gt: &HeightRaster, region: &Array2<u8>, pairs: &[(f64, f64)]) -> Result<RelativeDepthMap> {
    let values = Array2::from_shape_fn(gt.meta.shape(), |(r, c)| {
        let (a, b) = pairs[region[[r, c]] as usize];
        a * gt.values[[r, c]] + b
    });
    RelativeDepthMap::new(gt.meta.clone(), values)
}

/// Object cells of a label grid as a mask.
pub fn object_mask(lulc: &LulcRaster) -> BitMask {
    let objects = lulc.object_classes();
    BitMask {
        meta: lulc.meta.clone(),
        bits: lulc.labels.mapv(|l| objects.contains(&l)),
    }
}
