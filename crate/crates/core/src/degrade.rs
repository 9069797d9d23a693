//! Reproducible incomplete priors built by removing buffered surface objects.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{connected_components, dilate_seeds, BitMask, GridMeta, HeightRaster, LabelRaster};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LulcClass {
    pub name: String,
    pub is_object: bool,
}

/// Land use / land cover labels with their class table.
#[derive(Debug, Clone)]
pub struct LulcRaster {
    pub meta: GridMeta,
    pub labels: Array2<u32>,
    pub class_table: BTreeMap<u32, LulcClass>,
}

impl LulcRaster {
    pub fn new(
        meta: GridMeta,
        labels: Array2<u32>,
        class_table: BTreeMap<u32, LulcClass>,
    ) -> Result<Self> {
        if labels.dim() != meta.shape() {
            return Err(Error::MetaMismatch("label grid shape".into()));
        }
        if let Some(missing) = labels.iter().find(|l| !class_table.contains_key(l)) {
            return Err(Error::InvalidArgument(format!(
                "label {missing} is not in the class table"
            )));
        }
        Ok(Self {
            meta,
            labels,
            class_table,
        })
    }

    pub fn from_labels(raster: LabelRaster, class_table: BTreeMap<u32, LulcClass>) -> Result<Self> {
        Self::new(raster.meta, raster.labels, class_table)
    }

    /// Codes flagged as removable surface objects.
    pub fn object_classes(&self) -> BTreeSet<u32> {
        self.class_table
            .iter()
            .filter(|(_, c)| c.is_object)
            .map(|(&k, _)| k)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub target_fraction: f64,
    pub buffer_m: f64,
    pub object_classes: BTreeSet<u32>,
    pub seed: u64,
}

impl DegradationSpec {
    fn validate(&self) -> Result<()> {
        if !(self.target_fraction > 0.0 && self.target_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "target fraction {} outside (0, 1)",
                self.target_fraction
            )));
        }
        if !(self.buffer_m >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "buffer {} m is negative",
                self.buffer_m
            )));
        }
        Ok(())
    }
}

/// Sidecar record written next to each stored mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub target_fraction: f64,
    pub achieved_fraction: f64,
    pub seed: u64,
    pub buffer_m: f64,
    pub object_classes: Vec<u32>,
    pub selected_objects: usize,
    pub candidate_objects: usize,
}

#[derive(Debug, Clone)]
pub struct ChangeMask {
    pub mask: BitMask,
    /// Indices (into the row-major component list) of removed objects, in
    /// selection order.
    pub selected: Vec<usize>,
    pub record: MaskRecord,
}

fn removed_fraction(mask: &Array2<bool>, valid: Option<&Array2<bool>>, valid_total: usize) -> f64 {
    let removed = match valid {
        Some(v) => mask.iter().zip(v.iter()).filter(|(&m, &v)| m && v).count(),
        None => mask.iter().filter(|&&m| m).count(),
    };
    removed as f64 / valid_total as f64
}

/// Selects object components in seeded random order, buffers each by
/// `buffer_m`, and stops at the first union whose removed fraction reaches
/// the target.
///
/// The fraction counts removed cells among `valid` cells (all cells when
/// `valid` is `None`).
pub fn build_change_mask(
    lulc: &LulcRaster,
    spec: &DegradationSpec,
    valid: Option<&BitMask>,
) -> Result<ChangeMask> {
    spec.validate()?;
    if let Some(v) = valid {
        lulc.meta.ensure_same(&v.meta)?;
    }
    let valid_bits = valid.map(|v| &v.bits);
    let valid_total = valid.map_or(lulc.meta.len(), BitMask::count);
    if valid_total == 0 {
        return Err(Error::InsufficientValid {
            needed: 1,
            found: 0,
        });
    }

    let components = connected_components(&lulc.labels, |c| spec.object_classes.contains(&c));
    if components.is_empty() {
        return Err(Error::TargetUnreachable {
            target: spec.target_fraction,
            max_achievable: 0.0,
        });
    }
    let mut order: Vec<usize> = (0..components.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);

    let radius_px = spec.buffer_m / lulc.meta.pixel_size;
    let mut bits = Array2::from_elem(lulc.meta.shape(), false);
    let mut selected = Vec::new();
    let mut achieved = 0.0;
    for &idx in &order {
        dilate_seeds(&mut bits, &components[idx].cells, radius_px);
        selected.push(idx);
        achieved = removed_fraction(&bits, valid_bits, valid_total);
        if achieved >= spec.target_fraction {
            let record = MaskRecord {
                target_fraction: spec.target_fraction,
                achieved_fraction: achieved,
                seed: spec.seed,
                buffer_m: spec.buffer_m,
                object_classes: spec.object_classes.iter().copied().collect(),
                selected_objects: selected.len(),
                candidate_objects: components.len(),
            };
            log::info!(
                "change mask: target {:.3}, achieved {:.4} with {} of {} objects",
                spec.target_fraction,
                achieved,
                selected.len(),
                components.len()
            );
            return Ok(ChangeMask {
                mask: BitMask::new(lulc.meta.clone(), bits)?,
                selected,
                record,
            });
        }
    }
    Err(Error::TargetUnreachable {
        target: spec.target_fraction,
        max_achievable: achieved,
    })
}

/// Object components of `lulc` in the same order `build_change_mask` indexes
/// them.
pub fn object_components(lulc: &LulcRaster, classes: &BTreeSet<u32>) -> Vec<crate::raster::Component> {
    connected_components(&lulc.labels, |c| classes.contains(&c))
}

/// Turns changed cells into nodata; pre-existing nodata is kept.
pub fn apply_degradation(gt: &HeightRaster, change: &BitMask) -> Result<HeightRaster> {
    gt.meta.ensure_same(&change.meta)?;
    let nodata = gt.nodata.union(change)?;
    HeightRaster::new(gt.meta.clone(), gt.values.clone(), nodata)
}
