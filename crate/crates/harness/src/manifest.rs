//! Scene manifests: which rasters make up one scene and where they live.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use heightcomp::degrade::{LulcClass, LulcRaster};
use heightcomp::raster::{load_height, load_labels, load_mask, load_rgb, BitMask, HeightRaster, RgbImage};

fn default_objects() -> Vec<u32> {
    vec![1, 2]
}

fn default_dataset() -> String {
    "unnamed".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub scene_id: String,
    #[serde(default = "default_dataset")]
    pub dataset: String,
    pub rgb: PathBuf,
    pub gt_dsm: PathBuf,
    pub lulc: PathBuf,
    /// Label codes treated as removable objects.
    #[serde(default = "default_objects")]
    pub object_classes: Vec<u32>,
    #[serde(default)]
    pub prior_dsm: Option<PathBuf>,
    #[serde(default)]
    pub change_mask: Option<PathBuf>,
    pub pixel_size_m: f64,
    #[serde(default)]
    pub notes: String,
    #[serde(default)]
    pub expected_mean_m: Option<f64>,
    #[serde(default)]
    pub expected_std_m: Option<f64>,
    /// Precomputed relative depth per backend name.
    #[serde(default)]
    pub relative_depth: BTreeMap<String, PathBuf>,
    /// Directory of the manifest file; relative paths resolve against it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

pub struct Scene {
    pub rgb: RgbImage,
    pub gt: HeightRaster,
    pub lulc: LulcRaster,
}

impl SceneManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        let mut m: SceneManifest = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))?
        };
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if m.scene_id.is_empty() || m.scene_id.contains(['/', '\\']) {
            bail!("scene_id {:?} must be a non-empty name without path separators", m.scene_id);
        }
        for p in [&m.rgb, &m.gt_dsm, &m.lulc]
            .into_iter()
            .chain(m.prior_dsm.iter())
            .chain(m.change_mask.iter())
        {
            let full = m.resolve(p);
            if !full.exists() {
                bail!("manifest {} references missing file {}", path.display(), full.display());
            }
        }
        Ok(m)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn load_scene(&self) -> Result<Scene> {
        let rgb = load_rgb(self.resolve(&self.rgb))?;
        let gt = load_height(self.resolve(&self.gt_dsm))?;
        let labels = load_labels(self.resolve(&self.lulc))?;
        gt.meta.ensure_same(&rgb.meta)?;
        gt.meta.ensure_same(&labels.meta)?;
        if (gt.meta.pixel_size - self.pixel_size_m).abs() > 1e-9 * self.pixel_size_m.max(1.0) {
            bail!(
                "manifest pixel size {} m disagrees with the rasters ({} m)",
                self.pixel_size_m,
                gt.meta.pixel_size
            );
        }
        self.check_stats(&gt);
        let objects: BTreeSet<u32> = self.object_classes.iter().copied().collect();
        let table = labels
            .labels
            .iter()
            .copied()
            .collect::<BTreeSet<u32>>()
            .into_iter()
            .chain(objects.iter().copied())
            .map(|l| {
                (
                    l,
                    LulcClass {
                        name: format!("class_{l}"),
                        is_object: objects.contains(&l),
                    },
                )
            })
            .collect();
        let lulc = LulcRaster::from_labels(labels, table)?;
        Ok(Scene { rgb, gt, lulc })
    }

    pub fn load_prior(&self) -> Result<Option<HeightRaster>> {
        self.prior_dsm.as_ref().map(|p| Ok(load_height(self.resolve(p))?)).transpose()
    }

    pub fn load_change_mask(&self) -> Result<Option<BitMask>> {
        self.change_mask.as_ref().map(|p| Ok(load_mask(self.resolve(p))?)).transpose()
    }

    /// Warns when the ground truth mean or std is more than 20% off the
    /// declared values.
    pub fn check_stats(&self, gt: &HeightRaster) -> Vec<String> {
        let v: Vec<f64> = gt.valid_cells().into_iter().map(|c| c.2).collect();
        if v.is_empty() {
            return Vec::new();
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        let mut warnings = Vec::new();
        for (what, got, want) in [("mean", mean, self.expected_mean_m), ("std", std, self.expected_std_m)] {
            if let Some(want) = want {
                if (got - want).abs() > 0.2 * want.abs() {
                    let msg = format!(
                        "{}: ground truth {what} {got:.2} m is more than 20% off the declared {want:.2} m",
                        self.scene_id
                    );
                    log::warn!("{msg}");
                    warnings.push(msg);
                }
            }
        }
        warnings
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use heightcomp::raster::GridMeta;
    use ndarray::Array2;

    fn manifest(mean: Option<f64>, std: Option<f64>) -> SceneManifest {
        SceneManifest {
            scene_id: "t".into(),
            dataset: "d".into(),
            rgb: "a".into(),
            gt_dsm: "b".into(),
            lulc: "c".into(),
            object_classes: vec![1],
            prior_dsm: None,
            change_mask: None,
            pixel_size_m: 1.0,
            notes: String::new(),
            expected_mean_m: mean,
            expected_std_m: std,
            relative_depth: BTreeMap::new(),
            base_dir: PathBuf::new(),
        }
    }

    #[test]
    fn stats_warning_threshold() {
        let meta = GridMeta::new(2, 1, 1.0).unwrap();
        let gt = HeightRaster::from_values(meta, Array2::from_shape_vec((1, 2), vec![2.0, 6.0]).unwrap()).unwrap();
        assert!(manifest(Some(4.2), Some(2.0)).check_stats(&gt).is_empty());
        assert_eq!(manifest(Some(6.0), Some(3.0)).check_stats(&gt).len(), 2);
        assert!(manifest(None, None).check_stats(&gt).is_empty());
    }

    #[test]
    fn missing_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.toml");
        std::fs::write(&p, manifest(None, None).to_toml()).unwrap();
        let err = SceneManifest::load(&p).unwrap_err().to_string();
        assert!(err.contains("missing file"), "{err}");
    }
}
