//! Subcommand implementations. Output layout under `output_dir`:
//!
//! ```text
//! <scene>/degraded/level_25/{change_mask.tif, prior.tif, mask.json}
//! <scene>/runs/<method>/level_25/{completed.tif, run.json, metrics.json}
//! <scene>/update/<method>/{updated.tif, report.json, report.txt}
//! <scene>/plots/<method>_level_25_{height,error}.png
//! results.csv, benchmark.csv, benchmark.txt
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use heightcomp::degrade::{apply_degradation, build_change_mask, DegradationSpec, MaskRecord};
use heightcomp::eval::{evaluate_completed, level_label, mean_report, method_display_name, MetricsReport, ReportRow};
use heightcomp::raster::{load_height, load_mask, save_labels, save_raster, LabelRaster};
use heightcomp::synth::{synth_scene, SceneSpec};

use crate::config::ExperimentConfig;
use crate::manifest::SceneManifest;
use crate::methods::{relative_depth, run_method, MethodExtras};
use crate::plot::plot_run;

pub fn level_dir(level: f64) -> String {
    format!("level_{}", (level * 100.0).round() as i64)
}

pub fn scene_dir(cfg: &ExperimentConfig, m: &SceneManifest) -> PathBuf {
    cfg.output_dir.join(&m.scene_id)
}

pub fn degraded_dir(cfg: &ExperimentConfig, m: &SceneManifest, level: f64) -> PathBuf {
    scene_dir(cfg, m).join("degraded").join(level_dir(level))
}

pub fn run_dir(cfg: &ExperimentConfig, m: &SceneManifest, method: &str, level: f64) -> PathBuf {
    scene_dir(cfg, m).join("runs").join(method).join(level_dir(level))
}

/// Write to a sibling temp file, then rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    write_atomic(path, &serde_json::to_vec_pretty(v)?)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn pool(cfg: &ExperimentConfig) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build()?)
}

// ---- synth ----

/// Writes `count` synthetic tiles (rgb, gt, lulc, manifest) under `out`.
pub fn cmd_synth(out: &Path, count: usize, spec: &SceneSpec) -> Result<Vec<PathBuf>> {
    let mut manifests = Vec::new();
    for i in 0..count {
        let id = format!("tile_{i:03}");
        let dir = out.join(&id);
        std::fs::create_dir_all(&dir)?;
        let s = synth_scene(&SceneSpec {
            seed: spec.seed.wrapping_add(i as u64),
            ..spec.clone()
        })?;
        save_raster(&s.rgb, dir.join("rgb.tif"))?;
        save_raster(&s.gt, dir.join("gt.tif"))?;
        save_labels(
            &LabelRaster {
                meta: s.lulc.meta.clone(),
                labels: s.lulc.labels.clone(),
            },
            dir.join("lulc.tif"),
        )?;
        let m = SceneManifest {
            scene_id: id,
            dataset: "synthetic".into(),
            rgb: "rgb.tif".into(),
            gt_dsm: "gt.tif".into(),
            lulc: "lulc.tif".into(),
            object_classes: s.lulc.object_classes().into_iter().collect(),
            prior_dsm: None,
            change_mask: None,
            pixel_size_m: spec.pixel_size,
            notes: format!("synthetic scene, seed {}", spec.seed.wrapping_add(i as u64)),
            expected_mean_m: None,
            expected_std_m: None,
            relative_depth: Default::default(),
            base_dir: PathBuf::new(),
        };
        let p = dir.join("manifest.toml");
        write_atomic(&p, m.to_toml().as_bytes())?;
        manifests.push(p);
    }
    Ok(manifests)
}

// ---- degrade ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskSidecar {
    pub scene_id: String,
    pub level: f64,
    pub config_hash: String,
    pub record: MaskRecord,
}

/// Change mask and degraded prior per level. Masks for one scene share the
/// seed, so higher levels extend lower ones.
pub fn cmd_degrade(m: &SceneManifest, cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let scene = m.load_scene()?;
    let valid = scene.gt.valid_mask();
    let classes: BTreeSet<u32> = m.object_classes.iter().copied().collect();
    let mut written = Vec::new();
    for &level in &cfg.levels {
        let spec = DegradationSpec {
            target_fraction: level,
            buffer_m: cfg.degrade.buffer_m,
            object_classes: classes.clone(),
            seed: cfg.seed(),
        };
        let change = build_change_mask(&scene.lulc, &spec, Some(&valid))
            .with_context(|| format!("{}: level {}", m.scene_id, level_label(level)))?;
        let prior = apply_degradation(&scene.gt, &change.mask)?;
        let dir = degraded_dir(cfg, m, level);
        std::fs::create_dir_all(&dir)?;
        save_raster(&change.mask, dir.join("change_mask.tif"))?;
        save_raster(&prior, dir.join("prior.tif"))?;
        write_json(
            &dir.join("mask.json"),
            &MaskSidecar {
                scene_id: m.scene_id.clone(),
                level,
                config_hash: cfg.hash(),
                record: change.record.clone(),
            },
        )?;
        log::info!(
            "{} {}: removed {:.4} ({} objects)",
            m.scene_id,
            level_label(level),
            change.record.achieved_fraction,
            change.record.selected_objects
        );
        written.push(dir);
    }
    Ok(written)
}

// ---- complete ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub scene_id: String,
    pub method: String,
    pub level: f64,
    pub wall_time_s: f64,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub depth_backend: String,
    pub seed: u64,
    #[serde(flatten)]
    pub extras: MethodExtras,
}

pub fn cmd_complete(m: &SceneManifest, method: &str, level: f64, cfg: &ExperimentConfig) -> Result<RunRecord> {
    let ddir = degraded_dir(cfg, m, level);
    let prior_path = ddir.join("prior.tif");
    if !prior_path.exists() {
        bail!(
            "no degraded prior for {} at {}; run `degrade` first",
            m.scene_id,
            level_label(level)
        );
    }
    let scene = m.load_scene()?;
    let prior = load_height(&prior_path)?;
    let rel = relative_depth(m, &scene.rgb, &scene.gt, cfg)?;
    let t0 = Instant::now();
    let (out, extras) = run_method(method, &scene.rgb, &rel, &prior, cfg)?;
    let record = RunRecord {
        scene_id: m.scene_id.clone(),
        method: method.into(),
        level,
        wall_time_s: t0.elapsed().as_secs_f64(),
        config_hash: cfg.hash(),
        config: cfg.clone(),
        depth_backend: cfg.depth_backend.kind.as_str().into(),
        seed: cfg.seed(),
        extras,
    };
    let rdir = run_dir(cfg, m, method, level);
    std::fs::create_dir_all(&rdir)?;
    let tmp = rdir.join("completed.tmp.tif");
    save_raster(&out, &tmp)?;
    std::fs::rename(&tmp, rdir.join("completed.tif"))?;
    write_json(&rdir.join("run.json"), &record)?;
    log::info!("{} {method} {}: {:.2} s", m.scene_id, level_label(level), record.wall_time_s);
    Ok(record)
}

// ---- evaluate ----

pub fn cmd_evaluate(m: &SceneManifest, method: &str, level: f64, cfg: &ExperimentConfig) -> Result<MetricsReport> {
    let rdir = run_dir(cfg, m, method, level);
    let completed = rdir.join("completed.tif");
    if !completed.exists() {
        bail!("no {method} run for {} at {}; run `complete` first", m.scene_id, level_label(level));
    }
    let pred = load_height(&completed)?;
    let gt = load_height(m.resolve(&m.gt_dsm))?;
    let change = load_mask(degraded_dir(cfg, m, level).join("change_mask.tif"))?;
    let report = evaluate_completed(&pred, &gt, &change)?;
    write_json(&rdir.join("metrics.json"), &report)?;
    Ok(report)
}

// ---- benchmark ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub level: f64,
    pub mae: f64,
    pub rmse: f64,
    pub ssim: f64,
    pub tiles: usize,
}

pub struct BenchmarkOutput {
    pub rows: Vec<AggregateRow>,
    pub per_tile: Vec<ReportRow>,
    pub table: String,
}

/// Per-tile metrics for one scene; runs missing pieces when `run` is set.
fn scene_reports(m: &SceneManifest, cfg: &ExperimentConfig, run: bool) -> Result<Vec<(String, f64, MetricsReport)>> {
    let mut out = Vec::new();
    for &level in &cfg.levels {
        if !degraded_dir(cfg, m, level).join("prior.tif").exists() {
            if !run {
                bail!("{}: no degraded inputs at {}; pass --run to create them", m.scene_id, level_label(level));
            }
            cmd_degrade(m, cfg)?;
        }
        for method in &cfg.methods {
            let rdir = run_dir(cfg, m, method, level);
            let metrics = rdir.join("metrics.json");
            let report = if metrics.exists() && rdir.join("run.json").exists() && fresh(&rdir, cfg)? {
                read_json(&metrics)?
            } else {
                if !run {
                    bail!(
                        "{}: missing or stale {method} run at {}; pass --run to compute it",
                        m.scene_id,
                        level_label(level)
                    );
                }
                cmd_complete(m, method, level, cfg)?;
                cmd_evaluate(m, method, level, cfg)?
            };
            out.push((method.clone(), level, report));
        }
    }
    Ok(out)
}

fn fresh(rdir: &Path, cfg: &ExperimentConfig) -> Result<bool> {
    let rec: RunRecord = read_json(&rdir.join("run.json"))?;
    Ok(rec.config_hash == cfg.hash())
}

pub fn render_table(rows: &[AggregateRow]) -> String {
    let mut s = format!("{:<20} {:<6} {:<22} {}\n", "method", "level", "MAE & RMSE & SSIM", "tiles");
    for r in rows {
        let cell = format!("{:.2} & {:.2} & {:.2}", r.mae, r.rmse, r.ssim);
        s.push_str(&format!(
            "{:<20} {:<6} {:<22} {}\n",
            method_display_name(&r.method),
            level_label(r.level),
            cell,
            r.tiles
        ));
    }
    s
}

pub fn cmd_benchmark(manifests: &[SceneManifest], cfg: &ExperimentConfig, run: bool) -> Result<BenchmarkOutput> {
    if manifests.is_empty() {
        bail!("benchmark needs at least one manifest");
    }
    let per_scene: Vec<Vec<(String, f64, MetricsReport)>> =
        pool(cfg)?.install(|| manifests.par_iter().map(|m| scene_reports(m, cfg, run)).collect::<Result<_>>())?;

    let mut per_tile = Vec::new();
    for (m, reps) in manifests.iter().zip(&per_scene) {
        for (method, level, r) in reps {
            per_tile.push(ReportRow::new(method, &m.dataset, *level, &m.scene_id, r));
        }
    }
    let mut rows = Vec::new();
    for method in &cfg.methods {
        for &level in &cfg.levels {
            let reps: Vec<MetricsReport> = per_scene
                .iter()
                .flatten()
                .filter(|(mm, l, _)| mm == method && *l == level)
                .map(|(_, _, r)| r.clone())
                .collect();
            let mean = mean_report(&reps)?;
            rows.push(AggregateRow {
                method: method.clone(),
                level,
                mae: mean.mae_m,
                rmse: mean.rmse_m,
                ssim: mean.ssim,
                tiles: reps.len(),
            });
        }
    }
    let table = render_table(&rows);
    std::fs::create_dir_all(&cfg.output_dir)?;
    let mut w = csv::Writer::from_path(cfg.output_dir.join("results.csv"))?;
    for r in &per_tile {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(cfg.output_dir.join("benchmark.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    write_atomic(&cfg.output_dir.join("benchmark.txt"), table.as_bytes())?;
    Ok(BenchmarkOutput { rows, per_tile, table })
}

// ---- update-dsm ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UpdateReport {
    pub scene_id: String,
    pub method: String,
    pub config_hash: String,
    /// `("None (prior)", outdated prior)` then `(method, updated DSM)`.
    pub rows: Vec<(String, MetricsReport)>,
}

impl UpdateReport {
    pub fn text(&self) -> String {
        self.rows.iter().map(|(name, r)| format!("{name}: {r}\n")).collect()
    }
}

/// Completes the changed regions of an outdated prior and reports metrics
/// of the prior and of the update over the changed pixels.
pub fn cmd_update_dsm(m: &SceneManifest, method: &str, cfg: &ExperimentConfig) -> Result<UpdateReport> {
    let outdated = m
        .load_prior()?
        .with_context(|| format!("manifest {} has no prior_dsm", m.scene_id))?;
    let change = m
        .load_change_mask()?
        .with_context(|| format!("manifest {} has no change_mask", m.scene_id))?;
    if change.count() == 0 {
        bail!("change mask of {} is empty", m.scene_id);
    }
    let scene = m.load_scene()?;
    outdated.meta.ensure_same(&scene.gt.meta)?;
    let prior = apply_degradation(&outdated, &change)?;
    let rel = relative_depth(m, &scene.rgb, &scene.gt, cfg)?;
    let (updated, _) = run_method(method, &scene.rgb, &rel, &prior, cfg)?;

    // outdated nodata inside the change region has nothing to score
    let mut before = outdated.clone();
    for ((r, c), v) in before.values.indexed_iter_mut() {
        if before.nodata.bits[[r, c]] {
            *v = updated.values[[r, c]];
            before.nodata.bits[[r, c]] = false;
        }
    }
    let rows = vec![
        ("None (prior)".to_string(), evaluate_completed(&before, &scene.gt, &change)?),
        (
            method_display_name(method).to_string(),
            evaluate_completed(&updated, &scene.gt, &change)?,
        ),
    ];
    let report = UpdateReport {
        scene_id: m.scene_id.clone(),
        method: method.into(),
        config_hash: cfg.hash(),
        rows,
    };
    let dir = scene_dir(cfg, m).join("update").join(method);
    std::fs::create_dir_all(&dir)?;
    save_raster(&updated, dir.join("updated.tif"))?;
    write_json(&dir.join("report.json"), &report)?;
    write_atomic(&dir.join("report.txt"), report.text().as_bytes())?;
    Ok(report)
}

// ---- plot ----

pub fn cmd_plot(m: &SceneManifest, cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let gt = load_height(m.resolve(&m.gt_dsm))?;
    let dir = scene_dir(cfg, m).join("plots");
    let mut files = Vec::new();
    for method in &cfg.methods {
        for &level in &cfg.levels {
            let p = run_dir(cfg, m, method, level).join("completed.tif");
            if !p.exists() {
                log::warn!("{}: no {method} run at {}, skipping", m.scene_id, level_label(level));
                continue;
            }
            let pred = load_height(&p)?;
            let stem = format!("{method}_{}", level_dir(level));
            files.extend(plot_run(&dir, &stem, &pred.values, &gt.values)?);
        }
    }
    if files.is_empty() {
        bail!("no completed runs to plot for {}", m.scene_id);
    }
    Ok(files)
}
