use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use heightcomp::eval::{level_label, method_display_name};
use heightcomp::synth::SceneSpec;

use crate::commands::*;
use crate::config::ExperimentConfig;
use crate::manifest::SceneManifest;

#[derive(Parser, Debug)]
#[command(name = "heightcomp", version, about = "Metric height completion from relative depth and incomplete DSM priors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Config override, e.g. `--set tta.steps=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Common {
    pub fn load(&self) -> Result<ExperimentConfig> {
        let mut o = self.overrides.clone();
        if let Some(out) = &self.out {
            o.push(format!("output_dir={}", toml::Value::String(out.display().to_string())));
        }
        ExperimentConfig::load(self.config.as_deref(), &o)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write seeded synthetic tiles with manifests.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        tiles: usize,
        #[arg(long, default_value_t = 96)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        pixel_size: f64,
        #[arg(long, default_value_t = 30)]
        buildings: usize,
        #[arg(long, default_value_t = 30)]
        trees: usize,
    },
    /// Build change masks and degraded priors for every configured level.
    Degrade {
        #[arg(long = "manifest", required = true)]
        manifests: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Complete the degraded prior of one scene with one method.
    Complete {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        method: String,
        /// Levels to run (default: all configured levels).
        #[arg(long = "level")]
        levels: Vec<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Score completed runs on the changed pixels.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        method: String,
        #[arg(long = "level")]
        levels: Vec<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Aggregate methods x levels over scenes.
    Benchmark {
        #[arg(long = "manifest", required = true)]
        manifests: Vec<PathBuf>,
        /// Compute missing or stale runs instead of failing.
        #[arg(long)]
        run: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Fill the changed regions of an outdated DSM.
    UpdateDsm {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "prior2dsm")]
        method: String,
        #[command(flatten)]
        common: Common,
    },
    /// Height and error maps for completed runs.
    Plot {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn levels_or_default(levels: &[f64], cfg: &ExperimentConfig) -> Vec<f64> {
    if levels.is_empty() {
        cfg.levels.clone()
    } else {
        levels.to_vec()
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            tiles,
            size,
            seed,
            pixel_size,
            buildings,
            trees,
        } => {
            let spec = SceneSpec {
                width: size,
                height: size,
                pixel_size,
                buildings,
                trees,
                min_size_px: 3,
                max_size_px: 10,
                seed,
                ..Default::default()
            };
            for p in cmd_synth(&out, tiles, &spec)? {
                println!("{}", p.display());
            }
        }
        Command::Degrade { manifests, common } => {
            let cfg = common.load()?;
            for p in &manifests {
                let m = SceneManifest::load(p)?;
                for d in cmd_degrade(&m, &cfg)? {
                    println!("{}", d.display());
                }
            }
        }
        Command::Complete {
            manifest,
            method,
            levels,
            common,
        } => {
            let cfg = common.load()?;
            let m = SceneManifest::load(&manifest)?;
            for level in levels_or_default(&levels, &cfg) {
                let rec = cmd_complete(&m, &method, level, &cfg)?;
                println!(
                    "{} {} {}: {:.2} s, config {}",
                    rec.scene_id,
                    method,
                    level_label(level),
                    rec.wall_time_s,
                    rec.config_hash
                );
            }
        }
        Command::Evaluate {
            manifest,
            method,
            levels,
            common,
        } => {
            let cfg = common.load()?;
            let m = SceneManifest::load(&manifest)?;
            for level in levels_or_default(&levels, &cfg) {
                let r = cmd_evaluate(&m, &method, level, &cfg)?;
                println!("{} [{}]", r.row(method_display_name(&method), level), m.scene_id);
            }
        }
        Command::Benchmark { manifests, run, common } => {
            let cfg = common.load()?;
            let ms = manifests.iter().map(|p| SceneManifest::load(p)).collect::<Result<Vec<_>>>()?;
            let out = cmd_benchmark(&ms, &cfg, run)?;
            print!("{}", out.table);
        }
        Command::UpdateDsm { manifest, method, common } => {
            let cfg = common.load()?;
            let m = SceneManifest::load(&manifest)?;
            print!("{}", cmd_update_dsm(&m, &method, &cfg)?.text());
        }
        Command::Plot { manifest, common } => {
            let cfg = common.load()?;
            let m = SceneManifest::load(&manifest)?;
            for f in cmd_plot(&m, &cfg)? {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}
