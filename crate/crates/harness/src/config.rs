//! Experiment configuration: one TOML file plus `key=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use heightcomp::align::NeighborQueryConfig;
use heightcomp::depth::BackendKind;
use heightcomp::tta::TtaConfig;

pub const METHODS: &[&str] = &[
    "global",
    "lwlr",
    "knn",
    "bilinear",
    "prior2dsm",
    "prior2dsm_frozen",
    "prior2dsm_direct",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthConfig {
    pub kind: BackendKind,
    /// Oracle parameters: `rel = a * gt + b + noise`.
    pub a: f64,
    pub b: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DepthConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::AffineOfGt,
            a: 2.0,
            b: -6.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Toy,
    /// Tensor file exported from a production encoder.
    Weights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub weights: Option<PathBuf>,
    /// Use the toy backbone when the weights file is missing instead of failing.
    pub allow_toy_fallback: bool,
    pub toy_seed: u64,
    pub toy_patch: usize,
    pub toy_dim: usize,
    pub toy_layers: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::Toy,
            weights: None,
            allow_toy_fallback: false,
            toy_seed: 0,
            toy_patch: 16,
            toy_dim: 32,
            toy_layers: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradeConfig {
    pub buffer_m: f64,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        Self { buffer_m: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub levels: Vec<f64>,
    pub methods: Vec<String>,
    /// The first seed drives masks, head and adapter initialization.
    pub seeds: Vec<u64>,
    pub depth_backend: DepthConfig,
    pub backbone: BackboneConfig,
    pub tta: TtaConfig,
    pub neighbors: NeighborQueryConfig,
    pub degrade: DegradeConfig,
    pub output_dir: PathBuf,
    /// Tile-level worker threads (0 = one per core).
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            levels: vec![0.25, 0.5, 0.75],
            methods: vec!["global".into(), "prior2dsm".into()],
            seeds: vec![0],
            depth_backend: DepthConfig::default(),
            backbone: BackboneConfig::default(),
            tta: TtaConfig::default(),
            neighbors: NeighborQueryConfig::default(),
            degrade: DegradeConfig::default(),
            output_dir: PathBuf::from("runs"),
            workers: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(doc).try_into().context("invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            bail!("config lists no methods");
        }
        for m in &self.methods {
            if !METHODS.contains(&m.as_str()) {
                bail!("unknown method {m:?} (expected one of {})", METHODS.join(", "));
            }
        }
        if self.levels.is_empty() {
            bail!("config lists no levels");
        }
        if let Some(l) = self.levels.iter().find(|l| !(**l > 0.0 && **l < 1.0)) {
            bail!("level {l} outside (0, 1)");
        }
        if self.seeds.is_empty() {
            bail!("config lists no seeds");
        }
        if !(self.degrade.buffer_m >= 0.0) {
            bail!("negative degradation buffer");
        }
        self.tta.validate()?;
        self.neighbors.validate()?;
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seeds[0]
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// `a.b.c=value`; the value is parsed as TOML and kept as a string if that
/// fails.
fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .with_context(|| format!("override {spec:?} is not key=value"))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .with_context(|| format!("override {key}: {p} is not a table"))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
