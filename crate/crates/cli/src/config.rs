//! TOML run configuration. Every key is optional; command-line flags win.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub optics: OpticsSection,
    #[serde(default)]
    pub design: DesignSection,
    pub kernel: Option<PathBuf>,
    pub projection: Option<PathBuf>,
    #[serde(default)]
    pub scoring: ScoringSection,
    #[serde(default)]
    pub tissue: TissueSection,
    pub patch: Option<usize>,
    pub threshold: Option<f64>,
    pub pass_ratio: Option<f64>,
    pub jobs: Option<usize>,
    pub block: Option<usize>,
    pub z_cap: Option<f64>,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpticsSection {
    pub na: Option<f64>,
    pub wavelength_m: Option<f64>,
    pub refractive_index: Option<f64>,
    pub pixel_pitch_m: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSection {
    pub z_star: Option<f64>,
    pub order_count: Option<usize>,
    pub cutoff: Option<f64>,
    pub half_length: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringSection {
    pub moment_order: Option<u32>,
    pub percentile: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TissueSection {
    pub max_mean: Option<f64>,
    pub min_std: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub png: Option<PathBuf>,
    pub tiles: Option<PathBuf>,
    pub curve: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: Self =
            toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        // Relative paths in the file are relative to the file.
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.kernel,
            &mut cfg.projection,
            &mut cfg.output.png,
            &mut cfg.output.tiles,
            &mut cfg.output.curve,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}
