//! The run configuration file: one JSON object with a section per stage.
//! Missing sections and fields take their defaults; command-line flags
//! override whatever the file says.

use std::path::Path;

use serde::{Deserialize, Serialize};

use misfitlab::catalog::{OutfitPlan, UniverseConfig};
use misfitlab::flip::FlipConfig;
use misfitlab::misfit::MisfitConfig;
use misfitlab::victor::VictorConfig;

use crate::fail::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Two layers, `2d` feed-forward, 1e-3 base rate.
    Desk,
    /// Eight layers, `4d` feed-forward, 1e-4 base rate.
    Paper,
}

impl Preset {
    pub fn victor(self) -> VictorConfig {
        match self {
            Preset::Desk => VictorConfig::desk(),
            Preset::Paper => VictorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    /// The trained contrastive encoders.
    Flip,
    /// Untrained encoders (a fixed random projection).
    Stub,
    /// Image block means and hashed token counts.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureSettings {
    pub source: Source,
    /// Width of raw features; encoder sources use the encoder width.
    pub dim: usize,
}

impl Default for FeatureSettings {
    fn default() -> Self {
        Self { source: Source::Flip, dim: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub universe: UniverseConfig,
    pub outfits: OutfitPlan,
    pub misfit: MisfitConfig,
    pub flip: FlipConfig,
    pub features: FeatureSettings,
    pub victor_preset: Preset,
    /// Fields laid over the preset.
    pub victor: serde_json::Map<String, serde_json::Value>,
    /// Alpha grid of the ablation.
    pub alphas: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            universe: UniverseConfig::default(),
            outfits: OutfitPlan::default(),
            misfit: MisfitConfig::default(),
            flip: FlipConfig::default(),
            features: FeatureSettings::default(),
            victor_preset: Preset::Desk,
            victor: serde_json::Map::new(),
            alphas: vec![0.2, 0.5, 1.0, 2.0],
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::config(format!("config {}: {e}", path.display())))
    }

    /// The preset with the file's `victor` fields applied.
    pub fn victor_config(&self, preset: Option<Preset>) -> Result<VictorConfig, Failure> {
        let base = preset.unwrap_or(self.victor_preset).victor();
        let mut v = serde_json::to_value(base).expect("serializable");
        let obj = v.as_object_mut().expect("object");
        for (k, val) in &self.victor {
            if !obj.contains_key(k) {
                return Err(Failure::config(format!("unknown victor field `{k}`")));
            }
            obj.insert(k.clone(), val.clone());
        }
        serde_json::from_value(v).map_err(|e| Failure::config(format!("victor section: {e}")))
    }
}
