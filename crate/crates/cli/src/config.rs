use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use scene_core::agent::TrainConfig;
use scene_core::env::Level;
use scene_core::experiment::AssetConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Everything a subcommand may read. Built from defaults, then the config
/// file, then command-line flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub difficulty: Level,
    /// Worlds written by `gen`.
    pub count: usize,
    pub train_worlds: usize,
    pub out_worlds: usize,
    /// Fraction of each entity category held out for the OUT split.
    pub out_fraction: f64,
    pub runs: usize,
    pub train: TrainConfig,
    pub assets: AssetConfig,
    pub cache_dir: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            difficulty: Level::Easy,
            count: 5,
            train_worlds: 10,
            out_worlds: 5,
            out_fraction: 0.3,
            runs: 5,
            train: TrainConfig::default(),
            assets: AssetConfig::default(),
            cache_dir: None,
            corpus: None,
            lexicon: None,
        }
    }
}

/// Overlays `patch` onto `base`, descending into objects.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Defaults overlaid with `file`. A run manifest is accepted too, in which
/// case its recorded config is used.
pub fn load(file: Option<&Path>) -> Result<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut patch: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if patch.get("command").is_some() {
            if let Some(config) = patch.get_mut("config") {
                patch = config.take();
            }
        }
        merge(&mut value, patch);
    }
    serde_json::from_value(value).context("invalid configuration")
}
