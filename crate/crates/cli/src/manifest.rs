use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use scene_core::seed::hash_str;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// Resolved configuration; pass this file back as `--config` to rerun.
    pub config: Value,
    pub config_hash: String,
    pub master_seed: u64,
    pub versions: BTreeMap<String, String>,
    pub outputs: Vec<PathBuf>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// JSON with object keys sorted at every level.
pub fn canonical_json(value: &Value) -> String {
    let mut out = String::new();
    write_canonical(value, &mut out);
    out
}

fn write_canonical(value: &Value, out: &mut String) {
    match value {
        Value::Object(map) => {
            let sorted: BTreeMap<&String, &Value> = map.iter().collect();
            out.push('{');
            for (i, (k, v)) in sorted.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{}:", Value::String(k.clone()));
                write_canonical(v, out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, v) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(v, out);
            }
            out.push(']');
        }
        other => out.push_str(&other.to_string()),
    }
}

pub fn config_hash(config: &Value) -> String {
    format!("{:016x}", hash_str(&canonical_json(config)))
}

impl RunManifest {
    pub fn new(command: &str, config: Value, master_seed: u64) -> Self {
        let versions = BTreeMap::from([
            ("scene-core".to_string(), scene_core::VERSION.to_string()),
            ("scene-cli".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ]);
        RunManifest {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config_hash: config_hash(&config),
            config,
            master_seed,
            versions,
            outputs: Vec::new(),
            started_unix: now(),
            finished_unix: None,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn finish(&mut self, dir: &Path, outputs: Vec<PathBuf>) -> Result<()> {
        self.outputs = outputs;
        self.finished_unix = Some(now());
        self.write(dir)
    }
}
