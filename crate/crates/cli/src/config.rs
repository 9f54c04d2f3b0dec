//! Run configuration files: JSON with every field optional and defaulted.

use std::path::Path;

use safe_core::trainer::{Mode, RunConfig};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
    }
}

pub fn parse_config(text: &str, path: &Path) -> CliResult<RunConfig> {
    serde_json::from_str(text).map_err(|e| CliError::ConfigParse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Load `path` (or the defaults when absent), apply overrides, and validate.
pub fn load_config(path: Option<&Path>, overrides: &Overrides) -> CliResult<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| CliError::Read {
                path: p.to_path_buf(),
                source,
            })?;
            parse_config(&text, p)?
        }
        None => RunConfig::default(),
    };
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

/// SHA-256 of the compact JSON serialization, hex encoded.
pub fn config_hash(cfg: &RunConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

pub fn default_config_json() -> String {
    serde_json::to_string_pretty(&RunConfig::default()).expect("config serializes")
}
