//! Run manifest written next to every command's outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::CONV_LAYER_COUNT;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::trainer::PhaseRecord;

pub const SCHEMA_VERSION: u32 = 1;

/// How conv layers are numbered when choosing feature taps.
pub const CONV_INDEXING: &str =
    "stem conv is 0; bottleneck b (0-based, network order) owns convs 3b+1..=3b+3; projection shortcuts are not counted";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub code_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: Config,
    pub backbone_checksum: Option<String>,
    pub taps: Vec<usize>,
    pub conv_layer_count: usize,
    pub conv_indexing: String,
    /// Whether each remover refine conv is followed by ReLU.
    pub refine_relu: bool,
    pub phase_ledger: Vec<PhaseRecord>,
    pub stopped_early: bool,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &Config, seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            command: command.to_owned(),
            code_version: env!("CARGO_PKG_VERSION").to_owned(),
            config_hash: cfg.hash_hex(),
            seed,
            config: cfg.clone(),
            backbone_checksum: None,
            taps: cfg.backbone.taps.clone(),
            conv_layer_count: CONV_LAYER_COUNT,
            conv_indexing: CONV_INDEXING.to_owned(),
            refine_relu: true,
            phase_ledger: Vec::new(),
            stopped_early: false,
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("manifest: {e}")))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}
