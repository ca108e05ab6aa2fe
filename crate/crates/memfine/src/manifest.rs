use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use memfine_core::routing_sim::Distribution;
use memfine_core::throughput::CostParams;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RunError};
use crate::scenario::ScenarioFile;

pub const MANIFEST_VERSION: &str = "memfine-manifest v1";

/// Everything needed to rerun a command, plus what it wrote.
///
/// The scenario is embedded, so a rerun does not depend on the original file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub tool_version: String,
    pub subcommand: String,
    pub scenario_path: Option<String>,
    pub scenario: Option<ScenarioFile>,
    pub seed: Option<u64>,
    pub distribution: Option<Distribution>,
    pub iterations: Option<usize>,
    pub replay_trace: Option<String>,
    pub bins: Option<Vec<u64>>,
    pub fixed_chunks: Option<u64>,
    pub cost: Option<CostParams>,
    pub outputs: Vec<String>,
    pub started_unix_ms: u128,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn new(subcommand: &str) -> Self {
        Self {
            format: MANIFEST_VERSION.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            subcommand: subcommand.into(),
            scenario_path: None,
            scenario: None,
            seed: None,
            distribution: None,
            iterations: None,
            replay_trace: None,
            bins: None,
            fixed_chunks: None,
            cost: None,
            outputs: Vec::new(),
            started_unix_ms: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis()),
            wall_clock_seconds: 0.0,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data") + "\n"
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| RunError::parse(path, e))?;
        if m.format != MANIFEST_VERSION {
            return Err(RunError::parse(path, format!("unsupported manifest format `{}`", m.format)));
        }
        Ok(m)
    }
}
