//! Scenario files (TOML).
//!
//! ```toml
//! [model]       # architecture, long names or the usual short symbols
//! [parallel]    # t, p, c, e, d, l, v, b, g_bs, r_pp, recompute_mode
//! [hardware]    # D_t, byte widths, M_GPU, alpha
//! [cost]        # optional throughput model parameters
//! [planner]     # optional: bins, fixed_chunks
//! ```
//!
//! Unknown keys are reported as warnings, not errors.

use std::path::{Path, PathBuf};

use log::warn;
use memfine_core::config::{ModelConfig, ParallelEnv, PrecisionAndHardware};
use memfine_core::mact::Bins;
use memfine_core::throughput::CostParams;
use memfine_core::{validate, Scenario, ValidatedScenario};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RunError};

/// Directory searched for scenario names that are not paths.
pub const SCENARIO_DIR_ENV: &str = "MEMFINE_SCENARIO_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    #[serde(default)]
    pub bins: Bins,
    #[serde(default = "default_fixed_chunks")]
    pub fixed_chunks: u64,
}

fn default_fixed_chunks() -> u64 {
    8
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self { bins: Bins::default(), fixed_chunks: default_fixed_chunks() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub model: ModelConfig,
    pub parallel: ParallelEnv,
    pub hardware: PrecisionAndHardware,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planner: Option<PlannerConfig>,
}

impl ScenarioFile {
    pub fn scenario(&self) -> Scenario {
        Scenario { model: self.model.clone(), parallel: self.parallel.clone(), hardware: self.hardware.clone() }
    }
}

#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub path: PathBuf,
    pub file: ScenarioFile,
    pub scenario: ValidatedScenario,
    /// Dotted paths of ignored keys.
    pub unknown_keys: Vec<String>,
}

impl LoadedScenario {
    pub fn cost(&self) -> CostParams {
        self.file.cost.unwrap_or_default()
    }

    pub fn planner(&self) -> PlannerConfig {
        self.file.planner.clone().unwrap_or_default()
    }
}

/// Resolve a `--scenario` argument: an existing path wins, then
/// `$MEMFINE_SCENARIO_DIR/<name>` with `.toml` appended when missing.
pub fn resolve(arg: &str) -> PathBuf {
    let direct = PathBuf::from(arg);
    if direct.exists() {
        return direct;
    }
    if let Some(dir) = std::env::var_os(SCENARIO_DIR_ENV) {
        let mut p = Path::new(&dir).join(arg);
        if p.extension().is_none() {
            p.set_extension("toml");
        }
        return p;
    }
    direct
}

/// Parse scenario text; unknown keys are collected, not rejected.
pub fn parse(text: &str) -> std::result::Result<(ScenarioFile, Vec<String>), toml::de::Error> {
    let de = toml::Deserializer::parse(text)?;
    let mut unknown = Vec::new();
    let file = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))?;
    Ok((file, unknown))
}

pub fn from_str(text: &str, path: &Path) -> Result<LoadedScenario> {
    let (file, unknown_keys) = parse(text).map_err(|e| RunError::parse(path, e))?;
    for key in &unknown_keys {
        warn!("{}: ignoring unknown key `{key}`", path.display());
    }
    let scenario = validate(file.scenario())?;
    if let Some(cost) = &file.cost {
        cost.validate()?;
    }
    if let Some(pl) = &file.planner {
        if pl.fixed_chunks == 0 {
            return Err(RunError::Config("planner.fixed_chunks must be at least 1".into()));
        }
    }
    Ok(LoadedScenario { path: path.to_path_buf(), file, scenario, unknown_keys })
}

pub fn load(path: &Path) -> Result<LoadedScenario> {
    let text = std::fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
    from_str(&text, path)
}

pub fn to_toml(file: &ScenarioFile) -> Result<String> {
    toml::to_string(file).map_err(|e| RunError::Config(format!("cannot serialise scenario: {e}")))
}
