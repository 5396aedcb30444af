//! TOML run configuration: strict parsing (unknown keys are errors), a
//! schema version gate, and validation that rejects inconsistent values
//! before any search state is built.

use crate::CliError;
use coex_core::eval::SurrogateParams;
use coex_core::model::{FpgaPool, FpgaSpec, PoolEntry, SearchSpace};
use coex_core::perf::PerfModelParams;
use coex_core::search::SearchConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// The config schema this binary understands.
pub const SCHEMA_VERSION: u32 = 1;

fn default_checkpoint_every() -> usize {
    25
}

fn default_timeout_secs() -> f64 {
    86_400.0
}

fn default_macs_per_dsp() -> u64 {
    1
}

/// Top-level run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub search_space: SearchSpace,
    pub pool: PoolConfig,
    #[serde(default)]
    pub perf_model: PerfModelParams,
    #[serde(default)]
    pub evaluator: EvaluatorConfig,
    pub search: SearchConfig,
    /// Write a checkpoint every this many episodes; 0 disables periodic
    /// checkpoints (one is still written when a run stops early).
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    pub devices: Vec<DeviceConfig>,
}

/// One device model in the pool. Mirrors the engine's device sheet plus
/// the unit count, spelled out so unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceConfig {
    pub name: String,
    pub logic_cells: u64,
    pub onchip_memory_bits: u64,
    pub dsp_slices: u64,
    pub clock_hz: f64,
    pub link_bytes_per_sec: f64,
    #[serde(default = "default_macs_per_dsp")]
    pub macs_per_dsp_per_cycle: u64,
    pub count: u32,
}

impl DeviceConfig {
    fn to_entry(&self) -> PoolEntry {
        PoolEntry {
            spec: FpgaSpec {
                name: self.name.clone(),
                logic_cells: self.logic_cells,
                onchip_memory_bits: self.onchip_memory_bits,
                dsp_slices: self.dsp_slices,
                clock_hz: self.clock_hz,
                link_bytes_per_sec: self.link_bytes_per_sec,
                macs_per_dsp_per_cycle: self.macs_per_dsp_per_cycle,
            },
            count: self.count,
        }
    }
}

/// Accuracy source selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum EvaluatorConfig {
    /// Analytic surrogate, optionally noisy, optionally cached on disk.
    Surrogate {
        #[serde(default)]
        params: SurrogateParams,
        #[serde(default)]
        cache_path: Option<PathBuf>,
    },
    /// External process speaking the JSON-lines protocol on stdio.
    External {
        command: String,
        #[serde(default)]
        args: Vec<String>,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: f64,
        #[serde(default)]
        cache_path: Option<PathBuf>,
    },
    /// Serve accuracies from a cache file only; misses are errors.
    CacheOnly { cache_path: PathBuf },
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        EvaluatorConfig::Surrogate {
            params: SurrogateParams::default(),
            cache_path: None,
        }
    }
}

impl EvaluatorConfig {
    pub fn cache_path(&self) -> Option<&Path> {
        match self {
            EvaluatorConfig::Surrogate { cache_path, .. }
            | EvaluatorConfig::External { cache_path, .. } => cache_path.as_deref(),
            EvaluatorConfig::CacheOnly { cache_path } => Some(cache_path),
        }
    }
}

impl RunConfig {
    /// Parse a TOML config file strictly.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Cross-field validation. Call after any command-line overrides.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.search_space
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        let pool = self.build_pool();
        pool.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.search.validate().map_err(CliError::Config)?;
        if !(self.perf_model.stage_overhead_sec >= 0.0
            && self.perf_model.stage_overhead_sec.is_finite())
        {
            return Err(CliError::Config(format!(
                "stage_overhead_sec {} must be nonnegative and finite",
                self.perf_model.stage_overhead_sec
            )));
        }
        match &self.evaluator {
            EvaluatorConfig::Surrogate { params, .. } => {
                params.validate().map_err(CliError::Config)?;
            }
            EvaluatorConfig::External { command, timeout_secs, .. } => {
                if command.is_empty() {
                    return Err(CliError::Config("evaluator command is empty".into()));
                }
                if !(*timeout_secs > 0.0 && timeout_secs.is_finite()) {
                    return Err(CliError::Config(format!(
                        "timeout_secs {timeout_secs} must be positive and finite"
                    )));
                }
            }
            EvaluatorConfig::CacheOnly { .. } => {}
        }
        Ok(())
    }

    pub fn build_pool(&self) -> FpgaPool {
        FpgaPool::new(self.pool.devices.iter().map(DeviceConfig::to_entry).collect())
    }
}
