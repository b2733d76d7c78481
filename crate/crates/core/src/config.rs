//! Campaign configuration and its TOML representation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coverage::CoverageSource;
use crate::dut::{NodeConfig, NodeRole, NodeType, DEFAULT_LEADER_DATA_PROBABILITY};
use crate::engines::{EngineConfig, EngineError, FuzzerChain};

pub const DEFAULT_BUDGET: u32 = 40;
pub const DEFAULT_EPOCH_SIZE: u32 = 4;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid fuzzer chain: {0}")]
    Chain(#[from] EngineError),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Simulated,
    PhysicalEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DutConfig {
    #[serde(rename = "type")]
    pub node_type: NodeType,
    #[serde(default = "default_true")]
    pub sanitizer: bool,
    #[serde(default = "default_leader_data_probability")]
    pub leader_data_probability: f64,
}

impl Default for DutConfig {
    fn default() -> Self {
        Self { node_type: NodeType::Ftd, sanitizer: true, leader_data_probability: DEFAULT_LEADER_DATA_PROBABILITY }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverageConfig {
    pub source: CoverageSource,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        Self { source: CoverageSource::DutGrey }
    }
}

fn default_true() -> bool {
    true
}
fn default_leader_data_probability() -> f64 {
    DEFAULT_LEADER_DATA_PROBABILITY
}
fn default_seed() -> u64 {
    1
}
fn default_iterations() -> u64 {
    1000
}
fn default_budget() -> u32 {
    DEFAULT_BUDGET
}
fn default_epoch_size() -> u32 {
    DEFAULT_EPOCH_SIZE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_iterations")]
    pub iterations: u64,
    /// Simulated steps per iteration.
    #[serde(default = "default_budget")]
    pub budget: u32,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_epoch_size")]
    pub epoch_size: u32,
    #[serde(default)]
    pub dut: DutConfig,
    #[serde(default)]
    pub coverage: CoverageConfig,
    #[serde(default)]
    pub fuzzers: FuzzerChain,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            seed: default_seed(),
            iterations: default_iterations(),
            budget: DEFAULT_BUDGET,
            mode: Mode::Simulated,
            epoch_size: DEFAULT_EPOCH_SIZE,
            dut: DutConfig::default(),
            coverage: CoverageConfig::default(),
            fuzzers: FuzzerChain::default(),
        }
    }
}

impl CampaignConfig {
    pub fn new(node_type: NodeType, fuzzers: Vec<EngineConfig>) -> Self {
        Self {
            dut: DutConfig { node_type, ..DutConfig::default() },
            fuzzers: FuzzerChain { engines: fuzzers },
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.iterations < 1 {
            return Err(ConfigError::Invalid("iterations must be at least 1".into()));
        }
        if self.mode == Mode::PhysicalEpoch && self.epoch_size < 1 {
            return Err(ConfigError::Invalid("epoch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.dut.leader_data_probability) {
            return Err(ConfigError::Invalid("leader_data_probability must lie in [0, 1]".into()));
        }
        self.fuzzers.validate()?;
        Ok(())
    }

    /// Coverage channel actually used; physical mode has no DUT map.
    pub fn effective_source(&self) -> CoverageSource {
        match self.mode {
            Mode::Simulated => self.coverage.source,
            Mode::PhysicalEpoch => CoverageSource::GeneratorBlack,
        }
    }

    pub fn node_config(&self, seed: u64) -> NodeConfig {
        let target = match self.dut.node_type {
            NodeType::Ftd => NodeRole::Router,
            NodeType::Mtd => NodeRole::Child,
        };
        NodeConfig {
            node_type: self.dut.node_type,
            role_target: target,
            sanitizer: self.dut.sanitizer,
            leader_data_probability: self.dut.leader_data_probability,
            seed,
        }
    }
}
