//! Mutation engines and their composition into chains.

mod inserter;
mod probability;
mod random;

pub use inserter::{pool_harvest, tlv_insert, PooledTlv, TlvPool, DEFAULT_INSERT_PROBABILITY, DEFAULT_POOL_CAPACITY};
pub use probability::{
    apply_gain, clamp_probability, feedback_gain, gamma_warmup, init_probabilities, initial_probability,
    update_probabilities, ProbabilityTable, P_MAX, P_MIN,
};
pub use random::{draw_value, random_fuzz};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dissector::{dissect, read_field, write_field_in_place};
use crate::mle::{MessageType, MlePacket};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("a chain may hold at most one coverage-based engine")]
    MultipleCoverageEngines,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldMutation {
    /// Message code of the packet at the time of the write.
    pub message: u8,
    pub path: String,
    pub bit_width: u32,
    pub old: u64,
    pub new: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsertionRecord {
    pub path: Vec<usize>,
    pub tlv_type: u8,
    pub encoded_len: usize,
    pub lengths_fixed: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutationLog {
    pub iteration: u64,
    pub mutations: Vec<FieldMutation>,
    pub insertions: Vec<InsertionRecord>,
}

impl MutationLog {
    pub fn new(iteration: u64) -> Self {
        Self { iteration, ..Self::default() }
    }

    /// Number of mutated fields.
    pub fn n_i(&self) -> usize {
        self.mutations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mutations.is_empty() && self.insertions.is_empty()
    }

    pub fn append(&mut self, other: MutationLog) {
        self.mutations.extend(other.mutations);
        self.insertions.extend(other.insertions);
    }
}

fn default_k() -> f64 {
    2.0
}
fn default_beta() -> f64 {
    3.0
}
fn default_warm_i() -> u64 {
    2000
}
fn default_true() -> bool {
    true
}
fn default_gamma() -> f64 {
    1.0
}
fn default_q() -> f64 {
    DEFAULT_INSERT_PROBABILITY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageParams {
    #[serde(default = "default_k")]
    pub k: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_warm_i")]
    pub warm_i: u64,
    /// When false the table is never updated after initialization.
    #[serde(default = "default_true")]
    pub adapt: bool,
}

impl Default for CoverageParams {
    fn default() -> Self {
        Self { k: default_k(), beta: default_beta(), warm_i: default_warm_i(), adapt: true }
    }
}

/// One stage of a fuzzer chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EngineConfig {
    Random {
        #[serde(default = "default_k")]
        k: f64,
    },
    CoverageGrey(CoverageParams),
    CoverageBlack(CoverageParams),
    TlvInserter {
        #[serde(default = "default_gamma")]
        gamma: f64,
        #[serde(default = "default_q")]
        q: f64,
    },
    /// Deterministic write of one field; at most `times` packets per iteration when set.
    SetField {
        message: MessageType,
        path: String,
        value: u64,
        #[serde(default)]
        times: Option<u32>,
    },
}

impl EngineConfig {
    pub fn coverage_params(&self) -> Option<&CoverageParams> {
        match self {
            EngineConfig::CoverageGrey(p) | EngineConfig::CoverageBlack(p) => Some(p),
            _ => None,
        }
    }

    fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::InvalidHyperparameter(m.to_string()));
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        match self {
            EngineConfig::Random { k } if !(*k >= 0.0 && k.is_finite()) => bad("k must be non-negative"),
            EngineConfig::CoverageGrey(p) | EngineConfig::CoverageBlack(p) => {
                ProbabilityTable::new(p.k, p.beta, p.warm_i).map(|_| ())
            }
            EngineConfig::TlvInserter { gamma, q } if !unit(*gamma) || !unit(*q) => {
                bad("gamma and q must lie in [0, 1]")
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FuzzerChain {
    pub engines: Vec<EngineConfig>,
}

impl FuzzerChain {
    pub fn new(engines: Vec<EngineConfig>) -> Result<Self, EngineError> {
        let chain = Self { engines };
        chain.validate()?;
        Ok(chain)
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.engines.iter().filter(|e| e.coverage_params().is_some()).count() > 1 {
            return Err(EngineError::MultipleCoverageEngines);
        }
        self.engines.iter().try_for_each(EngineConfig::validate)
    }

    pub fn is_empty(&self) -> bool {
        self.engines.is_empty()
    }

    pub fn coverage_engine(&self) -> Option<&EngineConfig> {
        self.engines.iter().find(|e| e.coverage_params().is_some())
    }
}

/// Mutable state a chain carries across packets and iterations.
#[derive(Debug, Clone)]
pub struct ChainState {
    table: Option<ProbabilityTable>,
    adapt: bool,
    pool: TlvPool,
    iteration: u64,
    coverage_log: MutationLog,
    set_field_uses: Vec<u32>,
}

impl ChainState {
    pub fn new(chain: &FuzzerChain) -> Result<Self, EngineError> {
        chain.validate()?;
        let (table, adapt) = match chain.coverage_engine().and_then(EngineConfig::coverage_params) {
            Some(p) => (Some(ProbabilityTable::new(p.k, p.beta, p.warm_i)?), p.adapt),
            None => (None, false),
        };
        Ok(Self {
            table,
            adapt,
            pool: TlvPool::default(),
            iteration: 0,
            coverage_log: MutationLog::new(0),
            set_field_uses: vec![0; chain.engines.len()],
        })
    }

    pub fn begin_iteration(&mut self, i: u64) {
        self.iteration = i;
        self.coverage_log = MutationLog::new(i);
        self.set_field_uses.iter_mut().for_each(|u| *u = 0);
    }

    /// Feeds the iteration's new-coverage count back into the probability table.
    pub fn end_iteration(&mut self, c_i: u64) -> Result<(), EngineError> {
        if let (Some(table), true) = (self.table.as_mut(), self.adapt) {
            table.update(&self.coverage_log, c_i, self.iteration)?;
        }
        Ok(())
    }

    pub fn table(&self) -> Option<&ProbabilityTable> {
        self.table.as_ref()
    }

    pub fn pool(&self) -> &TlvPool {
        &self.pool
    }

    /// Mutations made by the coverage-based engine in the current iteration.
    pub fn coverage_log(&self) -> &MutationLog {
        &self.coverage_log
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }
}

/// Runs every engine of `chain` in order over `packet`.
pub fn chain_apply<R: Rng + ?Sized>(
    chain: &FuzzerChain,
    state: &mut ChainState,
    packet: &MlePacket,
    rng: &mut R,
) -> (MlePacket, MutationLog) {
    let mut log = MutationLog::new(state.iteration);
    if chain.is_empty() {
        return (packet.clone(), log);
    }
    let mut current = packet.clone();
    let mut d = dissect(&current);
    let mut harvested = false;
    for (idx, engine) in chain.engines.iter().enumerate() {
        match engine {
            EngineConfig::Random { k } => {
                let probs = vec![initial_probability(*k, d.field_count()); d.field_count()];
                let (next, l) = random_fuzz(&current, &d, &probs, rng);
                current = next;
                log.append(l);
            }
            EngineConfig::CoverageGrey(_) | EngineConfig::CoverageBlack(_) => {
                let Some(table) = state.table.as_mut() else { continue };
                let probs = table.probabilities_for(current.message_type, &d);
                let (next, l) = random_fuzz(&current, &d, &probs, rng);
                current = next;
                state.coverage_log.mutations.extend(l.mutations.iter().cloned());
                log.append(l);
            }
            EngineConfig::TlvInserter { gamma, q } => {
                if !harvested {
                    state.pool.harvest(packet);
                    harvested = true;
                }
                let (next, l) = tlv_insert(&current, &state.pool, *gamma, *q, rng);
                if !l.insertions.is_empty() {
                    current = next;
                    d = dissect(&current);
                }
                log.append(l);
            }
            EngineConfig::SetField { message, path, value, times } => {
                if current.message_type != message.code() {
                    continue;
                }
                if times.is_some_and(|t| state.set_field_uses[idx] >= t) {
                    continue;
                }
                let Some(field) = d.find(path) else { continue };
                let Ok(old) = read_field(&current, field) else { continue };
                if write_field_in_place(&mut current, field, *value).is_ok() {
                    state.set_field_uses[idx] += 1;
                    log.mutations.push(FieldMutation {
                        message: current.message_type,
                        path: path.clone(),
                        bit_width: field.bit_width,
                        old,
                        new: *value,
                    });
                }
            }
        }
    }
    (current, log)
}
