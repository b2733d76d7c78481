//! Simulated mesh nodes: the device under test and the benign leader that
//! generates traffic for it.

pub mod edges;
mod joiner;
mod leader;
pub mod proto;
#[cfg(test)]
mod tests;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coverage::CoverageMap;
use crate::mle::{encode_packet, MlePacket};

pub use joiner::{family_coverage, joiner_edge_count, Joiner};
pub use leader::{leader_edge_count, Leader};

/// Default chance that an FTD keeps leader data after an attach.
pub const DEFAULT_LEADER_DATA_PROBABILITY: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeType {
    Mtd,
    Ftd,
}

impl NodeType {
    pub fn from_byte(b: u8) -> Self {
        if b.is_multiple_of(2) {
            NodeType::Mtd
        } else {
            NodeType::Ftd
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    Detached,
    Child,
    Router,
    Leader,
}

/// Protocol state of a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MleState {
    Detached,
    ParentRequestSent,
    ChildIdRequestSent,
    Child,
    ChildUpdateRequestSent,
    AddressSolicitSent,
    Router,
    Leader,
}

impl MleState {
    pub const JOINER_STATES: [MleState; 7] = [
        MleState::Detached,
        MleState::ParentRequestSent,
        MleState::ChildIdRequestSent,
        MleState::Child,
        MleState::ChildUpdateRequestSent,
        MleState::AddressSolicitSent,
        MleState::Router,
    ];

    pub fn index(self) -> u32 {
        self as u32
    }

    pub fn role(self) -> NodeRole {
        match self {
            MleState::Detached | MleState::ParentRequestSent | MleState::ChildIdRequestSent => NodeRole::Detached,
            MleState::Child | MleState::ChildUpdateRequestSent | MleState::AddressSolicitSent => NodeRole::Child,
            MleState::Router => NodeRole::Router,
            MleState::Leader => NodeRole::Leader,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VulnId {
    V1,
    V2,
    V3,
    V4,
    V5,
    V6,
}

impl VulnId {
    pub const ALL: [VulnId; 6] = [VulnId::V1, VulnId::V2, VulnId::V3, VulnId::V4, VulnId::V5, VulnId::V6];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        ["V1", "V2", "V3", "V4", "V5", "V6"][self.index()]
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name().eq_ignore_ascii_case(s))
    }

    /// Crash signature the vulnerability produces.
    pub fn kind(self) -> CrashKind {
        match self {
            VulnId::V2 | VulnId::V6 => CrashKind::BufferOverflowDetected,
            _ => CrashKind::AssertionFailure,
        }
    }
}

impl std::fmt::Display for VulnId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrashKind {
    AssertionFailure,
    BufferOverflowDetected,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepOutcome {
    Ok(Vec<MlePacket>),
    Crash(CrashKind, VulnId),
    Silent,
}

impl StepOutcome {
    pub fn crash(&self) -> Option<(CrashKind, VulnId)> {
        match self {
            StepOutcome::Crash(k, v) => Some((*k, *v)),
            _ => None,
        }
    }

    pub fn responses(&self) -> &[MlePacket] {
        match self {
            StepOutcome::Ok(p) => p,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("node has crashed and must be restarted")]
    Crashed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeConfig {
    pub node_type: NodeType,
    /// Highest role the node tries to reach.
    pub role_target: NodeRole,
    pub sanitizer: bool,
    pub leader_data_probability: f64,
    pub seed: u64,
}

impl NodeConfig {
    pub fn new(node_type: NodeType, role_target: NodeRole, sanitizer: bool) -> Self {
        Self { node_type, role_target, sanitizer, leader_data_probability: DEFAULT_LEADER_DATA_PROBABILITY, seed: 0 }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// A simulated node: either a joiner under test or the traffic-generating leader.
#[derive(Debug, Clone)]
pub enum SimNode {
    Joiner(Box<Joiner>),
    Leader(Box<Leader>),
}

pub fn create_node(node_type: NodeType, role_target: NodeRole, sanitizer: bool) -> SimNode {
    SimNode::new(NodeConfig::new(node_type, role_target, sanitizer))
}

impl SimNode {
    pub fn new(cfg: NodeConfig) -> Self {
        if cfg.role_target == NodeRole::Leader {
            SimNode::Leader(Box::default())
        } else {
            SimNode::Joiner(Box::new(Joiner::new(cfg)))
        }
    }

    pub fn leader() -> Self {
        SimNode::Leader(Box::default())
    }

    pub fn role(&self) -> NodeRole {
        self.state().role()
    }

    pub fn state(&self) -> MleState {
        match self {
            SimNode::Joiner(j) => j.state(),
            SimNode::Leader(_) => MleState::Leader,
        }
    }

    pub fn step(&mut self, incoming: &MlePacket) -> Result<StepOutcome, SimError> {
        match self {
            SimNode::Joiner(j) => j.step(incoming),
            SimNode::Leader(l) => {
                l.receive(incoming);
                Ok(StepOutcome::Silent)
            }
        }
    }

    pub fn step_bytes(&mut self, bytes: &[u8]) -> Result<StepOutcome, SimError> {
        match self {
            SimNode::Joiner(j) => j.step_bytes(bytes),
            SimNode::Leader(l) => {
                l.receive_bytes(bytes);
                Ok(StepOutcome::Silent)
            }
        }
    }

    /// Advances virtual time by one step and returns spontaneous packets.
    pub fn tick(&mut self) -> Vec<MlePacket> {
        match self {
            SimNode::Joiner(j) => j.tick(),
            SimNode::Leader(l) => {
                l.tick();
                Vec::new()
            }
        }
    }

    pub fn generate_next(&mut self) -> Option<MlePacket> {
        match self {
            SimNode::Leader(l) => l.generate_next(),
            SimNode::Joiner(_) => None,
        }
    }

    pub fn soft_reset(&mut self) {
        match self {
            SimNode::Joiner(j) => j.soft_reset(),
            SimNode::Leader(l) => l.reset(),
        }
    }

    pub fn hard_reset(&mut self) {
        match self {
            SimNode::Joiner(j) => j.hard_reset(),
            SimNode::Leader(l) => l.reset(),
        }
    }

    pub fn read_reboot_count(&mut self) -> u64 {
        match self {
            SimNode::Joiner(j) => j.read_reboot_count(),
            SimNode::Leader(_) => 0,
        }
    }

    pub fn coverage(&self) -> &CoverageMap {
        match self {
            SimNode::Joiner(j) => j.coverage(),
            SimNode::Leader(l) => l.coverage(),
        }
    }

    pub fn coverage_mut(&mut self) -> &mut CoverageMap {
        match self {
            SimNode::Joiner(j) => j.coverage_mut(),
            SimNode::Leader(l) => l.coverage_mut(),
        }
    }
}

/// Encodes a packet for delivery; packets built by the simulator always encode.
pub(crate) fn wire(p: &MlePacket) -> Vec<u8> {
    encode_packet(p).unwrap_or_default()
}
