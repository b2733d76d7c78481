//! One-shot stateful injection: drive a fresh DUT to a chosen protocol state
//! with a recorded benign dialogue, inject a payload, and watch what follows.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordinator::TraceEvent;
use crate::dut::{wire, CrashKind, Joiner, Leader, MleState, NodeConfig, NodeRole, NodeType, StepOutcome, VulnId};
use crate::mle::{MessageType, SECURITY_HEADER_LEN};

/// Steps of benign dialogue captured per fixture.
pub const SCRIPT_STEPS: u32 = 40;
/// Script events replayed after the injection.
pub const OBSERVE_EVENTS: usize = 16;
/// Seed of the DUT that recorded the fixtures and replays them.
pub const SCRIPT_SEED: u64 = 0;

const FTD_SCRIPT: &str = include_str!("../fixtures/benign_ftd.script");
const MTD_SCRIPT: &str = include_str!("../fixtures/benign_mtd.script");

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HarnessError {
    #[error("corrupt fixture script at line {line}: {reason}")]
    CorruptFixture { line: usize, reason: String },
    #[error("harness input needs at least 2 bytes, got {0}")]
    ShortInput(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HarnessState {
    DetachedAfterParentRequest,
    DetachedAfterChildIdRequest,
    Child,
    ChildAfterChildUpdateRequest,
    ChildAfterAddressSolicit,
    Router,
}

impl HarnessState {
    pub const ALL: [HarnessState; 6] = [
        HarnessState::DetachedAfterParentRequest,
        HarnessState::DetachedAfterChildIdRequest,
        HarnessState::Child,
        HarnessState::ChildAfterChildUpdateRequest,
        HarnessState::ChildAfterAddressSolicit,
        HarnessState::Router,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn target(self) -> MleState {
        match self {
            HarnessState::DetachedAfterParentRequest => MleState::ParentRequestSent,
            HarnessState::DetachedAfterChildIdRequest => MleState::ChildIdRequestSent,
            HarnessState::Child => MleState::Child,
            HarnessState::ChildAfterChildUpdateRequest => MleState::ChildUpdateRequestSent,
            HarnessState::ChildAfterAddressSolicit => MleState::AddressSolicitSent,
            HarnessState::Router => MleState::Router,
        }
    }

    /// States a node of `node_type` can reach.
    pub fn valid_for(node_type: NodeType) -> &'static [HarnessState] {
        match node_type {
            NodeType::Ftd => &Self::ALL,
            NodeType::Mtd => &Self::ALL[..4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HarnessInput {
    pub dut_type: NodeType,
    pub state: HarnessState,
    pub payload: Vec<u8>,
}

impl HarnessInput {
    pub fn new(dut_type: NodeType, state: HarnessState, payload: Vec<u8>) -> Self {
        Self { dut_type, state, payload }
    }

    /// Decodes `[dut_type, state_code, payload..]`. Both leading bytes are
    /// reduced modulo their range, and MTD states past 3 wrap modulo 4.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, HarnessError> {
        let [t, s, payload @ ..] = bytes else { return Err(HarnessError::ShortInput(bytes.len())) };
        let dut_type = NodeType::from_byte(*t);
        let mut code = s % 6;
        if dut_type == NodeType::Mtd && code >= 4 {
            code %= 4;
        }
        let state = HarnessState::from_code(code).expect("code reduced below 6");
        Ok(Self { dut_type, state, payload: payload.to_vec() })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let t = match self.dut_type {
            NodeType::Mtd => 0,
            NodeType::Ftd => 1,
        };
        let mut out = vec![t, self.state.code()];
        out.extend_from_slice(&self.payload);
        out
    }
}

/// Serializable view of the injection outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HarnessOutcome {
    /// The DUT answered; responses are hex-encoded frames.
    Ok {
        responses: Vec<String>,
    },
    Silent,
    Crash {
        crash: CrashKind,
        vuln: VulnId,
    },
}

impl From<&StepOutcome> for HarnessOutcome {
    fn from(o: &StepOutcome) -> Self {
        match o {
            StepOutcome::Ok(ps) => HarnessOutcome::Ok { responses: ps.iter().map(|p| hex::encode(wire(p))).collect() },
            StepOutcome::Silent => HarnessOutcome::Silent,
            StepOutcome::Crash(crash, vuln) => HarnessOutcome::Crash { crash: *crash, vuln: *vuln },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HarnessResult {
    pub dut_type: NodeType,
    pub state: HarnessState,
    pub reached_state: bool,
    /// Set only when the state was reached. A crash during the observation
    /// window replaces the injection step's own outcome.
    pub outcome: Option<HarnessOutcome>,
    pub abort_reason: Option<String>,
    pub final_state: MleState,
}

impl HarnessResult {
    pub fn crash(&self) -> Option<VulnId> {
        match self.outcome {
            Some(HarnessOutcome::Crash { vuln, .. }) => Some(vuln),
            _ => None,
        }
    }
}

/// Frames a raw payload: security stub, then the message code, then the TLV
/// region as given. Undefined codes map into the code table by modulo.
pub fn wrap_with_mle_headers(payload: &[u8]) -> Vec<u8> {
    let code = match payload.first() {
        None => MessageType::Advertisement.code(),
        Some(&b) => MessageType::from_code(b).unwrap_or(MessageType::ALL[b as usize % MessageType::ALL.len()]).code(),
    };
    let mut out = vec![0u8; SECURITY_HEADER_LEN];
    out.push(code);
    out.extend_from_slice(payload.get(1..).unwrap_or_default());
    out
}

fn node_config(node_type: NodeType, sanitizer: bool) -> NodeConfig {
    let target = match node_type {
        NodeType::Ftd => NodeRole::Router,
        NodeType::Mtd => NodeRole::Child,
    };
    NodeConfig::new(node_type, target, sanitizer).with_seed(SCRIPT_SEED)
}

/// Records the benign dialogue a fresh DUT sees from the leader.
pub fn capture_benign_script(node_type: NodeType, steps: u32) -> Vec<TraceEvent> {
    let mut dut = Joiner::new(node_config(node_type, true));
    let mut leader = Leader::new();
    let mut events = Vec::new();
    for _ in 0..steps {
        events.push(TraceEvent::Tick);
        for p in dut.tick() {
            leader.receive(&p);
        }
        leader.tick();
        while let Some(p) = leader.generate_next() {
            let bytes = wire(&p);
            if let StepOutcome::Ok(out) = dut.step_bytes(&bytes).expect("benign dialogue never crashes") {
                out.iter().for_each(|r| leader.receive(r));
            }
            events.push(TraceEvent::Packet { bytes });
        }
    }
    events
}

/// One event per line: `tick`, or the hex bytes of a delivered packet.
pub fn format_script(events: &[TraceEvent]) -> String {
    events
        .iter()
        .map(|e| match e {
            TraceEvent::Tick => "tick\n".to_string(),
            TraceEvent::Packet { bytes } => format!("{}\n", hex::encode(bytes)),
        })
        .collect()
}

pub fn parse_script(text: &str) -> Result<Vec<TraceEvent>, HarnessError> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(line, l)| match l {
            "tick" => Ok(TraceEvent::Tick),
            _ => hex::decode(l)
                .map(|bytes| TraceEvent::Packet { bytes })
                .map_err(|e| HarnessError::CorruptFixture { line, reason: e.to_string() }),
        })
        .collect()
}

/// The committed benign script for `node_type`.
pub fn benign_script(node_type: NodeType) -> Result<&'static [TraceEvent], HarnessError> {
    static FTD: OnceLock<Result<Vec<TraceEvent>, HarnessError>> = OnceLock::new();
    static MTD: OnceLock<Result<Vec<TraceEvent>, HarnessError>> = OnceLock::new();
    let (cell, text) = match node_type {
        NodeType::Ftd => (&FTD, FTD_SCRIPT),
        NodeType::Mtd => (&MTD, MTD_SCRIPT),
    };
    cell.get_or_init(|| parse_script(text)).as_ref().map(Vec::as_slice).map_err(Clone::clone)
}

fn deliver(dut: &mut Joiner, e: &TraceEvent) -> Option<StepOutcome> {
    match e {
        TraceEvent::Tick => {
            dut.tick();
            None
        }
        TraceEvent::Packet { bytes } => dut.step_bytes(bytes).ok(),
    }
}

fn abort_reason(state: HarnessState) -> &'static str {
    match state.target().role() {
        NodeRole::Router => "not a Router",
        NodeRole::Child => "not a child",
        _ => "target state not reached",
    }
}

pub fn harness_execute(input: &HarnessInput, sanitizer: bool) -> Result<HarnessResult, HarnessError> {
    execute_script(input, sanitizer, benign_script(input.dut_type)?)
}

/// Runs `input` against an explicit benign script.
pub fn execute_script(
    input: &HarnessInput,
    sanitizer: bool,
    script: &[TraceEvent],
) -> Result<HarnessResult, HarnessError> {
    let mut dut = Joiner::new(node_config(input.dut_type, sanitizer));
    let target = input.state.target();
    let result = |dut: &Joiner, reached, outcome, abort: Option<String>| HarnessResult {
        dut_type: input.dut_type,
        state: input.state,
        reached_state: reached,
        outcome,
        abort_reason: abort,
        final_state: dut.state(),
    };

    let mut cursor = 0;
    while dut.state() != target {
        let Some(e) = script.get(cursor) else {
            return Ok(result(&dut, false, None, Some(abort_reason(input.state).into())));
        };
        cursor += 1;
        if let Some(StepOutcome::Crash(_, v)) = deliver(&mut dut, e) {
            return Ok(result(&dut, false, None, Some(format!("crashed before injection: {v}"))));
        }
    }

    let injected = dut.step_bytes(&wrap_with_mle_headers(&input.payload)).expect("fresh DUT has not crashed");
    let mut outcome = HarnessOutcome::from(&injected);
    if injected.crash().is_none() {
        for e in script.iter().skip(cursor).take(OBSERVE_EVENTS) {
            if let Some(o @ StepOutcome::Crash(..)) = deliver(&mut dut, e) {
                outcome = HarnessOutcome::from(&o);
                break;
            }
        }
    }
    Ok(result(&dut, true, Some(outcome), None))
}
