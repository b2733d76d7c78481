use std::collections::HashMap;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::edges::{Allocator, Family};
use super::proto::{self, LeaderInfo};
use super::{wire, CrashKind, MleState, NodeConfig, NodeRole, NodeType, SimError, StepOutcome, VulnId};
use crate::coverage::CoverageMap;
use crate::dissector::dissect;
use crate::mle::{
    decode_packet, tlv_type as t, MessageType, MlePacket, RawTlv, RawTlvIter, TlvPayload, TlvTypeRegistry,
    MIN_PACKET_LEN,
};

const RETRANSMIT_TICKS: u32 = 3;
const SOLICIT_RETRANSMIT_TICKS: u32 = 4;
const MAX_RETRIES: u32 = 3;
const KEEPALIVE_FIRST: u32 = 2;
const KEEPALIVE_PERIOD: u32 = 6;
const SOLICIT_DELAY: u32 = 3;
const ADVERTISE_PERIOD: u32 = 5;
const SYNC_ADVERTISEMENTS: u32 = 2;
/// Field slots instrumented per message once synchronized.
const VALUE_CLASSES: u32 = 12;

/// Number of TLV kinds tracked: every registered type plus "unknown".
const KINDS: u32 = 15;

fn kind(code: u8) -> u32 {
    TlvTypeRegistry::standard().index_of(code).map_or(KINDS - 1, |i| i as u32)
}

#[derive(Debug, Clone, Copy)]
#[repr(u32)]
enum Reject {
    WrongState,
    Truncated,
    MissingSource,
    UnknownSource,
    MissingLeaderData,
    ShortTlv,
    PartitionMismatch,
    MissingResponse,
    ResponseMismatch,
    MissingChallenge,
    MissingAddress16,
    BadAddress16,
    MissingNetworkData,
    MissingStatus,
    StatusFailure,
    MissingTimeout,
    BadVersion,
    MissingRoute,
    StaleData,
    Unsolicited,
    NotForRole,
    LowMargin,
    NoLeader,
    Count,
}

#[derive(Debug, Clone, Copy)]
#[repr(u32)]
enum Timer {
    ParentRequestTx,
    ParentRequestRetx,
    ChildIdRetx,
    ChildIdGiveUp,
    KeepaliveTx,
    KeepaliveRetx,
    KeepaliveGiveUp,
    DataRequestTx,
    SolicitTx,
    SolicitRetx,
    SolicitGiveUp,
    LinkRequestTx,
    LinkRequestRetx,
    AdvertiseTx,
    Count,
}

#[derive(Debug, Clone, Copy)]
#[repr(u32)]
enum Guard {
    PrefixInChildId,
    PrefixLengthHigh,
    PrefixLengthMax,
    PrefixContent32,
    ForeignTlvInChildId,
    ServerShort,
    ServerLengthOne,
    ServerHighByteMatch,
    NetworkDataOverrun,
    NetworkDataMax,
    LeaderDataHeld,
    TimeoutHuge,
    TimeoutMaxIgnored,
    SolicitArmed,
    ArmedSolicitFailed,
    LeaderIdMaxOutsideWindow,
    Count,
}

struct Edges {
    dispatch: Family,
    malformed: Family,
    tlv_shape: Family,
    nested_shape: Family,
    duplicate: Family,
    unexpected: Family,
    tlv_count: Family,
    reject: Family,
    transition: Family,
    timer: Family,
    partition: Family,
    leader_id: Family,
    route: Family,
    prefix: Family,
    server: Family,
    timeout: Family,
    address: Family,
    status: Family,
    margin: Family,
    version: Family,
    mode: Family,
    challenge: Family,
    guard: Family,
    overflow: Family,
    reboot_read: Family,
    sync: Family,
    synced_field: Family,
    total: u32,
}

/// Field slots of the benign advertisement and data response, by path.
fn synced_templates() -> &'static HashMap<(u8, String), u32> {
    static SLOTS: OnceLock<HashMap<(u8, String), u32>> = OnceLock::new();
    SLOTS.get_or_init(|| {
        let mut slots = HashMap::new();
        for p in [proto::leader_advertisement(&[proto::LEADER_ROUTER_ID]), proto::data_response()] {
            for f in dissect(&p).fields {
                let next = slots.len() as u32;
                slots.insert((p.message_type, f.path), next);
            }
        }
        slots
    })
}

/// Boundary values get their own class; the rest are bucketed by their top three bits.
fn value_class(v: u64, bit_width: u32) -> u32 {
    let max = if bit_width >= 64 { u64::MAX } else { (1u64 << bit_width) - 1 };
    match v {
        0 => 0,
        1 => 1,
        x if x == max => 2,
        x if x == max - 1 => 3,
        x => 4 + (x >> (bit_width - 3)) as u32,
    }
}

fn edges() -> &'static Edges {
    static EDGES: OnceLock<Edges> = OnceLock::new();
    EDGES.get_or_init(|| {
        let mut a = Allocator::default();
        let e = Edges {
            dispatch: a.family(&[7, 3]),
            malformed: a.family(&[4]),
            tlv_shape: a.family(&[KINDS, 4]),
            nested_shape: a.family(&[KINDS]),
            duplicate: a.family(&[KINDS]),
            unexpected: a.family(&[KINDS]),
            tlv_count: a.family(&[4]),
            reject: a.family(&[Reject::Count as u32]),
            transition: a.family(&[7, 7]),
            timer: a.family(&[Timer::Count as u32]),
            partition: a.family(&[3, 4]),
            leader_id: a.family(&[4, 3]),
            route: a.family(&[3, 5]),
            prefix: a.family(&[6, 6]),
            server: a.family(&[5, 3]),
            timeout: a.family(&[6, 4]),
            address: a.family(&[3, 5]),
            status: a.family(&[3]),
            margin: a.family(&[4]),
            version: a.family(&[4]),
            mode: a.family(&[4]),
            challenge: a.family(&[3]),
            guard: a.family(&[Guard::Count as u32]),
            overflow: a.family(&[2]),
            reboot_read: a.family(&[1]),
            sync: a.family(&[3]),
            synced_field: a.family(&[synced_templates().len() as u32, VALUE_CLASSES]),
            total: 0,
        };
        Edges { total: a.total(), ..e }
    })
}

/// Number of edges the joiner can record.
pub fn joiner_edge_count() -> u32 {
    edges().total
}

/// Covered and total edges per family, in allocation order.
pub fn family_coverage(map: &CoverageMap) -> Vec<(&'static str, u32, u32)> {
    let e = edges();
    let fams: [(&'static str, Family); 27] = [
        ("dispatch", e.dispatch),
        ("malformed", e.malformed),
        ("tlv_shape", e.tlv_shape),
        ("nested_shape", e.nested_shape),
        ("duplicate", e.duplicate),
        ("unexpected", e.unexpected),
        ("tlv_count", e.tlv_count),
        ("reject", e.reject),
        ("transition", e.transition),
        ("timer", e.timer),
        ("partition", e.partition),
        ("leader_id", e.leader_id),
        ("route", e.route),
        ("prefix", e.prefix),
        ("server", e.server),
        ("timeout", e.timeout),
        ("address", e.address),
        ("status", e.status),
        ("margin", e.margin),
        ("version", e.version),
        ("mode", e.mode),
        ("challenge", e.challenge),
        ("guard", e.guard),
        ("overflow", e.overflow),
        ("reboot_read", e.reboot_read),
        ("sync", e.sync),
        ("synced_field", e.synced_field),
    ];
    fams.iter()
        .map(|(n, f)| (*n, (f.base()..f.base() + f.len()).filter(|&x| map.is_set(x)).count() as u32, f.len()))
        .collect()
}

/// Whether the joiner acts on `m` in `state` (0), it is a leader message
/// meant for another state (1), or a request only a parent handles (2).
fn dispatch_class(state: MleState, m: MessageType) -> u32 {
    use MessageType::*;
    use MleState as S;
    let handled = match state {
        S::Detached | S::Leader => false,
        S::ParentRequestSent => matches!(m, ParentResponse | Advertisement),
        S::ChildIdRequestSent => matches!(m, ChildIdResponse | Advertisement),
        S::Child | S::ChildUpdateRequestSent | S::AddressSolicitSent => matches!(
            m,
            DataResponse | ChildUpdateRequest | ChildUpdateResponse | Advertisement | AddressSolicitResponse
        ),
        S::Router => matches!(m, Advertisement | LinkAccept | LinkRequest | DataResponse),
    };
    match m {
        _ if handled => 0,
        ParentRequest | ChildIdRequest | DataRequest | AddressSolicit | LinkRequest => 2,
        _ => 1,
    }
}

fn expected_tlvs(m: MessageType) -> &'static [u8] {
    use MessageType::*;
    match m {
        ParentRequest => &[t::MODE, t::CHALLENGE, t::VERSION],
        ParentResponse => &[t::SOURCE_ADDRESS, t::LEADER_DATA, t::RESPONSE, t::CHALLENGE, t::LINK_MARGIN, t::VERSION],
        ChildIdRequest => &[t::RESPONSE, t::MODE, t::TIMEOUT, t::VERSION],
        ChildIdResponse => &[t::SOURCE_ADDRESS, t::LEADER_DATA, t::ADDRESS16, t::NETWORK_DATA],
        DataRequest => &[t::SOURCE_ADDRESS],
        DataResponse => &[t::SOURCE_ADDRESS, t::LEADER_DATA, t::NETWORK_DATA],
        ChildUpdateRequest | ChildUpdateResponse => &[t::SOURCE_ADDRESS, t::MODE, t::TIMEOUT, t::LEADER_DATA],
        Advertisement => &[t::SOURCE_ADDRESS, t::LEADER_DATA, t::ROUTE64],
        AddressSolicit => &[t::SOURCE_ADDRESS, t::VERSION],
        AddressSolicitResponse => &[t::STATUS, t::ADDRESS16, t::ROUTE64],
        LinkRequest => &[t::SOURCE_ADDRESS, t::CHALLENGE, t::VERSION],
        LinkAccept => &[t::SOURCE_ADDRESS, t::RESPONSE, t::LINK_MARGIN, t::LEADER_DATA, t::VERSION],
    }
}

/// TLV types in a default Child ID Response, nested ones included.
const DEFAULT_CHILD_ID_TYPES: [u8; 6] =
    [t::SOURCE_ADDRESS, t::LEADER_DATA, t::ADDRESS16, t::NETWORK_DATA, t::PREFIX, t::SERVER];

fn shape(tlv: &RawTlv<'_>) -> u32 {
    if tlv.is_truncated() {
        return 3;
    }
    let Some(spec) = TlvTypeRegistry::standard().get(tlv.tlv_type) else {
        return 0;
    };
    let fixed = spec.fixed_len();
    let len = tlv.value.len();
    match (len.cmp(&fixed), spec.has_variable_tail()) {
        (std::cmp::Ordering::Less, _) => 1,
        (std::cmp::Ordering::Greater, false) => 2,
        _ => 0,
    }
}

fn serial_class(v: u8, reference: u8) -> u32 {
    match v.wrapping_sub(reference) as i8 {
        0 => 0,
        d if d > 0 => 1,
        _ => 2,
    }
}

fn weighting_class(w: u8) -> u32 {
    match w {
        proto::WEIGHTING => 0,
        0 => 1,
        255 => 2,
        _ => 3,
    }
}

fn leader_id_class(id: u8, known: u8) -> u32 {
    match id {
        x if x == known => 0,
        0..=62 => 1,
        255 => 3,
        _ => 2,
    }
}

fn partition_class(p: u32, known: u32) -> u32 {
    match p.cmp(&known) {
        std::cmp::Ordering::Equal => 0,
        std::cmp::Ordering::Greater => 1,
        std::cmp::Ordering::Less => 2,
    }
}

fn mask_class(mask: u64) -> u32 {
    match mask.count_ones() {
        0 => 0,
        1 => 1,
        2..=3 => 2,
        4..=62 => 3,
        _ => 4,
    }
}

fn prefix_length_class(l: u8) -> u32 {
    match l {
        0 => 0,
        1..=63 => 1,
        64 => 2,
        65..=128 => 3,
        129..=254 => 4,
        255 => 5,
    }
}

fn content_class(n: usize) -> u32 {
    match n {
        0 => 0,
        1..=7 => 1,
        8 => 2,
        9..=31 => 3,
        32 => 4,
        _ => 5,
    }
}

fn timeout_class(v: u32) -> u32 {
    match v {
        0 => 0,
        1..=239 => 1,
        240 => 2,
        241..=65535 => 3,
        u32::MAX => 5,
        _ => 4,
    }
}

fn mode_class(m: u8) -> u32 {
    match m {
        proto::MODE_FTD => 0,
        proto::MODE_MTD => 1,
        0 => 2,
        _ => 3,
    }
}

fn address_class(a: u16, expected: u16) -> u32 {
    match a {
        x if x == expected => 0,
        0xfffe | 0xffff => 3,
        x if x & 0x1ff == 0 => 2,
        x if x >> 9 == expected >> 9 => 1,
        _ => 4,
    }
}

fn byte_class(v: u8, nominal: u8) -> u32 {
    match v {
        0 => 0,
        x if x == nominal => 2,
        255 => 3,
        _ => 1,
    }
}

fn version_class(v: u16) -> u32 {
    match v {
        0 => 0,
        1..=3 => 1,
        4 => 2,
        _ => 3,
    }
}

fn be16(b: &[u8]) -> u16 {
    u16::from_be_bytes([b[0], b[1]])
}

fn be32(b: &[u8]) -> u32 {
    u32::from_be_bytes([b[0], b[1], b[2], b[3]])
}

struct Msg<'a> {
    kind: MessageType,
    bytes: &'a [u8],
    tlvs: Vec<RawTlv<'a>>,
}

impl<'a> Msg<'a> {
    fn find(&self, ty: u8) -> Option<&RawTlv<'a>> {
        self.tlvs.iter().find(|x| x.tlv_type == ty)
    }

    /// Value of the first TLV of `ty`, which must hold at least `min` bytes.
    fn value(&self, ty: u8, min: usize, missing: Reject) -> Result<&'a [u8], Reject> {
        let tlv = self.find(ty).ok_or(missing)?;
        if tlv.value.len() < min {
            return Err(Reject::ShortTlv);
        }
        Ok(tlv.value)
    }

    fn children(&self, parent: &RawTlv<'a>) -> Vec<RawTlv<'a>> {
        RawTlvIter::children(self.bytes, parent).collect()
    }

    /// Network data children across every Network Data TLV.
    fn network_children(&self) -> Vec<RawTlv<'a>> {
        self.tlvs.iter().filter(|x| x.tlv_type == t::NETWORK_DATA).flat_map(|nd| self.children(nd)).collect()
    }
}

/// The simulated device under test.
#[derive(Debug, Clone)]
pub struct Joiner {
    cfg: NodeConfig,
    rng: ChaCha8Rng,
    cov: CoverageMap,
    reboot_count: u64,
    crashed: bool,
    state: MleState,
    timer: u32,
    retries: u32,
    attached_ticks: u32,
    since_keepalive: u32,
    since_advertise: u32,
    challenge: [u8; 8],
    link_challenge: [u8; 8],
    link_established: bool,
    data_pending: bool,
    leader_data_held: bool,
    leader: LeaderInfo,
    parent: u16,
    rloc16: u16,
    route_sequence: u8,
    armed: bool,
    valid_adverts: u32,
    synced: bool,
}

impl Joiner {
    pub fn new(cfg: NodeConfig) -> Self {
        let mut cfg = cfg;
        if cfg.node_type == NodeType::Mtd {
            cfg.role_target = NodeRole::Child;
        }
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut j = Self {
            cfg,
            rng,
            cov: CoverageMap::new(joiner_edge_count() as usize),
            reboot_count: 0,
            crashed: false,
            state: MleState::Detached,
            timer: 0,
            retries: 0,
            attached_ticks: 0,
            since_keepalive: 0,
            since_advertise: 0,
            challenge: [0; 8],
            link_challenge: [0; 8],
            link_established: false,
            data_pending: false,
            leader_data_held: false,
            leader: LeaderInfo::default(),
            parent: proto::LEADER_RLOC16,
            rloc16: 0xfffe,
            route_sequence: proto::ROUTE_SEQUENCE,
            armed: false,
            valid_adverts: 0,
            synced: false,
        };
        j.clear_protocol_state();
        j
    }

    pub fn node_type(&self) -> NodeType {
        self.cfg.node_type
    }

    pub fn config(&self) -> &NodeConfig {
        &self.cfg
    }

    pub fn state(&self) -> MleState {
        self.state
    }

    pub fn role(&self) -> NodeRole {
        self.state.role()
    }

    pub fn is_crashed(&self) -> bool {
        self.crashed
    }

    pub fn holds_leader_data(&self) -> bool {
        self.leader_data_held
    }

    pub fn reboot_count(&self) -> u64 {
        self.reboot_count
    }

    pub fn rloc16(&self) -> u16 {
        self.rloc16
    }

    pub fn coverage(&self) -> &CoverageMap {
        &self.cov
    }

    pub fn coverage_mut(&mut self) -> &mut CoverageMap {
        &mut self.cov
    }

    fn hit(&mut self, edge: u32) {
        // Edge ids come from the static topology, which fits the map.
        let _ = self.cov.record(edge);
    }

    fn mode(&self) -> u8 {
        match self.cfg.node_type {
            NodeType::Ftd => proto::MODE_FTD,
            NodeType::Mtd => proto::MODE_MTD,
        }
    }

    fn clear_protocol_state(&mut self) {
        self.state = MleState::Detached;
        self.timer = 0;
        self.retries = 0;
        self.attached_ticks = 0;
        self.since_keepalive = 0;
        self.since_advertise = 0;
        self.link_established = false;
        self.data_pending = false;
        self.leader = LeaderInfo::default();
        self.parent = proto::LEADER_RLOC16;
        self.rloc16 = 0xfffe;
        self.route_sequence = proto::ROUTE_SEQUENCE;
        self.armed = false;
        self.valid_adverts = 0;
        self.synced = false;
        if self.cfg.node_type == NodeType::Mtd {
            self.leader_data_held = true;
        }
    }

    fn enter(&mut self, next: MleState) {
        let e = edges().transition.at2(self.state.index(), next.index());
        self.hit(e);
        if next != self.state {
            self.timer = 0;
            self.retries = 0;
        }
        if next != MleState::AddressSolicitSent {
            self.armed = false;
        }
        self.state = next;
    }

    fn timer_event(&mut self, ev: Timer) {
        let e = edges().timer.at(ev as u32);
        self.hit(e);
    }

    fn guard(&mut self, g: Guard) {
        let e = edges().guard.at(g as u32);
        self.hit(e);
    }

    /// Reboot: protocol state is lost, the leader-data flag survives.
    pub fn soft_reset(&mut self) {
        self.reboot_count += 1;
        self.crashed = false;
        self.clear_protocol_state();
    }

    /// Restart after a crash; counts as a reboot.
    pub fn restart(&mut self) {
        self.soft_reset();
    }

    /// Factory reset under a new seed.
    pub fn reseed(&mut self, seed: u64) {
        self.cfg.seed = seed;
        self.hard_reset();
    }

    pub fn hard_reset(&mut self) {
        self.reboot_count = 0;
        self.crashed = false;
        self.leader_data_held = false;
        self.rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        self.clear_protocol_state();
    }

    pub fn read_reboot_count(&mut self) -> u64 {
        let e = edges().reboot_read.at(0);
        self.hit(e);
        self.reboot_count
    }

    pub fn tick(&mut self) -> Vec<MlePacket> {
        if self.crashed {
            return Vec::new();
        }
        self.timer += 1;
        let mut out = Vec::new();
        match self.state {
            MleState::Detached => {
                self.challenge = self.rng.random();
                self.timer_event(Timer::ParentRequestTx);
                out.push(proto::parent_request(self.mode(), self.challenge));
                self.enter(MleState::ParentRequestSent);
            }
            MleState::ParentRequestSent => {
                if self.timer >= RETRANSMIT_TICKS {
                    self.timer = 0;
                    self.timer_event(Timer::ParentRequestRetx);
                    out.push(proto::parent_request(self.mode(), self.challenge));
                }
            }
            MleState::ChildIdRequestSent => {
                if self.timer >= RETRANSMIT_TICKS {
                    self.timer = 0;
                    self.retries += 1;
                    if self.retries >= MAX_RETRIES {
                        self.timer_event(Timer::ChildIdGiveUp);
                        self.challenge = self.rng.random();
                        out.push(proto::parent_request(self.mode(), self.challenge));
                        self.enter(MleState::ParentRequestSent);
                    } else {
                        self.timer_event(Timer::ChildIdRetx);
                        out.push(proto::child_id_request(&proto::LEADER_CHALLENGE, self.mode()));
                    }
                }
            }
            MleState::Child => {
                self.attached_ticks += 1;
                self.since_keepalive += 1;
                if self.data_pending {
                    self.data_pending = false;
                    self.timer_event(Timer::DataRequestTx);
                    out.push(proto::data_request(self.rloc16));
                } else if self.attached_ticks == KEEPALIVE_FIRST || self.since_keepalive >= KEEPALIVE_PERIOD {
                    self.since_keepalive = 0;
                    self.timer_event(Timer::KeepaliveTx);
                    out.push(proto::child_update_request_from_child(self.rloc16, self.mode(), self.leader));
                    self.enter(MleState::ChildUpdateRequestSent);
                } else if self.cfg.role_target == NodeRole::Router && self.attached_ticks >= SOLICIT_DELAY {
                    self.timer_event(Timer::SolicitTx);
                    out.push(proto::address_solicit(self.rloc16));
                    self.enter(MleState::AddressSolicitSent);
                }
            }
            MleState::ChildUpdateRequestSent => {
                self.attached_ticks += 1;
                if self.timer >= RETRANSMIT_TICKS {
                    self.timer = 0;
                    self.retries += 1;
                    if self.retries >= MAX_RETRIES {
                        self.timer_event(Timer::KeepaliveGiveUp);
                        self.clear_protocol_state();
                    } else {
                        self.timer_event(Timer::KeepaliveRetx);
                        out.push(proto::child_update_request_from_child(self.rloc16, self.mode(), self.leader));
                    }
                }
            }
            MleState::AddressSolicitSent => {
                self.attached_ticks += 1;
                if self.timer >= SOLICIT_RETRANSMIT_TICKS {
                    self.timer = 0;
                    self.retries += 1;
                    if self.retries >= MAX_RETRIES {
                        self.timer_event(Timer::SolicitGiveUp);
                        self.attached_ticks = 0;
                        self.enter(MleState::Child);
                    } else {
                        self.timer_event(Timer::SolicitRetx);
                        out.push(proto::address_solicit(self.rloc16));
                    }
                }
            }
            MleState::Router => {
                self.since_advertise += 1;
                if !self.link_established && self.timer >= SOLICIT_RETRANSMIT_TICKS {
                    self.timer = 0;
                    self.timer_event(Timer::LinkRequestRetx);
                    out.push(proto::link_request(self.rloc16, self.link_challenge));
                } else if self.since_advertise >= ADVERTISE_PERIOD {
                    self.since_advertise = 0;
                    self.timer_event(Timer::AdvertiseTx);
                    let mask = proto::router_mask(&[proto::LEADER_ROUTER_ID, (self.rloc16 >> 10) as u8]);
                    out.push(proto::router_advertisement(self.rloc16, self.leader, self.route_sequence, mask));
                }
            }
            MleState::Leader => {}
        }
        out
    }

    pub fn step(&mut self, incoming: &MlePacket) -> Result<StepOutcome, SimError> {
        self.step_bytes(&wire(incoming))
    }

    pub fn step_bytes(&mut self, bytes: &[u8]) -> Result<StepOutcome, SimError> {
        if self.crashed {
            return Err(SimError::Crashed);
        }
        let e = edges();
        if bytes.len() < MIN_PACKET_LEN {
            self.hit(e.malformed.at(0));
            return Ok(StepOutcome::Silent);
        }
        let Some(kind) = MessageType::from_code(bytes[MIN_PACKET_LEN - 1]) else {
            self.hit(e.malformed.at(1));
            return Ok(StepOutcome::Silent);
        };
        let msg = Msg { kind, bytes, tlvs: RawTlvIter::packet(bytes).collect() };
        self.hit(e.dispatch.at2(self.state.index(), dispatch_class(self.state, kind)));
        self.scan(&msg);
        if self.synced {
            self.synced_fields(&msg);
        }

        if let Some(v) = self.check_vulnerabilities(&msg) {
            self.crashed = true;
            return Ok(StepOutcome::Crash(v.kind(), v));
        }

        if msg.tlvs.iter().any(RawTlv::is_truncated) {
            self.hit(e.reject.at(Reject::Truncated as u32));
            return Ok(StepOutcome::Silent);
        }
        match self.handle(&msg) {
            Ok(out) if out.is_empty() => Ok(StepOutcome::Silent),
            Ok(out) => Ok(StepOutcome::Ok(out)),
            Err(r) => {
                self.hit(e.reject.at(r as u32));
                Ok(StepOutcome::Silent)
            }
        }
    }

    /// Structural parse edges.
    fn scan(&mut self, msg: &Msg<'_>) {
        let e = edges();
        let expected = expected_tlvs(msg.kind);
        if msg.tlvs.is_empty() {
            self.hit(e.malformed.at(2));
        }
        let consumed: usize = msg.tlvs.last().map_or(MIN_PACKET_LEN, |x| x.offset + 2 + x.value.len());
        if consumed < msg.bytes.len() {
            self.hit(e.malformed.at(3));
        }
        let mut seen = [false; KINDS as usize];
        for tlv in &msg.tlvs {
            let k = kind(tlv.tlv_type);
            self.hit(e.tlv_shape.at2(k, shape(tlv)));
            if seen[k as usize] {
                self.hit(e.duplicate.at(k));
            }
            seen[k as usize] = true;
            if !expected.contains(&tlv.tlv_type) {
                self.hit(e.unexpected.at(k));
            }
        }
        let count_class = match msg.tlvs.len().cmp(&expected.len()) {
            std::cmp::Ordering::Less => 0,
            std::cmp::Ordering::Equal => 1,
            std::cmp::Ordering::Greater if msg.tlvs.len() == expected.len() + 1 => 2,
            std::cmp::Ordering::Greater => 3,
        };
        self.hit(e.tlv_count.at(count_class));
        for child in msg.network_children() {
            self.hit(e.nested_shape.at(kind(child.tlv_type)));
        }
    }

    fn check_vulnerabilities(&mut self, msg: &Msg<'_>) -> Option<VulnId> {
        let order: [fn(&mut Self, &Msg<'_>) -> bool; 6] = [Self::v1, Self::v2, Self::v3, Self::v4, Self::v5, Self::v6];
        for (v, pred) in VulnId::ALL.into_iter().zip(order) {
            if !pred(self, msg) {
                continue;
            }
            if v.kind() == CrashKind::BufferOverflowDetected && !self.cfg.sanitizer {
                let e = edges().overflow.at(if v == VulnId::V2 { 0 } else { 1 });
                self.hit(e);
                return None;
            }
            return Some(v);
        }
        None
    }

    /// Prefix length and content size of the first prefix in network data.
    fn prefix_shape(&mut self, msg: &Msg<'_>) -> Option<(u8, usize)> {
        let prefix = msg.network_children().into_iter().find(|c| c.tlv_type == t::PREFIX && !c.value.is_empty())?;
        Some((prefix.value[0], prefix.value.len() - 1))
    }

    fn has_foreign_tlv(msg: &Msg<'_>) -> bool {
        msg.tlvs.iter().chain(msg.network_children().iter()).any(|x| !DEFAULT_CHILD_ID_TYPES.contains(&x.tlv_type))
    }

    fn v6_shape(&mut self, msg: &Msg<'_>) -> bool {
        if msg.kind != MessageType::ChildIdResponse || self.state != MleState::ChildIdRequestSent {
            return false;
        }
        let foreign = Self::has_foreign_tlv(msg);
        if foreign {
            self.guard(Guard::ForeignTlvInChildId);
        }
        match self.prefix_shape(msg) {
            Some((255, 32)) => {
                self.guard(Guard::PrefixContent32);
                foreign
            }
            _ => false,
        }
    }

    fn v1(&mut self, msg: &Msg<'_>) -> bool {
        if msg.kind != MessageType::ChildIdResponse || self.state != MleState::ChildIdRequestSent {
            return false;
        }
        let Some((len, _)) = self.prefix_shape(msg) else { return false };
        self.guard(Guard::PrefixInChildId);
        if len > 128 {
            self.guard(Guard::PrefixLengthHigh);
        }
        if len != 255 {
            return false;
        }
        self.guard(Guard::PrefixLengthMax);
        !self.v6_shape(msg)
    }

    fn v2(&mut self, msg: &Msg<'_>) -> bool {
        if msg.kind != MessageType::ChildIdResponse
            || self.state != MleState::ChildIdRequestSent
            || self.cfg.node_type != NodeType::Ftd
        {
            return false;
        }
        let servers: Vec<RawTlv<'_>> =
            msg.tlvs.iter().copied().chain(msg.network_children()).filter(|x| x.tlv_type == t::SERVER).collect();
        let Some(addr) = msg.find(t::ADDRESS16).filter(|a| a.value.len() >= 2).map(|a| be16(a.value)) else {
            return false;
        };
        for server in servers {
            if server.declared_length >= 2 {
                continue;
            }
            self.guard(Guard::ServerShort);
            if server.declared_length != 1 || server.unbounded.is_empty() {
                continue;
            }
            self.guard(Guard::ServerLengthOne);
            // One byte is copied into a slot still holding the low byte of the assigned address.
            let server16 = u16::from_be_bytes([server.unbounded[0], addr as u8]);
            if server16 == addr {
                self.guard(Guard::ServerHighByteMatch);
                return true;
            }
        }
        false
    }

    fn v3(&mut self, msg: &Msg<'_>) -> bool {
        let in_state = match msg.kind {
            MessageType::ChildIdResponse => self.state == MleState::ChildIdRequestSent,
            MessageType::DataResponse => matches!(self.role(), NodeRole::Child | NodeRole::Router),
            _ => false,
        };
        if !in_state {
            return false;
        }
        let Some(nd) = msg.find(t::NETWORK_DATA) else { return false };
        if nd.is_truncated() {
            self.guard(Guard::NetworkDataOverrun);
        }
        if nd.declared_length != 255 {
            return false;
        }
        self.guard(Guard::NetworkDataMax);
        if self.leader_data_held {
            self.guard(Guard::LeaderDataHeld);
        }
        self.leader_data_held
    }

    fn v4(&mut self, msg: &Msg<'_>) -> bool {
        if msg.kind != MessageType::ChildUpdateResponse || self.role() != NodeRole::Child {
            return false;
        }
        let Some(timeout) = msg.find(t::TIMEOUT).filter(|x| x.value.len() >= 4).map(|x| be32(x.value)) else {
            return false;
        };
        if timeout >= 1 << 31 {
            self.guard(Guard::TimeoutHuge);
        }
        if timeout != u32::MAX {
            return false;
        }
        if self.cfg.node_type != NodeType::Mtd {
            self.guard(Guard::TimeoutMaxIgnored);
            return false;
        }
        true
    }

    fn v5(&mut self, msg: &Msg<'_>) -> bool {
        if self.cfg.node_type != NodeType::Ftd {
            return false;
        }
        match msg.kind {
            MessageType::Advertisement => {
                let leader_id = msg.find(t::LEADER_DATA).filter(|x| x.value.len() >= 8).map(|x| x.value[7]);
                if leader_id == Some(255) {
                    if self.state == MleState::AddressSolicitSent {
                        self.guard(Guard::SolicitArmed);
                        self.armed = true;
                    } else {
                        self.guard(Guard::LeaderIdMaxOutsideWindow);
                    }
                }
                false
            }
            MessageType::AddressSolicitResponse if self.armed && self.state == MleState::AddressSolicitSent => {
                let ok = msg.find(t::STATUS).and_then(|x| x.value.first().copied()) == Some(proto::STATUS_SUCCESS);
                if !ok {
                    self.guard(Guard::ArmedSolicitFailed);
                }
                ok
            }
            _ => false,
        }
    }

    fn v6(&mut self, msg: &Msg<'_>) -> bool {
        self.v6_shape(msg)
    }

    fn handle(&mut self, msg: &Msg<'_>) -> Result<Vec<MlePacket>, Reject> {
        use MessageType::*;
        match msg.kind {
            ParentResponse => self.on_parent_response(msg),
            ChildIdResponse => self.on_child_id_response(msg),
            DataResponse => self.on_data_response(msg),
            ChildUpdateRequest => self.on_child_update_request(msg),
            ChildUpdateResponse => self.on_child_update_response(msg),
            Advertisement => self.on_advertisement(msg),
            AddressSolicitResponse => self.on_address_solicit_response(msg),
            LinkAccept => self.on_link_accept(msg),
            LinkRequest => self.on_link_request(msg),
            ParentRequest | ChildIdRequest | DataRequest | AddressSolicit => Err(Reject::NotForRole),
        }
    }

    fn source(&mut self, msg: &Msg<'_>, ctx: u32) -> Result<u16, Reject> {
        let v = msg.value(t::SOURCE_ADDRESS, 2, Reject::MissingSource)?;
        let src = be16(v);
        let e = edges().address.at2(ctx, address_class(src, self.parent));
        self.hit(e);
        Ok(src)
    }

    fn leader_data(&mut self, msg: &Msg<'_>) -> Result<LeaderInfo, Reject> {
        let v = msg.value(t::LEADER_DATA, 8, Reject::MissingLeaderData)?;
        let ld = LeaderInfo::from_bytes(v).ok_or(Reject::ShortTlv)?;
        let e = edges();
        self.hit(
            e.partition.at2(partition_class(ld.partition_id, self.leader.partition_id), weighting_class(ld.weighting)),
        );
        self.hit(e.leader_id.at2(
            leader_id_class(ld.leader_id, self.leader.leader_id),
            serial_class(ld.data_version, self.leader.data_version),
        ));
        Ok(ld)
    }

    fn version(&mut self, msg: &Msg<'_>) -> Result<(), Reject> {
        let Some(v) = msg.find(t::VERSION) else { return Ok(()) };
        if v.value.len() < 2 {
            return Err(Reject::ShortTlv);
        }
        let ver = be16(v.value);
        let e = edges().version.at(version_class(ver));
        self.hit(e);
        if ver < 2 {
            return Err(Reject::BadVersion);
        }
        Ok(())
    }

    fn margin(&mut self, msg: &Msg<'_>) -> Result<(), Reject> {
        let Some(m) = msg.find(t::LINK_MARGIN) else { return Ok(()) };
        let v = *m.value.first().ok_or(Reject::ShortTlv)?;
        let e = edges().margin.at(byte_class(v, proto::LINK_MARGIN));
        self.hit(e);
        if v == 0 {
            return Err(Reject::LowMargin);
        }
        Ok(())
    }

    fn network_data(&mut self, msg: &Msg<'_>) -> Result<(), Reject> {
        msg.find(t::NETWORK_DATA).ok_or(Reject::MissingNetworkData)?;
        let e = edges();
        for child in msg.network_children() {
            match child.tlv_type {
                t::PREFIX if !child.value.is_empty() => {
                    let edge = e.prefix.at2(prefix_length_class(child.value[0]), content_class(child.value.len() - 1));
                    self.hit(edge);
                }
                t::SERVER if child.value.len() >= 2 => {
                    let s = be16(child.value);
                    let class = match s {
                        x if x == self.parent => 0,
                        x if x == self.rloc16 => 1,
                        0xfffe | 0xffff => 3,
                        x if x & 0x1ff == 0 => 2,
                        _ => 4,
                    };
                    let data = match child.value.len() - 2 {
                        0 => 0,
                        1..=2 => 1,
                        _ => 2,
                    };
                    self.hit(e.server.at2(class, data));
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn on_parent_response(&mut self, msg: &Msg<'_>) -> Result<Vec<MlePacket>, Reject> {
        if self.state != MleState::ParentRequestSent {
            return Err(Reject::WrongState);
        }
        let src = self.source(msg, 0)?;
        let ld = self.leader_data(msg)?;
        let resp = msg.value(t::RESPONSE, 8, Reject::MissingResponse)?;
        let matches = resp[..8] == self.challenge;
        let e = edges().challenge.at(if matches { 0 } else { 1 });
        self.hit(e);
        if !matches {
            return Err(Reject::ResponseMismatch);
        }
        let challenge = msg.value(t::CHALLENGE, 4, Reject::MissingChallenge)?.to_vec();
        self.margin(msg)?;
        self.version(msg)?;
        if ld.leader_id == 255 {
            return Err(Reject::NoLeader);
        }
        self.parent = src;
        self.leader = ld;
        if self.cfg.node_type == NodeType::Ftd {
            self.leader_data_held = self.rng.random_bool(self.cfg.leader_data_probability.clamp(0.0, 1.0));
        }
        self.enter(MleState::ChildIdRequestSent);
        Ok(vec![proto::child_id_request(&challenge, self.mode())])
    }

    fn on_child_id_response(&mut self, msg: &Msg<'_>) -> Result<Vec<MlePacket>, Reject> {
        if self.state != MleState::ChildIdRequestSent {
            return Err(Reject::WrongState);
        }
        let src = self.source(msg, 0)?;
        if src != self.parent {
            return Err(Reject::UnknownSource);
        }
        let ld = self.leader_data(msg)?;
        if ld.partition_id != self.leader.partition_id {
            return Err(Reject::PartitionMismatch);
        }
        let addr = be16(msg.value(t::ADDRESS16, 2, Reject::MissingAddress16)?);
        let e = edges().address.at2(1, address_class(addr, proto::CHILD_RLOC16));
        self.hit(e);
        if addr >> 9 != self.parent >> 9 || addr & 0x1ff == 0 || addr >= 0xfffe {
            return Err(Reject::BadAddress16);
        }
        self.network_data(msg)?;
        self.leader = ld;
        self.rloc16 = addr;
        self.attached_ticks = 0;
        self.since_keepalive = 0;
        self.data_pending = true;
        self.enter(MleState::Child);
        Ok(Vec::new())
    }

    fn attached(&self) -> bool {
        matches!(self.role(), NodeRole::Child | NodeRole::Router)
    }

    fn on_data_response(&mut self, msg: &Msg<'_>) -> Result<Vec<MlePacket>, Reject> {
        if !self.attached() {
            return Err(Reject::WrongState);
        }
        let src = self.source(msg, 0)?;
        if src != self.parent {
            return Err(Reject::UnknownSource);
        }
        let ld = self.leader_data(msg)?;
        if ld.partition_id != self.leader.partition_id {
            return Err(Reject::PartitionMismatch);
        }
        self.network_data(msg)?;
        if serial_class(ld.data_version, self.leader.data_version) == 2 {
            return Err(Reject::StaleData);
        }
        self.leader = ld;
        Ok(Vec::new())
    }

    fn on_child_update_request(&mut self, msg: &Msg<'_>) -> Result<Vec<MlePacket>, Reject> {
        if self.role() != NodeRole::Child {
            return Err(Reject::WrongState);
        }
        let src = self.source(msg, 0)?;
        if src != self.parent {
            return Err(Reject::UnknownSource);
        }
        let ld = self.leader_data(msg)?;
        if serial_class(ld.data_version, self.leader.data_version) == 1 {
            self.data_pending = true;
        }
        Ok(vec![proto::child_update_response_from_child(self.rloc16, self.mode(), self.leader)])
    }

    fn on_child_update_response(&mut self, msg: &Msg<'_>) -> Result<Vec<MlePacket>, Reject> {
        if self.role() != NodeRole::Child {
            return Err(Reject::WrongState);
        }
        let src = self.source(msg, 0)?;
        if src != self.parent {
            return Err(Reject::UnknownSource);
        }
        let timeout = be32(msg.value(t::TIMEOUT, 4, Reject::MissingTimeout)?);
        let mode = msg.find(t::MODE).and_then(|m| m.value.first().copied());
        let e = edges();
        self.hit(e.timeout.at2(timeout_class(timeout), mode.map_or(3, mode_class)));
        if let Some(m) = mode {
            self.hit(e.mode.at2(0, mode_class(m)));
        }
        self.leader_data(msg)?;
        if self.state != MleState::ChildUpdateRequestSent {
            return Err(Reject::Unsolicited);
        }
        self.enter(MleState::Child);
        Ok(Vec::new())
    }

    fn on_advertisement(&mut self, msg: &Msg<'_>) -> Result<Vec<MlePacket>, Reject> {
        let src = self.source(msg, 2)?;
        let ld = self.leader_data(msg)?;
        if self.role() == NodeRole::Detached {
            return Ok(Vec::new());
        }
        let route = msg.value(t::ROUTE64, 9, Reject::MissingRoute)?;
        let seq = route[0];
        let mask = u64::from_be_bytes(route[1..9].try_into().expect("nine-byte route"));
        let e = edges().route.at2(serial_class(seq, self.route_sequence), mask_class(mask));
        self.hit(e);
        if src != self.parent {
            return Ok(Vec::new());
        }
        if self.role() == NodeRole::Router && self.link_established && !self.synced {
            self.track_sync(msg);
        }
        if ld.partition_id != self.leader.partition_id {
            return Err(Reject::PartitionMismatch);
        }
        if serial_class(ld.data_version, self.leader.data_version) == 1 && self.role() == NodeRole::Child {
            self.data_pending = true;
        }
        if self.role() == NodeRole::Router && serial_class(seq, self.route_sequence) == 1 {
            self.route_sequence = seq;
        }
        Ok(Vec::new())
    }

    /// Counts consecutive advertisements identical to the one the parent
    /// should send; enough of them synchronize the router.
    fn track_sync(&mut self, msg: &Msg<'_>) {
        let mask = proto::router_mask(&[self.leader.leader_id, (self.rloc16 >> 10) as u8]);
        let expected = proto::router_advertisement(self.parent, self.leader, self.route_sequence, mask);
        let e = edges();
        // Unknown TLVs are skipped, so only the expected ones must match.
        let matches = expected.tlvs.iter().all(|want| {
            msg.find(want.tlv_type).is_some_and(|got| {
                !got.is_truncated() && matches!(&want.payload, TlvPayload::Raw(v) if v.as_slice() == got.value)
            })
        });
        if matches {
            self.valid_adverts += 1;
            if self.valid_adverts >= SYNC_ADVERTISEMENTS {
                self.synced = true;
                self.hit(e.sync.at(1));
            } else {
                self.hit(e.sync.at(0));
            }
        } else {
            if self.valid_adverts > 0 {
                self.hit(e.sync.at(2));
            }
            self.valid_adverts = 0;
        }
    }

    /// Value classes of the known fields of traffic handled by a synchronized router.
    fn synced_fields(&mut self, msg: &Msg<'_>) {
        let Ok(packet) = decode_packet(msg.bytes) else { return };
        let e = edges();
        let templates = synced_templates();
        for f in &dissect(&packet).fields {
            let Some(&slot) = templates.get(&(msg.kind.code(), f.path.clone())) else { continue };
            let start = f.bit_offset / 8;
            let Some(raw) = msg.bytes.get(start..start + f.bit_width as usize / 8) else { continue };
            let v = raw.iter().fold(0u64, |acc, &b| acc << 8 | b as u64);
            self.hit(e.synced_field.at2(slot, value_class(v, f.bit_width)));
        }
    }

    fn on_address_solicit_response(&mut self, msg: &Msg<'_>) -> Result<Vec<MlePacket>, Reject> {
        if self.state != MleState::AddressSolicitSent {
            return Err(Reject::WrongState);
        }
        let status = *msg.value(t::STATUS, 1, Reject::MissingStatus)?.first().ok_or(Reject::ShortTlv)?;
        let class = match status {
            proto::STATUS_SUCCESS => 0,
            1 => 1,
            _ => 2,
        };
        let e = edges().status.at(class);
        self.hit(e);
        if status != proto::STATUS_SUCCESS {
            self.attached_ticks = 0;
            self.enter(MleState::Child);
            return Err(Reject::StatusFailure);
        }
        let addr = be16(msg.value(t::ADDRESS16, 2, Reject::MissingAddress16)?);
        let e = edges().address.at2(2, address_class(addr, proto::ROUTER_RLOC16));
        self.hit(e);
        if addr & 0x1ff != 0 || addr >= 0xfc00 {
            return Err(Reject::BadAddress16);
        }
        if let Some(route) = msg.find(t::ROUTE64).filter(|r| r.value.len() >= 9) {
            let mask = u64::from_be_bytes(route.value[1..9].try_into().expect("nine-byte route"));
            let e = edges().route.at2(serial_class(route.value[0], self.route_sequence), mask_class(mask));
            self.hit(e);
            self.route_sequence = route.value[0];
        }
        self.rloc16 = addr;
        self.link_challenge = self.rng.random();
        self.link_established = false;
        self.since_advertise = 0;
        self.enter(MleState::Router);
        self.timer_event(Timer::LinkRequestTx);
        Ok(vec![proto::link_request(self.rloc16, self.link_challenge)])
    }

    fn on_link_accept(&mut self, msg: &Msg<'_>) -> Result<Vec<MlePacket>, Reject> {
        if self.state != MleState::Router {
            return Err(Reject::WrongState);
        }
        self.source(msg, 2)?;
        let resp = msg.value(t::RESPONSE, 8, Reject::MissingResponse)?;
        let matches = resp[..8] == self.link_challenge;
        let e = edges().challenge.at(if matches { 2 } else { 1 });
        self.hit(e);
        if !matches {
            return Err(Reject::ResponseMismatch);
        }
        self.margin(msg)?;
        self.leader_data(msg)?;
        self.version(msg)?;
        if self.link_established {
            return Err(Reject::Unsolicited);
        }
        self.link_established = true;
        Ok(Vec::new())
    }

    fn on_link_request(&mut self, msg: &Msg<'_>) -> Result<Vec<MlePacket>, Reject> {
        if self.state != MleState::Router {
            return Err(Reject::NotForRole);
        }
        self.source(msg, 2)?;
        let challenge = msg.value(t::CHALLENGE, 4, Reject::MissingChallenge)?.to_vec();
        self.version(msg)?;
        let mode = self.mode();
        let e = edges().mode.at2(1, mode_class(mode));
        self.hit(e);
        Ok(vec![proto::link_accept(&challenge)])
    }
}
