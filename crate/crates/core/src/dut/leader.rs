use std::collections::VecDeque;
use std::sync::OnceLock;

use super::edges::{Allocator, Family};
use super::proto::{self, LeaderInfo};
use super::wire;
use crate::coverage::CoverageMap;
use crate::mle::{tlv_type as t, MessageType, MlePacket, RawTlv, RawTlvIter, MIN_PACKET_LEN};

const ADVERTISE_PERIOD: u32 = 5;
const CHILD_UPDATE_PERIOD: u32 = 8;
const DATA_PUSH_PERIOD: u32 = 7;
const PEER_ROUTER_ID: u8 = (proto::ROUTER_RLOC16 >> 10) as u8;

/// What the leader believes about its single peer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Peer {
    Unknown,
    Parenting,
    Child,
    Router,
}

#[derive(Debug, Clone, Copy)]
#[repr(u32)]
enum Outcome {
    Accepted,
    Missing,
    Invalid,
}

struct Edges {
    dispatch: Family,
    outcome: Family,
    malformed: Family,
    partition: Family,
    leader_id: Family,
    mode: Family,
    timeout: Family,
    route: Family,
    source: Family,
    timer: Family,
    total: u32,
}

fn edges() -> &'static Edges {
    static EDGES: OnceLock<Edges> = OnceLock::new();
    EDGES.get_or_init(|| {
        let mut a = Allocator::default();
        let e = Edges {
            dispatch: a.family(&[4, 13]),
            outcome: a.family(&[13, 3]),
            malformed: a.family(&[2]),
            partition: a.family(&[3, 4]),
            leader_id: a.family(&[4, 3]),
            mode: a.family(&[4]),
            timeout: a.family(&[6]),
            route: a.family(&[3, 5]),
            source: a.family(&[5]),
            timer: a.family(&[3]),
            total: 0,
        };
        Edges { total: a.total(), ..e }
    })
}

/// Number of edges the generator can record.
pub fn leader_edge_count() -> u32 {
    edges().total
}

fn first<'a>(tlvs: &[RawTlv<'a>], ty: u8, min: usize) -> Option<&'a [u8]> {
    tlvs.iter().find(|x| x.tlv_type == ty).map(|x| x.value).filter(|v| v.len() >= min)
}

/// The benign leader that generates traffic for the joiner under test.
#[derive(Debug, Clone)]
pub struct Leader {
    cov: CoverageMap,
    peer: Peer,
    queue: VecDeque<MlePacket>,
    since_advertise: u32,
    since_child_update: u32,
    since_data_push: u32,
}

impl Default for Leader {
    fn default() -> Self {
        Self::new()
    }
}

impl Leader {
    pub fn new() -> Self {
        Self {
            cov: CoverageMap::new(leader_edge_count() as usize),
            peer: Peer::Unknown,
            queue: VecDeque::new(),
            since_advertise: 0,
            since_child_update: 0,
            since_data_push: 0,
        }
    }

    pub fn coverage(&self) -> &CoverageMap {
        &self.cov
    }

    pub fn coverage_mut(&mut self) -> &mut CoverageMap {
        &mut self.cov
    }

    /// Factory reset; coverage is kept.
    pub fn reset(&mut self) {
        self.peer = Peer::Unknown;
        self.queue.clear();
        self.since_advertise = 0;
        self.since_child_update = 0;
        self.since_data_push = 0;
    }

    /// Forgets the peer, as after the peer rebooted.
    pub fn peer_lost(&mut self) {
        self.peer = Peer::Unknown;
        self.queue.clear();
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    fn hit(&mut self, edge: u32) {
        let _ = self.cov.record(edge);
    }

    fn routers(&self) -> Vec<u8> {
        if self.peer == Peer::Router {
            vec![proto::LEADER_ROUTER_ID, PEER_ROUTER_ID]
        } else {
            vec![proto::LEADER_ROUTER_ID]
        }
    }

    /// Advances the leader's clock by one step, queueing periodic traffic.
    pub fn tick(&mut self) {
        self.since_advertise += 1;
        self.since_child_update += 1;
        self.since_data_push += 1;
        if self.since_advertise >= ADVERTISE_PERIOD {
            self.since_advertise = 0;
            self.hit(edges().timer.at(0));
            self.queue.push_back(proto::leader_advertisement(&self.routers()));
        }
        if self.peer == Peer::Child && self.since_child_update >= CHILD_UPDATE_PERIOD {
            self.since_child_update = 0;
            self.hit(edges().timer.at(1));
            self.queue.push_back(proto::child_update_request_from_leader());
        }
        if self.peer == Peer::Router && self.since_data_push >= DATA_PUSH_PERIOD {
            self.since_data_push = 0;
            self.hit(edges().timer.at(2));
            self.queue.push_back(proto::data_response());
        }
    }

    /// Next packet to send, or `None` while waiting.
    pub fn generate_next(&mut self) -> Option<MlePacket> {
        self.queue.pop_front()
    }

    pub fn receive(&mut self, packet: &MlePacket) {
        self.receive_bytes(&wire(packet));
    }

    pub fn receive_bytes(&mut self, bytes: &[u8]) {
        let e = edges();
        if bytes.len() < MIN_PACKET_LEN {
            self.hit(e.malformed.at(0));
            return;
        }
        let Some(kind) = MessageType::from_code(bytes[MIN_PACKET_LEN - 1]) else {
            self.hit(e.malformed.at(1));
            return;
        };
        let tlvs: Vec<RawTlv<'_>> = RawTlvIter::packet(bytes).collect();
        self.hit(e.dispatch.at2(self.peer as u32, kind.index() as u32));
        let outcome = self.handle(kind, &tlvs);
        self.hit(e.outcome.at2(kind.index() as u32, outcome as u32));
    }

    fn observe_leader_data(&mut self, tlvs: &[RawTlv<'_>]) {
        let Some(ld) = first(tlvs, t::LEADER_DATA, 8).and_then(LeaderInfo::from_bytes) else { return };
        let own = LeaderInfo::default();
        let partition = match ld.partition_id.cmp(&own.partition_id) {
            std::cmp::Ordering::Equal => 0,
            std::cmp::Ordering::Greater => 1,
            std::cmp::Ordering::Less => 2,
        };
        let weighting = match ld.weighting {
            proto::WEIGHTING => 0,
            0 => 1,
            255 => 2,
            _ => 3,
        };
        let leader_id = match ld.leader_id {
            proto::LEADER_ROUTER_ID => 0,
            0..=62 => 1,
            255 => 3,
            _ => 2,
        };
        let version = match ld.data_version.wrapping_sub(own.data_version) as i8 {
            0 => 0,
            d if d > 0 => 1,
            _ => 2,
        };
        let e = edges();
        self.hit(e.partition.at2(partition, weighting));
        self.hit(e.leader_id.at2(leader_id, version));
    }

    fn observe_mode(&mut self, tlvs: &[RawTlv<'_>]) {
        if let Some(m) = first(tlvs, t::MODE, 1) {
            let class = match m[0] {
                proto::MODE_FTD => 0,
                proto::MODE_MTD => 1,
                0 => 2,
                _ => 3,
            };
            self.hit(edges().mode.at(class));
        }
    }

    fn observe_source(&mut self, tlvs: &[RawTlv<'_>]) -> Option<u16> {
        let v = first(tlvs, t::SOURCE_ADDRESS, 2)?;
        let src = u16::from_be_bytes([v[0], v[1]]);
        let class = match src {
            proto::CHILD_RLOC16 => 0,
            proto::ROUTER_RLOC16 => 1,
            0xfffe | 0xffff => 3,
            x if x >> 9 == proto::LEADER_RLOC16 >> 9 => 2,
            _ => 4,
        };
        self.hit(edges().source.at(class));
        Some(src)
    }

    fn handle(&mut self, kind: MessageType, tlvs: &[RawTlv<'_>]) -> Outcome {
        use MessageType::*;
        self.observe_leader_data(tlvs);
        self.observe_mode(tlvs);
        match kind {
            ParentRequest => {
                let Some(challenge) = first(tlvs, t::CHALLENGE, 8) else { return Outcome::Missing };
                self.peer = Peer::Parenting;
                self.queue.push_back(proto::parent_response(&challenge[..8]));
                Outcome::Accepted
            }
            ChildIdRequest => {
                let Some(response) = first(tlvs, t::RESPONSE, 8) else { return Outcome::Missing };
                if let Some(v) = first(tlvs, t::TIMEOUT, 4) {
                    let class = match u32::from_be_bytes([v[0], v[1], v[2], v[3]]) {
                        0 => 0,
                        1..=239 => 1,
                        240 => 2,
                        241..=65535 => 3,
                        u32::MAX => 5,
                        _ => 4,
                    };
                    self.hit(edges().timeout.at(class));
                }
                if response[..8] != proto::LEADER_CHALLENGE || self.peer != Peer::Parenting {
                    return Outcome::Invalid;
                }
                self.peer = Peer::Child;
                self.since_child_update = 0;
                self.queue.push_back(proto::child_id_response());
                Outcome::Accepted
            }
            DataRequest => {
                if self.observe_source(tlvs).is_none() {
                    return Outcome::Missing;
                }
                if !matches!(self.peer, Peer::Child | Peer::Router) {
                    return Outcome::Invalid;
                }
                self.queue.push_back(proto::data_response());
                Outcome::Accepted
            }
            ChildUpdateRequest => {
                if self.observe_source(tlvs).is_none() {
                    return Outcome::Missing;
                }
                let Some(mode) = first(tlvs, t::MODE, 1) else { return Outcome::Missing };
                let timeout = first(tlvs, t::TIMEOUT, 4)
                    .map_or(proto::CHILD_TIMEOUT, |v| u32::from_be_bytes([v[0], v[1], v[2], v[3]]));
                if self.peer != Peer::Child {
                    return Outcome::Invalid;
                }
                self.queue.push_back(proto::child_update_response_from_leader(mode[0], timeout));
                Outcome::Accepted
            }
            ChildUpdateResponse => {
                if self.observe_source(tlvs).is_none() {
                    return Outcome::Missing;
                }
                if self.peer != Peer::Child {
                    return Outcome::Invalid;
                }
                Outcome::Accepted
            }
            AddressSolicit => {
                if self.observe_source(tlvs).is_none() {
                    return Outcome::Missing;
                }
                if self.peer != Peer::Child {
                    return Outcome::Invalid;
                }
                self.queue.push_back(proto::leader_advertisement(&self.routers()));
                self.peer = Peer::Router;
                self.queue.push_back(proto::address_solicit_response(&self.routers()));
                Outcome::Accepted
            }
            LinkRequest => {
                if self.observe_source(tlvs).is_none() {
                    return Outcome::Missing;
                }
                let Some(challenge) = first(tlvs, t::CHALLENGE, 8) else { return Outcome::Missing };
                if self.peer != Peer::Router {
                    return Outcome::Invalid;
                }
                self.queue.push_back(proto::link_accept(&challenge[..8]));
                Outcome::Accepted
            }
            Advertisement => {
                if self.observe_source(tlvs).is_none() {
                    return Outcome::Missing;
                }
                let Some(route) = first(tlvs, t::ROUTE64, 9) else { return Outcome::Missing };
                let seq = match route[0].wrapping_sub(proto::ROUTE_SEQUENCE) as i8 {
                    0 => 0,
                    d if d > 0 => 1,
                    _ => 2,
                };
                let mask = u64::from_be_bytes(route[1..9].try_into().expect("nine-byte route"));
                let class = match mask.count_ones() {
                    0 => 0,
                    1 => 1,
                    2 => 2,
                    3..=62 => 3,
                    _ => 4,
                };
                self.hit(edges().route.at2(seq, class));
                if self.peer != Peer::Router {
                    return Outcome::Invalid;
                }
                Outcome::Accepted
            }
            ParentResponse | ChildIdResponse | DataResponse | AddressSolicitResponse | LinkAccept => Outcome::Invalid,
        }
    }
}
