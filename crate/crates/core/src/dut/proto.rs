//! Network constants and builders for the benign packets both sides exchange.

use crate::mle::{tlv_type as t, MessageType, MlePacket, Tlv};

pub const LEADER_RLOC16: u16 = 0x0400;
pub const CHILD_RLOC16: u16 = 0x0401;
pub const ROUTER_RLOC16: u16 = 0x0800;
pub const PARTITION_ID: u32 = 0x1234_5678;
pub const WEIGHTING: u8 = 64;
pub const DATA_VERSION: u8 = 3;
pub const STABLE_VERSION: u8 = 2;
pub const LEADER_ROUTER_ID: u8 = 1;
pub const PROTOCOL_VERSION: u16 = 4;
pub const CHILD_TIMEOUT: u32 = 240;
pub const LINK_MARGIN: u8 = 40;
pub const MODE_FTD: u8 = 0x0b;
pub const MODE_MTD: u8 = 0x08;
pub const ROUTE_SEQUENCE: u8 = 10;
pub const PREFIX_LENGTH: u8 = 64;
pub const PREFIX: [u8; 8] = [0xfd, 0x00, 0x0d, 0xb8, 0x00, 0x00, 0x00, 0x01];
pub const SERVER_DATA: [u8; 2] = [0x00, 0x01];
pub const LEADER_CHALLENGE: [u8; 8] = [0x5a, 0x17, 0xc3, 0x08, 0x91, 0x4e, 0x22, 0xb6];
pub const STATUS_SUCCESS: u8 = 0;

/// Router mask with bits for the given router ids set (bit 63 is id 0).
pub fn router_mask(ids: &[u8]) -> u64 {
    ids.iter().fold(0u64, |m, &id| m | (1u64 << (63 - (id as u32 % 64))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LeaderInfo {
    pub partition_id: u32,
    pub weighting: u8,
    pub data_version: u8,
    pub stable_version: u8,
    pub leader_id: u8,
}

impl Default for LeaderInfo {
    fn default() -> Self {
        Self {
            partition_id: PARTITION_ID,
            weighting: WEIGHTING,
            data_version: DATA_VERSION,
            stable_version: STABLE_VERSION,
            leader_id: LEADER_ROUTER_ID,
        }
    }
}

impl LeaderInfo {
    pub fn from_bytes(b: &[u8]) -> Option<Self> {
        if b.len() < 8 {
            return None;
        }
        Some(Self {
            partition_id: u32::from_be_bytes([b[0], b[1], b[2], b[3]]),
            weighting: b[4],
            data_version: b[5],
            stable_version: b[6],
            leader_id: b[7],
        })
    }

    pub fn to_tlv(self) -> Tlv {
        let mut v = self.partition_id.to_be_bytes().to_vec();
        v.extend_from_slice(&[self.weighting, self.data_version, self.stable_version, self.leader_id]);
        Tlv::raw(t::LEADER_DATA, v)
    }
}

fn route64(sequence: u8, mask: u64) -> Tlv {
    let mut v = vec![sequence];
    v.extend_from_slice(&mask.to_be_bytes());
    Tlv::raw(t::ROUTE64, v)
}

pub fn network_data() -> Tlv {
    let mut prefix = vec![PREFIX_LENGTH];
    prefix.extend_from_slice(&PREFIX);
    let mut server = LEADER_RLOC16.to_be_bytes().to_vec();
    server.extend_from_slice(&SERVER_DATA);
    Tlv::nested(t::NETWORK_DATA, vec![Tlv::raw(t::PREFIX, prefix), Tlv::raw(t::SERVER, server)])
}

fn packet(m: MessageType, tlvs: Vec<Tlv>) -> MlePacket {
    MlePacket::new(m, tlvs)
}

// Joiner to leader.

pub fn parent_request(mode: u8, challenge: [u8; 8]) -> MlePacket {
    packet(
        MessageType::ParentRequest,
        vec![Tlv::u8(t::MODE, mode), Tlv::raw(t::CHALLENGE, challenge), Tlv::u16(t::VERSION, PROTOCOL_VERSION)],
    )
}

pub fn child_id_request(response: &[u8], mode: u8) -> MlePacket {
    packet(
        MessageType::ChildIdRequest,
        vec![
            Tlv::raw(t::RESPONSE, response.to_vec()),
            Tlv::u8(t::MODE, mode),
            Tlv::u32(t::TIMEOUT, CHILD_TIMEOUT),
            Tlv::u16(t::VERSION, PROTOCOL_VERSION),
        ],
    )
}

pub fn data_request(src: u16) -> MlePacket {
    packet(MessageType::DataRequest, vec![Tlv::u16(t::SOURCE_ADDRESS, src)])
}

pub fn child_update_request_from_child(src: u16, mode: u8, leader: LeaderInfo) -> MlePacket {
    packet(
        MessageType::ChildUpdateRequest,
        vec![
            Tlv::u16(t::SOURCE_ADDRESS, src),
            Tlv::u8(t::MODE, mode),
            Tlv::u32(t::TIMEOUT, CHILD_TIMEOUT),
            leader.to_tlv(),
        ],
    )
}

pub fn child_update_response_from_child(src: u16, mode: u8, leader: LeaderInfo) -> MlePacket {
    packet(
        MessageType::ChildUpdateResponse,
        vec![Tlv::u16(t::SOURCE_ADDRESS, src), Tlv::u8(t::MODE, mode), leader.to_tlv()],
    )
}

pub fn address_solicit(src: u16) -> MlePacket {
    packet(MessageType::AddressSolicit, vec![Tlv::u16(t::SOURCE_ADDRESS, src), Tlv::u16(t::VERSION, PROTOCOL_VERSION)])
}

pub fn link_request(src: u16, challenge: [u8; 8]) -> MlePacket {
    packet(
        MessageType::LinkRequest,
        vec![
            Tlv::u16(t::SOURCE_ADDRESS, src),
            Tlv::raw(t::CHALLENGE, challenge),
            Tlv::u16(t::VERSION, PROTOCOL_VERSION),
        ],
    )
}

pub fn router_advertisement(src: u16, leader: LeaderInfo, sequence: u8, mask: u64) -> MlePacket {
    packet(MessageType::Advertisement, vec![Tlv::u16(t::SOURCE_ADDRESS, src), leader.to_tlv(), route64(sequence, mask)])
}

// Leader to joiner.

pub fn parent_response(response: &[u8]) -> MlePacket {
    packet(
        MessageType::ParentResponse,
        vec![
            Tlv::u16(t::SOURCE_ADDRESS, LEADER_RLOC16),
            LeaderInfo::default().to_tlv(),
            Tlv::raw(t::RESPONSE, response.to_vec()),
            Tlv::raw(t::CHALLENGE, LEADER_CHALLENGE),
            Tlv::u8(t::LINK_MARGIN, LINK_MARGIN),
            Tlv::u16(t::VERSION, PROTOCOL_VERSION),
        ],
    )
}

pub fn child_id_response() -> MlePacket {
    packet(
        MessageType::ChildIdResponse,
        vec![
            Tlv::u16(t::SOURCE_ADDRESS, LEADER_RLOC16),
            LeaderInfo::default().to_tlv(),
            Tlv::u16(t::ADDRESS16, CHILD_RLOC16),
            network_data(),
        ],
    )
}

pub fn data_response() -> MlePacket {
    packet(
        MessageType::DataResponse,
        vec![Tlv::u16(t::SOURCE_ADDRESS, LEADER_RLOC16), LeaderInfo::default().to_tlv(), network_data()],
    )
}

pub fn child_update_request_from_leader() -> MlePacket {
    packet(
        MessageType::ChildUpdateRequest,
        vec![Tlv::u16(t::SOURCE_ADDRESS, LEADER_RLOC16), LeaderInfo::default().to_tlv()],
    )
}

pub fn child_update_response_from_leader(mode: u8, timeout: u32) -> MlePacket {
    packet(
        MessageType::ChildUpdateResponse,
        vec![
            Tlv::u16(t::SOURCE_ADDRESS, LEADER_RLOC16),
            Tlv::u8(t::MODE, mode),
            Tlv::u32(t::TIMEOUT, timeout),
            LeaderInfo::default().to_tlv(),
        ],
    )
}

pub fn leader_advertisement(routers: &[u8]) -> MlePacket {
    router_advertisement(LEADER_RLOC16, LeaderInfo::default(), ROUTE_SEQUENCE, router_mask(routers))
}

pub fn address_solicit_response(routers: &[u8]) -> MlePacket {
    packet(
        MessageType::AddressSolicitResponse,
        vec![
            Tlv::u8(t::STATUS, STATUS_SUCCESS),
            Tlv::u16(t::ADDRESS16, ROUTER_RLOC16),
            route64(ROUTE_SEQUENCE, router_mask(routers)),
        ],
    )
}

pub fn link_accept(response: &[u8]) -> MlePacket {
    packet(
        MessageType::LinkAccept,
        vec![
            Tlv::u16(t::SOURCE_ADDRESS, LEADER_RLOC16),
            Tlv::raw(t::RESPONSE, response.to_vec()),
            Tlv::u8(t::LINK_MARGIN, LINK_MARGIN),
            LeaderInfo::default().to_tlv(),
            Tlv::u16(t::VERSION, PROTOCOL_VERSION),
        ],
    )
}
