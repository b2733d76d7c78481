//! MLE packet and TLV data model.
//!
//! A packet is a 5-byte opaque security header, a one-byte message type and
//! an ordered list of TLV records. TLVs keep their declared length separate
//! from their payload so that deliberately inconsistent records survive an
//! encode/decode cycle unchanged.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SECURITY_HEADER_LEN: usize = 5;
pub const MIN_PACKET_LEN: usize = SECURITY_HEADER_LEN + 1;
pub const TLV_HEADER_LEN: usize = 2;
pub const MAX_TLV_LEN: usize = 255;
/// Deepest TLV level a packet may carry; top-level TLVs are level 1.
pub const DEFAULT_MAX_DEPTH: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("packet is {0} bytes, need at least {MIN_PACKET_LEN}")]
    TooShort(usize),
    #[error("unknown message type code {0:#04x}")]
    UnknownMessageType(u8),
    #[error("TLV nesting exceeds the depth cap of {0}")]
    NestingTooDeep(usize),
    #[error("no TLV at path {0:?}")]
    InvalidPath(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum MessageType {
    Advertisement = 0x00,
    LinkRequest = 0x02,
    LinkAccept = 0x03,
    DataRequest = 0x07,
    DataResponse = 0x08,
    ParentRequest = 0x09,
    ParentResponse = 0x0A,
    ChildIdRequest = 0x0B,
    ChildIdResponse = 0x0C,
    ChildUpdateRequest = 0x0D,
    ChildUpdateResponse = 0x0E,
    AddressSolicit = 0x10,
    AddressSolicitResponse = 0x11,
}

impl MessageType {
    /// Every defined message type, ordered by wire code.
    pub const ALL: [MessageType; 13] = [
        MessageType::Advertisement,
        MessageType::LinkRequest,
        MessageType::LinkAccept,
        MessageType::DataRequest,
        MessageType::DataResponse,
        MessageType::ParentRequest,
        MessageType::ParentResponse,
        MessageType::ChildIdRequest,
        MessageType::ChildIdResponse,
        MessageType::ChildUpdateRequest,
        MessageType::ChildUpdateResponse,
        MessageType::AddressSolicit,
        MessageType::AddressSolicitResponse,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.iter().copied().find(|m| m.code() == code)
    }

    /// Position of this type in [`MessageType::ALL`].
    pub fn index(self) -> usize {
        Self::ALL.iter().position(|m| *m == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageType::Advertisement => "advertisement",
            MessageType::LinkRequest => "link_request",
            MessageType::LinkAccept => "link_accept",
            MessageType::DataRequest => "data_request",
            MessageType::DataResponse => "data_response",
            MessageType::ParentRequest => "parent_request",
            MessageType::ParentResponse => "parent_response",
            MessageType::ChildIdRequest => "child_id_request",
            MessageType::ChildIdResponse => "child_id_response",
            MessageType::ChildUpdateRequest => "child_update_request",
            MessageType::ChildUpdateResponse => "child_update_response",
            MessageType::AddressSolicit => "address_solicit",
            MessageType::AddressSolicitResponse => "address_solicit_response",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|m| m.name() == name)
    }
}

impl fmt::Display for MessageType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// TLV type codes. See `PROTOCOL.md` for the field layouts.
pub mod tlv_type {
    pub const SOURCE_ADDRESS: u8 = 0x00;
    pub const MODE: u8 = 0x01;
    pub const TIMEOUT: u8 = 0x02;
    pub const CHALLENGE: u8 = 0x03;
    pub const RESPONSE: u8 = 0x04;
    pub const ROUTE64: u8 = 0x09;
    pub const ADDRESS16: u8 = 0x0A;
    pub const LEADER_DATA: u8 = 0x0B;
    pub const NETWORK_DATA: u8 = 0x0C;
    pub const LINK_MARGIN: u8 = 0x10;
    pub const STATUS: u8 = 0x11;
    pub const VERSION: u8 = 0x12;
    pub const PREFIX: u8 = 0x20;
    pub const SERVER: u8 = 0x21;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldWidth {
    Bits(u32),
    /// Variable-length tail occupying the rest of the payload.
    Variable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldSpec {
    pub name: &'static str,
    pub width: FieldWidth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TlvSpec {
    pub code: u8,
    pub name: &'static str,
    pub fields: &'static [FieldSpec],
    pub nestable: bool,
}

impl TlvSpec {
    /// Byte length of the fixed-width prefix of the layout.
    pub fn fixed_len(&self) -> usize {
        self.fields
            .iter()
            .map(|f| match f.width {
                FieldWidth::Bits(b) => b as usize / 8,
                FieldWidth::Variable => 0,
            })
            .sum()
    }

    pub fn has_variable_tail(&self) -> bool {
        matches!(self.fields.last(), Some(FieldSpec { width: FieldWidth::Variable, .. }))
    }
}

const fn bits(name: &'static str, b: u32) -> FieldSpec {
    FieldSpec { name, width: FieldWidth::Bits(b) }
}

const fn var(name: &'static str) -> FieldSpec {
    FieldSpec { name, width: FieldWidth::Variable }
}

static STANDARD_TLVS: &[TlvSpec] = &[
    TlvSpec {
        code: tlv_type::SOURCE_ADDRESS,
        name: "source_address_tlv",
        fields: &[bits("addr16", 16)],
        nestable: false,
    },
    TlvSpec { code: tlv_type::MODE, name: "mode_tlv", fields: &[bits("mode", 8)], nestable: false },
    TlvSpec { code: tlv_type::TIMEOUT, name: "timeout_tlv", fields: &[bits("timeout", 32)], nestable: false },
    TlvSpec { code: tlv_type::CHALLENGE, name: "challenge_tlv", fields: &[bits("bytes", 64)], nestable: false },
    TlvSpec { code: tlv_type::RESPONSE, name: "response_tlv", fields: &[bits("bytes", 64)], nestable: false },
    TlvSpec {
        code: tlv_type::ROUTE64,
        name: "route64_tlv",
        fields: &[bits("id_sequence", 8), bits("router_mask", 64)],
        nestable: false,
    },
    TlvSpec { code: tlv_type::ADDRESS16, name: "address16_tlv", fields: &[bits("addr16", 16)], nestable: false },
    TlvSpec {
        code: tlv_type::LEADER_DATA,
        name: "leader_data_tlv",
        fields: &[
            bits("partition_id", 32),
            bits("weighting", 8),
            bits("data_version", 8),
            bits("stable_version", 8),
            bits("leader_id", 8),
        ],
        nestable: false,
    },
    TlvSpec { code: tlv_type::NETWORK_DATA, name: "network_data_tlv", fields: &[var("data")], nestable: true },
    TlvSpec { code: tlv_type::LINK_MARGIN, name: "link_margin_tlv", fields: &[bits("margin", 8)], nestable: false },
    TlvSpec { code: tlv_type::STATUS, name: "status_tlv", fields: &[bits("status", 8)], nestable: false },
    TlvSpec { code: tlv_type::VERSION, name: "version_tlv", fields: &[bits("version", 16)], nestable: false },
    TlvSpec {
        code: tlv_type::PREFIX,
        name: "prefix_tlv",
        fields: &[bits("prefix_length", 8), var("prefix")],
        nestable: false,
    },
    TlvSpec {
        code: tlv_type::SERVER,
        name: "server_tlv",
        fields: &[bits("server16", 16), var("data")],
        nestable: false,
    },
];

/// Mapping from TLV type code to its name and field layout.
#[derive(Debug, Clone, Copy)]
pub struct TlvTypeRegistry {
    specs: &'static [TlvSpec],
}

static STANDARD_REGISTRY: TlvTypeRegistry = TlvTypeRegistry { specs: STANDARD_TLVS };

impl TlvTypeRegistry {
    pub fn standard() -> &'static TlvTypeRegistry {
        &STANDARD_REGISTRY
    }

    pub fn get(&self, code: u8) -> Option<&'static TlvSpec> {
        self.specs.iter().find(|s| s.code == code)
    }

    pub fn is_nestable(&self, code: u8) -> bool {
        self.get(code).is_some_and(|s| s.nestable)
    }

    pub fn specs(&self) -> &'static [TlvSpec] {
        self.specs
    }

    /// Dense index of a registered type, used for per-type bookkeeping.
    pub fn index_of(&self, code: u8) -> Option<usize> {
        self.specs.iter().position(|s| s.code == code)
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TlvPayload {
    Raw(Vec<u8>),
    Nested(Vec<Tlv>),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Tlv {
    pub tlv_type: u8,
    /// Length byte as it appears on the wire; not necessarily the payload size.
    pub declared_length: u8,
    pub payload: TlvPayload,
}

impl Tlv {
    /// A raw TLV whose declared length matches its payload.
    pub fn raw(tlv_type: u8, bytes: impl Into<Vec<u8>>) -> Self {
        let bytes = bytes.into();
        let declared_length = bytes.len().min(MAX_TLV_LEN) as u8;
        Tlv { tlv_type, declared_length, payload: TlvPayload::Raw(bytes) }
    }

    /// A container TLV whose declared length matches its children.
    pub fn nested(tlv_type: u8, children: Vec<Tlv>) -> Self {
        let mut tlv = Tlv { tlv_type, declared_length: 0, payload: TlvPayload::Nested(children) };
        tlv.declared_length = tlv.payload_len().min(MAX_TLV_LEN) as u8;
        tlv
    }

    pub fn u8(tlv_type: u8, v: u8) -> Self {
        Tlv::raw(tlv_type, vec![v])
    }

    pub fn u16(tlv_type: u8, v: u16) -> Self {
        Tlv::raw(tlv_type, v.to_be_bytes().to_vec())
    }

    pub fn u32(tlv_type: u8, v: u32) -> Self {
        Tlv::raw(tlv_type, v.to_be_bytes().to_vec())
    }

    /// Serialized payload size in bytes.
    pub fn payload_len(&self) -> usize {
        match &self.payload {
            TlvPayload::Raw(b) => b.len(),
            TlvPayload::Nested(children) => children.iter().map(Tlv::encoded_len).sum(),
        }
    }

    pub fn encoded_len(&self) -> usize {
        TLV_HEADER_LEN + self.payload_len()
    }

    /// True when the declared length equals the serialized payload size.
    pub fn is_consistent(&self) -> bool {
        self.declared_length as usize == self.payload_len()
    }

    pub fn raw_bytes(&self) -> Option<&[u8]> {
        match &self.payload {
            TlvPayload::Raw(b) => Some(b),
            TlvPayload::Nested(_) => None,
        }
    }

    pub fn children(&self) -> Option<&[Tlv]> {
        match &self.payload {
            TlvPayload::Nested(c) => Some(c),
            TlvPayload::Raw(_) => None,
        }
    }

    pub fn children_mut(&mut self) -> Option<&mut Vec<Tlv>> {
        match &mut self.payload {
            TlvPayload::Nested(c) => Some(c),
            TlvPayload::Raw(_) => None,
        }
    }

    /// Number of TLV levels in this subtree, counting this TLV as one.
    pub fn depth(&self) -> usize {
        1 + self.children().map_or(0, |c| c.iter().map(Tlv::depth).max().unwrap_or(0))
    }

    fn encode_into(&self, out: &mut Vec<u8>, level: usize, max_depth: usize) -> Result<(), CodecError> {
        if level > max_depth {
            return Err(CodecError::NestingTooDeep(max_depth));
        }
        out.push(self.tlv_type);
        out.push(self.declared_length);
        match &self.payload {
            TlvPayload::Raw(b) => out.extend_from_slice(b),
            TlvPayload::Nested(children) => {
                for child in children {
                    child.encode_into(out, level + 1, max_depth)?;
                }
            }
        }
        Ok(())
    }

    /// Standalone wire encoding of this TLV.
    pub fn encode(&self) -> Result<Vec<u8>, CodecError> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut out, 1, DEFAULT_MAX_DEPTH)?;
        Ok(out)
    }

    /// Sets every declared length in this subtree to the actual payload size.
    pub fn fix_lengths_recursive(&mut self) {
        if let TlvPayload::Nested(children) = &mut self.payload {
            children.iter_mut().for_each(Tlv::fix_lengths_recursive);
        }
        self.declared_length = self.payload_len().min(MAX_TLV_LEN) as u8;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MlePacket {
    pub security_header: [u8; SECURITY_HEADER_LEN],
    /// Raw message code. Mutation may leave an undefined code here; the
    /// decoder rejects such packets.
    pub message_type: u8,
    pub tlvs: Vec<Tlv>,
    /// Bytes after the last TLV too short to form a TLV header.
    pub trailer: Vec<u8>,
}

impl MlePacket {
    pub fn new(message_type: MessageType, tlvs: Vec<Tlv>) -> Self {
        MlePacket {
            security_header: [0; SECURITY_HEADER_LEN],
            message_type: message_type.code(),
            tlvs,
            trailer: Vec::new(),
        }
    }

    pub fn kind(&self) -> Option<MessageType> {
        MessageType::from_code(self.message_type)
    }

    pub fn encoded_len(&self) -> usize {
        MIN_PACKET_LEN + self.tlvs.iter().map(Tlv::encoded_len).sum::<usize>() + self.trailer.len()
    }

    pub fn encode(&self) -> Result<Vec<u8>, CodecError> {
        encode_packet(self)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        decode_packet(bytes)
    }

    pub fn tlv_at(&self, path: &[usize]) -> Option<&Tlv> {
        let (first, rest) = path.split_first()?;
        let mut tlv = self.tlvs.get(*first)?;
        for &i in rest {
            tlv = tlv.children()?.get(i)?;
        }
        Some(tlv)
    }

    pub fn tlv_at_mut(&mut self, path: &[usize]) -> Option<&mut Tlv> {
        let (first, rest) = path.split_first()?;
        let mut tlv = self.tlvs.get_mut(*first)?;
        for &i in rest {
            tlv = match &mut tlv.payload {
                TlvPayload::Nested(c) => c.get_mut(i)?,
                TlvPayload::Raw(_) => return None,
            };
        }
        Some(tlv)
    }

    /// Sibling list addressed by `parent` (empty = top level).
    pub fn container_mut(&mut self, parent: &[usize]) -> Option<&mut Vec<Tlv>> {
        if parent.is_empty() {
            Some(&mut self.tlvs)
        } else {
            self.tlv_at_mut(parent)?.children_mut()
        }
    }

    /// Inserts `tlv` at `index` within the container at `parent`.
    pub fn insert_tlv(&mut self, parent: &[usize], index: usize, tlv: Tlv) -> Result<(), CodecError> {
        let container = self.container_mut(parent).ok_or_else(|| CodecError::InvalidPath(parent.to_vec()))?;
        if index > container.len() {
            let mut p = parent.to_vec();
            p.push(index);
            return Err(CodecError::InvalidPath(p));
        }
        container.insert(index, tlv);
        Ok(())
    }

    /// Byte offset of the TLV at `path` within the encoded packet.
    pub fn tlv_offset(&self, path: &[usize]) -> Option<usize> {
        let mut offset = MIN_PACKET_LEN;
        let mut siblings: &[Tlv] = &self.tlvs;
        for (depth, &i) in path.iter().enumerate() {
            if i >= siblings.len() {
                return None;
            }
            offset += siblings[..i].iter().map(Tlv::encoded_len).sum::<usize>();
            if depth + 1 < path.len() {
                offset += TLV_HEADER_LEN;
                siblings = siblings[i].children()?;
            }
        }
        Some(offset)
    }

    /// Deepest TLV level present (0 for a packet without TLVs).
    pub fn depth(&self) -> usize {
        self.tlvs.iter().map(Tlv::depth).max().unwrap_or(0)
    }

    /// Pre-order walk over every TLV with its path.
    pub fn walk(&self, mut f: impl FnMut(&[usize], &Tlv)) {
        fn go(tlvs: &[Tlv], path: &mut Vec<usize>, f: &mut dyn FnMut(&[usize], &Tlv)) {
            for (i, t) in tlvs.iter().enumerate() {
                path.push(i);
                f(path, t);
                if let Some(c) = t.children() {
                    go(c, path, f);
                }
                path.pop();
            }
        }
        go(&self.tlvs, &mut Vec::new(), &mut f);
    }
}

/// Serializes a packet. Declared lengths are written as stored.
pub fn encode_packet(packet: &MlePacket) -> Result<Vec<u8>, CodecError> {
    encode_packet_with(packet, DEFAULT_MAX_DEPTH)
}

pub fn encode_packet_with(packet: &MlePacket, max_depth: usize) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::with_capacity(packet.encoded_len());
    out.extend_from_slice(&packet.security_header);
    out.push(packet.message_type);
    for tlv in &packet.tlvs {
        tlv.encode_into(&mut out, 1, max_depth)?;
    }
    out.extend_from_slice(&packet.trailer);
    Ok(out)
}

pub fn decode_packet(bytes: &[u8]) -> Result<MlePacket, CodecError> {
    decode_packet_with(bytes, DEFAULT_MAX_DEPTH)
}

/// Decodes a packet. Malformed TLV regions never fail: a TLV whose declared
/// length overruns its container keeps the truncated payload, and a nestable
/// TLV whose payload does not parse as a TLV sequence is kept raw.
pub fn decode_packet_with(bytes: &[u8], max_depth: usize) -> Result<MlePacket, CodecError> {
    if bytes.len() < MIN_PACKET_LEN {
        return Err(CodecError::TooShort(bytes.len()));
    }
    let code = bytes[SECURITY_HEADER_LEN];
    if MessageType::from_code(code).is_none() {
        return Err(CodecError::UnknownMessageType(code));
    }
    let mut security_header = [0u8; SECURITY_HEADER_LEN];
    security_header.copy_from_slice(&bytes[..SECURITY_HEADER_LEN]);
    let (tlvs, rest) = parse_tlvs(&bytes[MIN_PACKET_LEN..], 1, max_depth);
    Ok(MlePacket { security_header, message_type: code, tlvs, trailer: rest.to_vec() })
}

/// Leniently decodes a TLV region; returns the TLVs and any unparsed tail
/// (at most one byte).
pub fn decode_tlvs(bytes: &[u8]) -> (Vec<Tlv>, Vec<u8>) {
    let (tlvs, rest) = parse_tlvs(bytes, 1, DEFAULT_MAX_DEPTH);
    (tlvs, rest.to_vec())
}

fn parse_tlvs(mut buf: &[u8], level: usize, max_depth: usize) -> (Vec<Tlv>, &[u8]) {
    let registry = TlvTypeRegistry::standard();
    let mut tlvs = Vec::new();
    while buf.len() >= TLV_HEADER_LEN {
        let tlv_type = buf[0];
        let declared_length = buf[1];
        let avail = (declared_length as usize).min(buf.len() - TLV_HEADER_LEN);
        let body = &buf[TLV_HEADER_LEN..TLV_HEADER_LEN + avail];
        let payload = if registry.is_nestable(tlv_type) && level < max_depth {
            match parse_tlvs(body, level + 1, max_depth) {
                (children, []) => TlvPayload::Nested(children),
                _ => TlvPayload::Raw(body.to_vec()),
            }
        } else {
            TlvPayload::Raw(body.to_vec())
        };
        tlvs.push(Tlv { tlv_type, declared_length, payload });
        buf = &buf[TLV_HEADER_LEN + avail..];
    }
    (tlvs, buf)
}

/// Rewrites the declared length of every ancestor of the TLV at `path`, and
/// of the TLV itself when it is a container, to its actual payload size. An
/// empty path recomputes every TLV in the packet.
pub fn recompute_parent_lengths(packet: &MlePacket, path: &[usize]) -> Result<MlePacket, CodecError> {
    let mut out = packet.clone();
    if path.is_empty() {
        out.tlvs.iter_mut().for_each(Tlv::fix_lengths_recursive);
        return Ok(out);
    }
    if out.tlv_at(path).is_none() {
        return Err(CodecError::InvalidPath(path.to_vec()));
    }
    for end in (1..=path.len()).rev() {
        let tlv = out.tlv_at_mut(&path[..end]).expect("prefix of a valid path");
        if end < path.len() || tlv.children().is_some() {
            tlv.declared_length = tlv.payload_len().min(MAX_TLV_LEN) as u8;
        }
    }
    Ok(out)
}

/// Zero-copy view of one TLV inside a byte buffer, as a device-side parser
/// would see it.
#[derive(Debug, Clone, Copy)]
pub struct RawTlv<'a> {
    pub tlv_type: u8,
    pub declared_length: u8,
    /// Offset of the type byte within the scanned buffer.
    pub offset: usize,
    /// Value bytes, truncated at the end of the scanned region.
    pub value: &'a [u8],
    /// Everything from the start of the value to the end of the enclosing
    /// buffer, ignoring the declared length.
    pub unbounded: &'a [u8],
}

impl RawTlv<'_> {
    pub fn is_truncated(&self) -> bool {
        self.value.len() < self.declared_length as usize
    }
}

/// Iterates TLV headers in `region`, which is a window into `buffer`.
pub struct RawTlvIter<'a> {
    buffer: &'a [u8],
    pos: usize,
    end: usize,
}

impl<'a> RawTlvIter<'a> {
    pub fn new(buffer: &'a [u8], start: usize, end: usize) -> Self {
        RawTlvIter { buffer, pos: start.min(end), end: end.min(buffer.len()) }
    }

    /// Iterates the TLV region of an encoded packet.
    pub fn packet(bytes: &'a [u8]) -> Self {
        RawTlvIter::new(bytes, MIN_PACKET_LEN.min(bytes.len()), bytes.len())
    }

    /// Iterates the children inside the value of `parent`.
    pub fn children(buffer: &'a [u8], parent: &RawTlv<'a>) -> Self {
        let start = parent.offset + TLV_HEADER_LEN;
        RawTlvIter::new(buffer, start, start + parent.value.len())
    }
}

impl<'a> Iterator for RawTlvIter<'a> {
    type Item = RawTlv<'a>;

    fn next(&mut self) -> Option<RawTlv<'a>> {
        if self.end - self.pos < TLV_HEADER_LEN {
            return None;
        }
        let offset = self.pos;
        let tlv_type = self.buffer[offset];
        let declared_length = self.buffer[offset + 1];
        let start = offset + TLV_HEADER_LEN;
        let stop = (start + declared_length as usize).min(self.end);
        self.pos = stop;
        Some(RawTlv {
            tlv_type,
            declared_length,
            offset,
            value: &self.buffer[start..stop],
            unbounded: &self.buffer[start..],
        })
    }
}
