//! Field extraction over the MLE grammar.
//!
//! Every packet is flattened into a list of [`FieldDescriptor`]s: the message
//! type byte, each TLV's type and length bytes, each registered layout field,
//! and one descriptor per byte for variable-length tails and unknown payloads.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mle::{
    FieldWidth, MessageType, MlePacket, Tlv, TlvPayload, TlvTypeRegistry, DEFAULT_MAX_DEPTH, MIN_PACKET_LEN,
    SECURITY_HEADER_LEN, TLV_HEADER_LEN,
};

/// Per-byte descriptors emitted for one variable-length tail, at most.
pub const MAX_TAIL_DESCRIPTORS: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FieldError {
    #[error("value {value} does not fit in {bit_width} bits")]
    OutOfDomain { value: u64, bit_width: u32 },
    #[error("descriptor {0} no longer matches the packet structure")]
    Stale(String),
}

/// Where a field lives in the packet model.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FieldLocator {
    MessageType,
    TlvType(Vec<usize>),
    TlvLength(Vec<usize>),
    /// `len` bytes at `offset` within the raw payload of the TLV at `tlv`.
    Payload {
        tlv: Vec<usize>,
        offset: usize,
        len: usize,
    },
    Trailer(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldDescriptor {
    /// Hierarchical name such as `network_data_tlv[0].prefix_tlv[0].prefix_length`.
    pub path: String,
    /// Position of the field's first bit in the encoded packet.
    pub bit_offset: usize,
    pub bit_width: u32,
    pub locator: FieldLocator,
}

impl FieldDescriptor {
    /// |V_f|, the number of values the field can hold.
    pub fn domain_size(&self) -> u128 {
        1u128 << self.bit_width
    }

    pub fn max_value(&self) -> u64 {
        if self.bit_width >= 64 {
            u64::MAX
        } else {
            (1u64 << self.bit_width) - 1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DissectedPacket {
    pub message_type: Option<MessageType>,
    pub fields: Vec<FieldDescriptor>,
}

impl DissectedPacket {
    /// |F_P|, the number of fields in the packet.
    pub fn field_count(&self) -> usize {
        self.fields.len()
    }

    pub fn find(&self, path: &str) -> Option<&FieldDescriptor> {
        self.fields.iter().find(|d| d.path == path)
    }
}

/// A legal place to insert a TLV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsertionPoint {
    /// Container TLV path; empty for the top level.
    pub parent: Vec<usize>,
    /// Index among the container's children the new TLV will take.
    pub index: usize,
    /// Level the inserted TLV will sit at (1 = top level).
    pub depth: usize,
}

pub fn dissect(packet: &MlePacket) -> DissectedPacket {
    let mut fields = Vec::new();
    fields.push(FieldDescriptor {
        path: "message_type".to_string(),
        bit_offset: SECURITY_HEADER_LEN * 8,
        bit_width: 8,
        locator: FieldLocator::MessageType,
    });
    let mut offset = MIN_PACKET_LEN;
    let mut path = Vec::new();
    dissect_level(&packet.tlvs, "", &mut path, &mut offset, &mut fields);
    for (i, _) in packet.trailer.iter().enumerate() {
        fields.push(FieldDescriptor {
            path: format!("trailer[{i}]"),
            bit_offset: (offset + i) * 8,
            bit_width: 8,
            locator: FieldLocator::Trailer(i),
        });
    }
    DissectedPacket { message_type: packet.kind(), fields }
}

fn tlv_name(code: u8) -> String {
    match TlvTypeRegistry::standard().get(code) {
        Some(spec) => spec.name.to_string(),
        None => format!("tlv_{code:#04x}"),
    }
}

fn dissect_level(
    tlvs: &[Tlv],
    prefix: &str,
    path: &mut Vec<usize>,
    offset: &mut usize,
    out: &mut Vec<FieldDescriptor>,
) {
    let mut seen: HashMap<u8, usize> = HashMap::new();
    for (i, tlv) in tlvs.iter().enumerate() {
        let n = seen.entry(tlv.tlv_type).or_insert(0);
        let name = format!("{prefix}{}[{n}]", tlv_name(tlv.tlv_type));
        *n += 1;
        path.push(i);
        let start = *offset;
        out.push(FieldDescriptor {
            path: format!("{name}.type"),
            bit_offset: start * 8,
            bit_width: 8,
            locator: FieldLocator::TlvType(path.clone()),
        });
        out.push(FieldDescriptor {
            path: format!("{name}.length"),
            bit_offset: (start + 1) * 8,
            bit_width: 8,
            locator: FieldLocator::TlvLength(path.clone()),
        });
        let body = start + TLV_HEADER_LEN;
        match &tlv.payload {
            TlvPayload::Nested(children) => {
                let mut child_offset = body;
                dissect_level(children, &format!("{name}."), path, &mut child_offset, out);
            }
            TlvPayload::Raw(bytes) => dissect_raw(tlv.tlv_type, bytes.len(), &name, path, body, out),
        }
        *offset = start + tlv.encoded_len();
        path.pop();
    }
}

fn dissect_raw(code: u8, len: usize, name: &str, path: &[usize], body: usize, out: &mut Vec<FieldDescriptor>) {
    let per_byte = |label: &str, from: usize, out: &mut Vec<FieldDescriptor>| {
        for j in 0..(len - from).min(MAX_TAIL_DESCRIPTORS) {
            out.push(FieldDescriptor {
                path: format!("{name}.{label}[{j}]"),
                bit_offset: (body + from + j) * 8,
                bit_width: 8,
                locator: FieldLocator::Payload { tlv: path.to_vec(), offset: from + j, len: 1 },
            });
        }
    };
    let Some(spec) = TlvTypeRegistry::standard().get(code) else {
        per_byte("byte", 0, out);
        return;
    };
    let mut pos = 0;
    for field in spec.fields {
        match field.width {
            FieldWidth::Bits(bits) => {
                let w = bits as usize / 8;
                if len - pos < w {
                    per_byte("raw", pos, out);
                    return;
                }
                out.push(FieldDescriptor {
                    path: format!("{name}.{}", field.name),
                    bit_offset: (body + pos) * 8,
                    bit_width: bits,
                    locator: FieldLocator::Payload { tlv: path.to_vec(), offset: pos, len: w },
                });
                pos += w;
            }
            FieldWidth::Variable => {
                per_byte(field.name, pos, out);
                return;
            }
        }
    }
    if pos < len {
        per_byte("extra", pos, out);
    }
}

/// Valid insertion boundaries: every gap between top-level TLVs, plus the
/// end of each nestable container whose children stay under the depth cap.
pub fn insertion_points(packet: &MlePacket) -> Vec<InsertionPoint> {
    let mut points: Vec<InsertionPoint> =
        (0..=packet.tlvs.len()).map(|index| InsertionPoint { parent: Vec::new(), index, depth: 1 }).collect();
    let registry = TlvTypeRegistry::standard();
    packet.walk(|path, tlv| {
        if let Some(children) = tlv.children() {
            if registry.is_nestable(tlv.tlv_type) && path.len() < DEFAULT_MAX_DEPTH {
                points.push(InsertionPoint { parent: path.to_vec(), index: children.len(), depth: path.len() + 1 });
            }
        }
    });
    points
}

fn check_offset(packet: &MlePacket, d: &FieldDescriptor) -> Result<(), FieldError> {
    let expected = match &d.locator {
        FieldLocator::MessageType => Some(SECURITY_HEADER_LEN),
        FieldLocator::TlvType(p) => packet.tlv_offset(p),
        FieldLocator::TlvLength(p) => packet.tlv_offset(p).map(|o| o + 1),
        FieldLocator::Payload { tlv, offset, .. } => packet.tlv_offset(tlv).map(|o| o + TLV_HEADER_LEN + offset),
        FieldLocator::Trailer(i) => Some(packet.encoded_len() - packet.trailer.len() + i),
    };
    if expected.map(|o| o * 8) == Some(d.bit_offset) {
        Ok(())
    } else {
        Err(FieldError::Stale(d.path.clone()))
    }
}

fn raw_slice<'a>(packet: &'a MlePacket, tlv: &[usize], offset: usize, len: usize) -> Option<&'a [u8]> {
    packet.tlv_at(tlv)?.raw_bytes()?.get(offset..offset + len)
}

pub fn read_field(packet: &MlePacket, d: &FieldDescriptor) -> Result<u64, FieldError> {
    check_offset(packet, d)?;
    let stale = || FieldError::Stale(d.path.clone());
    Ok(match &d.locator {
        FieldLocator::MessageType => packet.message_type as u64,
        FieldLocator::TlvType(p) => packet.tlv_at(p).ok_or_else(stale)?.tlv_type as u64,
        FieldLocator::TlvLength(p) => packet.tlv_at(p).ok_or_else(stale)?.declared_length as u64,
        FieldLocator::Payload { tlv, offset, len } => {
            let bytes = raw_slice(packet, tlv, *offset, *len).ok_or_else(stale)?;
            bytes.iter().fold(0u64, |acc, b| (acc << 8) | *b as u64)
        }
        FieldLocator::Trailer(i) => *packet.trailer.get(*i).ok_or_else(stale)? as u64,
    })
}

/// In-place variant of [`write_field`].
pub fn write_field_in_place(packet: &mut MlePacket, d: &FieldDescriptor, value: u64) -> Result<(), FieldError> {
    if d.bit_width < 64 && value > d.max_value() {
        return Err(FieldError::OutOfDomain { value, bit_width: d.bit_width });
    }
    check_offset(packet, d)?;
    let stale = || FieldError::Stale(d.path.clone());
    match &d.locator {
        FieldLocator::MessageType => packet.message_type = value as u8,
        FieldLocator::TlvType(p) => packet.tlv_at_mut(p).ok_or_else(stale)?.tlv_type = value as u8,
        FieldLocator::TlvLength(p) => packet.tlv_at_mut(p).ok_or_else(stale)?.declared_length = value as u8,
        FieldLocator::Payload { tlv, offset, len } => {
            let t = packet.tlv_at_mut(tlv).ok_or_else(stale)?;
            let TlvPayload::Raw(bytes) = &mut t.payload else {
                return Err(stale());
            };
            let slot = bytes.get_mut(*offset..offset + len).ok_or_else(stale)?;
            for (k, b) in slot.iter_mut().enumerate() {
                *b = (value >> (8 * (len - 1 - k))) as u8;
            }
        }
        FieldLocator::Trailer(i) => *packet.trailer.get_mut(*i).ok_or_else(stale)? = value as u8,
    }
    Ok(())
}

pub fn write_field(packet: &MlePacket, d: &FieldDescriptor, value: u64) -> Result<MlePacket, FieldError> {
    let mut out = packet.clone();
    write_field_in_place(&mut out, d, value)?;
    Ok(out)
}
