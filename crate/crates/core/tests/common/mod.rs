//! Random packet generators shared by the integration tests.
#![allow(dead_code)]

use meshfuzz::mle::{MessageType, MlePacket, Tlv, TlvTypeRegistry, DEFAULT_MAX_DEPTH};
use rand::Rng;

/// Codes outside the registry, decoded as opaque TLVs.
const UNKNOWN_TYPES: [u8; 3] = [0x30, 0x7f, 0xfe];

fn tlv_type<R: Rng>(rng: &mut R) -> u8 {
    let specs = TlvTypeRegistry::standard().specs();
    if rng.random_bool(0.1) {
        UNKNOWN_TYPES[rng.random_range(0..UNKNOWN_TYPES.len())]
    } else {
        specs[rng.random_range(0..specs.len())].code
    }
}

/// A TLV whose declared lengths match its payload at every level.
pub fn consistent_tlv<R: Rng>(rng: &mut R, level: usize) -> Tlv {
    let ty = tlv_type(rng);
    if TlvTypeRegistry::standard().is_nestable(ty) && level < DEFAULT_MAX_DEPTH {
        let n = rng.random_range(0..=3);
        let children = (0..n).map(|_| consistent_tlv(rng, level + 1)).collect();
        let t = Tlv::nested(ty, children);
        if t.is_consistent() {
            return t;
        }
        Tlv::nested(ty, Vec::new())
    } else {
        let len = rng.random_range(0..=16);
        Tlv::raw(ty, (0..len).map(|_| rng.random()).collect::<Vec<u8>>())
    }
}

/// A packet in the form the decoder produces for its own encoding.
pub fn consistent_packet<R: Rng>(rng: &mut R) -> MlePacket {
    let kind = MessageType::ALL[rng.random_range(0..MessageType::ALL.len())];
    let n = rng.random_range(0..=6);
    let mut p = MlePacket::new(kind, (0..n).map(|_| consistent_tlv(rng, 1)).collect());
    p.security_header = rng.random();
    if rng.random_bool(0.2) {
        p.trailer = vec![rng.random()];
    }
    p
}

/// Offsets of every TLV length byte in an encoded packet.
pub fn length_offsets(p: &MlePacket) -> Vec<usize> {
    let mut out = Vec::new();
    p.walk(|path, _| out.push(p.tlv_offset(path).expect("walked path exists") + 1));
    out
}

/// Encoded bytes of a consistent packet with some TLV lengths overwritten.
pub fn inconsistent_bytes<R: Rng>(rng: &mut R) -> Vec<u8> {
    let p = consistent_packet(rng);
    let mut bytes = p.encode().expect("generated depth is legal");
    let offsets = length_offsets(&p);
    if !offsets.is_empty() {
        for _ in 0..rng.random_range(1..=2) {
            let at = offsets[rng.random_range(0..offsets.len())];
            bytes[at] = rng.random();
        }
    }
    bytes
}
