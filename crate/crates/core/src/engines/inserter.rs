use std::collections::VecDeque;

use rand::Rng;

use super::{InsertionRecord, MutationLog};
use crate::dissector::insertion_points;
use crate::mle::{recompute_parent_lengths, MlePacket, Tlv, DEFAULT_MAX_DEPTH};

pub const DEFAULT_POOL_CAPACITY: usize = 1024;
pub const DEFAULT_INSERT_PROBABILITY: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PooledTlv {
    pub source: u8,
    pub tlv: Tlv,
}

/// Bounded multiset of harvested TLVs with FIFO eviction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TlvPool {
    capacity: usize,
    items: VecDeque<PooledTlv>,
}

impl Default for TlvPool {
    fn default() -> Self {
        Self::new(DEFAULT_POOL_CAPACITY)
    }
}

impl TlvPool {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), items: VecDeque::new() }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, source: u8, tlv: Tlv) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(PooledTlv { source, tlv });
    }

    pub fn get(&self, i: usize) -> Option<&PooledTlv> {
        self.items.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &PooledTlv> {
        self.items.iter()
    }

    /// Appends every top-level and nested TLV of `packet`, in pre-order.
    pub fn harvest(&mut self, packet: &MlePacket) {
        let mut found = Vec::new();
        packet.walk(|_, tlv| found.push(tlv.clone()));
        for tlv in found {
            self.push(packet.message_type, tlv);
        }
    }
}

pub fn pool_harvest(pool: &mut TlvPool, packet: &MlePacket) {
    pool.harvest(packet);
}

/// With probability `q`, inserts one pooled TLV at a uniformly chosen
/// insertion point; with probability `gamma` the ancestors' lengths are then fixed.
pub fn tlv_insert<R: Rng + ?Sized>(
    packet: &MlePacket,
    pool: &TlvPool,
    gamma: f64,
    q: f64,
    rng: &mut R,
) -> (MlePacket, MutationLog) {
    let mut log = MutationLog::new(0);
    if pool.is_empty() || rng.random::<f64>() >= q {
        return (packet.clone(), log);
    }
    let points = insertion_points(packet);
    let point = &points[rng.random_range(0..points.len())];
    let pooled = &pool.items[rng.random_range(0..pool.len())];
    let fix = rng.random::<f64>() < gamma;
    if point.depth - 1 + pooled.tlv.depth() > DEFAULT_MAX_DEPTH {
        return (packet.clone(), log);
    }
    let mut out = packet.clone();
    if out.insert_tlv(&point.parent, point.index, pooled.tlv.clone()).is_err() {
        return (packet.clone(), log);
    }
    let mut path = point.parent.clone();
    path.push(point.index);
    if fix {
        if let Ok(fixed) = recompute_parent_lengths(&out, &path) {
            out = fixed;
        }
    }
    log.insertions.push(InsertionRecord {
        path,
        tlv_type: pooled.tlv.tlv_type,
        encoded_len: pooled.tlv.encoded_len(),
        lengths_fixed: fix,
    });
    (out, log)
}
