//! Edge-coverage bookkeeping.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of edge slots in every map.
pub const MAP_SIZE: usize = 4096;
const WORDS: usize = MAP_SIZE / 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("edge id {0} is outside the {MAP_SIZE}-slot map")]
pub struct EdgeOutOfRange(pub u32);

/// Which map drives coverage feedback.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageSource {
    DutGrey,
    GeneratorBlack,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageMap {
    cumulative: [u64; WORDS],
    scratch: [u64; WORDS],
    cumulative_count: usize,
    reachable: usize,
}

impl CoverageMap {
    /// `reachable` is the number of edges the instrumented target can hit.
    pub fn new(reachable: usize) -> Self {
        Self { cumulative: [0; WORDS], scratch: [0; WORDS], cumulative_count: 0, reachable: reachable.min(MAP_SIZE) }
    }

    pub fn record(&mut self, edge: u32) -> Result<(), EdgeOutOfRange> {
        let i = edge as usize;
        if i >= MAP_SIZE {
            return Err(EdgeOutOfRange(edge));
        }
        self.scratch[i / 64] |= 1 << (i % 64);
        Ok(())
    }

    pub fn record_edges(&mut self, edges: &[u32]) -> Result<(), EdgeOutOfRange> {
        edges.iter().try_for_each(|&e| self.record(e))
    }

    /// Merges the scratch bits into the cumulative map and returns how many were new.
    pub fn commit_iteration(&mut self) -> u64 {
        let mut fresh = 0;
        for (c, s) in self.cumulative.iter_mut().zip(self.scratch.iter_mut()) {
            fresh += (*s & !*c).count_ones() as u64;
            *c |= *s;
            *s = 0;
        }
        self.cumulative_count += fresh as usize;
        fresh
    }

    /// Drops uncommitted hits.
    pub fn clear_scratch(&mut self) {
        self.scratch = [0; WORDS];
    }

    pub fn scratch_count(&self) -> usize {
        self.scratch.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn cumulative_count(&self) -> usize {
        self.cumulative_count
    }

    pub fn reachable(&self) -> usize {
        self.reachable
    }

    pub fn is_set(&self, edge: u32) -> bool {
        let i = edge as usize;
        i < MAP_SIZE && self.cumulative[i / 64] & (1 << (i % 64)) != 0
    }

    pub fn in_scratch(&self, edge: u32) -> bool {
        let i = edge as usize;
        i < MAP_SIZE && self.scratch[i / 64] & (1 << (i % 64)) != 0
    }

    pub fn coverage_fraction(&self) -> f64 {
        if self.reachable == 0 {
            0.0
        } else {
            (self.cumulative_count as f64 / self.reachable as f64).min(1.0)
        }
    }

    /// Cumulative edge ids in ascending order.
    pub fn edges(&self) -> Vec<u32> {
        (0..MAP_SIZE as u32).filter(|&e| self.is_set(e)).collect()
    }
}
