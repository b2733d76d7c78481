//! Stateful fuzzing of TLV-structured mesh link establishment messages.

pub mod cli;
pub mod config;
pub mod coordinator;
pub mod coverage;
pub mod dissector;
pub mod dut;
pub mod engines;
pub mod harness;
pub mod mle;
pub mod report;
