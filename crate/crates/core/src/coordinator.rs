//! Campaign orchestration: the lock-step iteration loop, the reboot-count
//! epoch oracle, crash records and replay.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{CampaignConfig, ConfigError};
use crate::coverage::CoverageSource;
use crate::dut::{CrashKind, Joiner, Leader, MleState, NodeConfig, NodeRole, NodeType, StepOutcome, VulnId};
use crate::engines::{chain_apply, ChainState, FuzzerChain};
use crate::mle::encode_packet;

/// Upper bound on generator packets delivered within one step.
pub const MAX_PACKETS_PER_STEP: usize = 4;

/// Seed of iteration `i`; every iteration replays in isolation from it.
/// The campaign seed is scrambled first so nearby campaign seeds do not
/// share iteration seeds.
pub fn iteration_seed(campaign_seed: u64, i: u64) -> u64 {
    campaign_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ i
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

/// One input event seen by the DUT.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Tick,
    Packet {
        #[serde(with = "hex_bytes")]
        bytes: Vec<u8>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrashRecord {
    pub iteration: u64,
    /// Seed the DUT and the mutators ran under.
    pub seed: u64,
    pub vuln: VulnId,
    pub kind: CrashKind,
    pub dut_state: MleState,
    pub node_type: NodeType,
    pub sanitizer: bool,
    pub leader_data_probability: f64,
    /// Every DUT input of the iteration up to and including the crashing packet.
    pub events: Vec<TraceEvent>,
}

impl CrashRecord {
    pub fn file_name(&self) -> String {
        format!("crash_{}_{}.json", self.iteration, self.vuln)
    }

    pub fn packets(&self) -> impl Iterator<Item = &[u8]> {
        self.events.iter().filter_map(|e| match e {
            TraceEvent::Packet { bytes } => Some(bytes.as_slice()),
            TraceEvent::Tick => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationResult {
    pub iteration: u64,
    pub crash: Option<CrashRecord>,
    /// Every crash of the iteration in order, the recorded one first.
    pub crash_hits: Vec<VulnId>,
    /// New DUT edges.
    pub c_i: u64,
    /// New edges on the configured feedback channel.
    pub feedback_c_i: u64,
    pub packets: u64,
    pub n_i: usize,
    pub final_role: NodeRole,
    pub final_state: MleState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub iteration: u64,
    pub c_i: u64,
    pub feedback_c_i: u64,
    pub cumulative_edges: u64,
    pub coverage_fraction: f64,
    pub packets: u64,
    pub n_i: usize,
    pub final_role: NodeRole,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub crashes: Vec<VulnId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VulnStats {
    pub first_hit: u64,
    pub hits: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrashSummary {
    pub iteration: u64,
    pub vuln: VulnId,
    pub kind: CrashKind,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub config: CampaignConfig,
    pub reachable_edges: u64,
    pub final_edges: u64,
    pub final_coverage: f64,
    pub vulns: BTreeMap<VulnId, VulnStats>,
    pub crash_corpus: Vec<CrashSummary>,
    pub iterations: Vec<IterationRow>,
    #[serde(skip)]
    pub crashes: Vec<CrashRecord>,
}

impl CampaignReport {
    pub fn first_hit(&self, v: VulnId) -> Option<u64> {
        self.vulns.get(&v).map(|s| s.first_hit)
    }

    pub fn coverage_csv(&self) -> String {
        let mut out = String::from("iteration,cumulative_edges,coverage_fraction,c_i\n");
        for r in &self.iterations {
            out.push_str(&format!("{},{},{:.6},{}\n", r.iteration, r.cumulative_edges, r.coverage_fraction, r.c_i));
        }
        out
    }

    /// Writes `report.json`, `coverage.csv` and one JSON file per crash under `dir/crashes`.
    pub fn write_artifacts(&self, dir: &std::path::Path) -> std::io::Result<()> {
        let crash_dir = dir.join("crashes");
        std::fs::create_dir_all(&crash_dir)?;
        let json = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(dir.join("report.json"), json + "\n")?;
        std::fs::write(dir.join("coverage.csv"), self.coverage_csv())?;
        for c in &self.crashes {
            let json = serde_json::to_string_pretty(c).map_err(std::io::Error::other)?;
            std::fs::write(crash_dir.join(c.file_name()), json + "\n")?;
        }
        Ok(())
    }
}

/// What one lock-step exchange produced.
struct Exchange {
    crash: Option<CrashRecord>,
    hits: Vec<VulnId>,
    packets: u64,
}

/// The generator and DUT pair plus the fuzzer chain driving them.
#[derive(Debug, Clone)]
pub struct Campaign {
    cfg: CampaignConfig,
    dut: Joiner,
    leader: Leader,
    chain: ChainState,
    next_iteration: u64,
}

impl Campaign {
    pub fn new(cfg: CampaignConfig) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let chain = ChainState::new(&cfg.fuzzers)?;
        Ok(Self { dut: Joiner::new(cfg.node_config(cfg.seed)), leader: Leader::new(), chain, cfg, next_iteration: 1 })
    }

    pub fn config(&self) -> &CampaignConfig {
        &self.cfg
    }

    pub fn dut(&self) -> &Joiner {
        &self.dut
    }

    pub fn leader(&self) -> &Leader {
        &self.leader
    }

    pub fn chain_state(&self) -> &ChainState {
        &self.chain
    }

    /// Runs iterations `1..=iterations` and assembles the report.
    pub fn run(&mut self) -> CampaignReport {
        let mut rows = Vec::with_capacity(self.cfg.iterations as usize);
        let mut vulns: BTreeMap<VulnId, VulnStats> = BTreeMap::new();
        let mut crashes = Vec::new();
        for _ in 0..self.cfg.iterations {
            let r = self.run_iteration();
            for &v in &r.crash_hits {
                vulns.entry(v).or_insert(VulnStats { first_hit: r.iteration, hits: 0 }).hits += 1;
            }
            let cov = self.dut.coverage();
            rows.push(IterationRow {
                iteration: r.iteration,
                c_i: r.c_i,
                feedback_c_i: r.feedback_c_i,
                cumulative_edges: cov.cumulative_count() as u64,
                coverage_fraction: cov.coverage_fraction(),
                packets: r.packets,
                n_i: r.n_i,
                final_role: r.final_role,
                crashes: r.crash_hits.clone(),
            });
            crashes.extend(r.crash);
        }
        let cov = self.dut.coverage();
        CampaignReport {
            config: self.cfg.clone(),
            reachable_edges: cov.reachable() as u64,
            final_edges: cov.cumulative_count() as u64,
            final_coverage: cov.coverage_fraction(),
            vulns,
            crash_corpus: crashes
                .iter()
                .map(|c: &CrashRecord| CrashSummary {
                    iteration: c.iteration,
                    vuln: c.vuln,
                    kind: c.kind,
                    file: c.file_name(),
                })
                .collect(),
            iterations: rows,
            crashes,
        }
    }

    /// One fuzzing iteration: factory reset, lock-step exchange, coverage commit.
    pub fn run_iteration(&mut self) -> IterationResult {
        let i = self.next_iteration;
        self.next_iteration += 1;
        let seed = iteration_seed(self.cfg.seed, i);
        self.dut.reseed(seed);
        self.leader.reset();
        self.chain.begin_iteration(i);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fuzzers = self.cfg.fuzzers.clone();
        let ex = self.exchange(i, seed, &fuzzers, &mut rng, true);
        let (c_i, feedback_c_i) = self.commit();
        let n_i = self.chain.coverage_log().n_i();
        self.chain.end_iteration(feedback_c_i).expect("hyperparameters were validated");
        let final_state = self.dut.state();
        self.dut.hard_reset();
        self.leader.reset();
        IterationResult {
            iteration: i,
            crash: ex.crash,
            crash_hits: ex.hits,
            c_i,
            feedback_c_i,
            packets: ex.packets,
            n_i,
            final_role: final_state.role(),
            final_state,
        }
    }

    fn commit(&mut self) -> (u64, u64) {
        let dut = self.dut.coverage_mut().commit_iteration();
        let gen = self.leader.coverage_mut().commit_iteration();
        let feedback = match self.cfg.effective_source() {
            CoverageSource::DutGrey => dut,
            CoverageSource::GeneratorBlack => gen,
        };
        (dut, feedback)
    }

    /// Lock-step generator/DUT dialogue for `budget` steps. A crashed DUT is
    /// restarted and the dialogue continues.
    fn exchange(&mut self, i: u64, seed: u64, fuzzers: &FuzzerChain, rng: &mut ChaCha8Rng, trace: bool) -> Exchange {
        let mut events = Vec::new();
        let mut ex = Exchange { crash: None, hits: Vec::new(), packets: 0 };
        for _ in 0..self.cfg.budget {
            let recording = trace && ex.crash.is_none();
            if recording {
                events.push(TraceEvent::Tick);
            }
            for p in self.dut.tick() {
                self.leader.receive(&p);
            }
            self.leader.tick();
            for _ in 0..MAX_PACKETS_PER_STEP {
                let Some(pkt) = self.leader.generate_next() else { break };
                let (mutated, _) = chain_apply(fuzzers, &mut self.chain, &pkt, rng);
                let Ok(bytes) = encode_packet(&mutated) else { continue };
                ex.packets += 1;
                let outcome = self.dut.step_bytes(&bytes).expect("a crashed DUT is restarted immediately");
                if recording {
                    events.push(TraceEvent::Packet { bytes });
                }
                match outcome {
                    StepOutcome::Crash(kind, vuln) => {
                        ex.hits.push(vuln);
                        if ex.crash.is_none() {
                            ex.crash = Some(CrashRecord {
                                iteration: i,
                                seed,
                                vuln,
                                kind,
                                dut_state: self.dut.state(),
                                node_type: self.cfg.dut.node_type,
                                sanitizer: self.cfg.dut.sanitizer,
                                leader_data_probability: self.cfg.dut.leader_data_probability,
                                events: std::mem::take(&mut events),
                            });
                        }
                        self.dut.restart();
                        self.leader.peer_lost();
                        break;
                    }
                    StepOutcome::Ok(responses) => responses.iter().for_each(|r| self.leader.receive(r)),
                    StepOutcome::Silent => {}
                }
            }
        }
        ex
    }
}

pub fn run_campaign(cfg: &CampaignConfig) -> Result<CampaignReport, ConfigError> {
    Ok(Campaign::new(cfg.clone())?.run())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochResult {
    pub c0: u64,
    pub cf: u64,
    pub epoch_size: u64,
    /// True when the reboot count exceeds the framework's own resets.
    pub unexpected_reboot: bool,
    /// Crashes observed in-loop, per iteration; the oracle does not use them.
    pub crashes: Vec<(u64, VulnId)>,
}

/// One physical-mode epoch over `n` iterations of the configured chain.
pub fn run_fuzzing_epoch(cfg: &CampaignConfig, n: u32) -> Result<EpochResult, ConfigError> {
    let chains = vec![cfg.fuzzers.clone(); n as usize];
    epoch(cfg, &chains, true)
}

/// Epoch where iteration `j` runs `chains[j]`, each with its own engine state.
pub fn run_fuzzing_epoch_with(cfg: &CampaignConfig, chains: &[FuzzerChain]) -> Result<EpochResult, ConfigError> {
    epoch(cfg, chains, false)
}

fn epoch(cfg: &CampaignConfig, chains: &[FuzzerChain], shared: bool) -> Result<EpochResult, ConfigError> {
    let mut base = cfg.clone();
    base.mode = crate::config::Mode::PhysicalEpoch;
    let mut c = Campaign::new(base)?;
    let mut states = if shared {
        vec![ChainState::new(&cfg.fuzzers)?]
    } else {
        chains.iter().map(ChainState::new).collect::<Result<Vec<_>, _>>()?
    };
    c.dut.hard_reset();
    let c0 = c.dut.read_reboot_count();
    c.dut.soft_reset();
    let mut crashes = Vec::new();
    for (j, chain) in chains.iter().enumerate() {
        let i = j as u64 + 1;
        let seed = iteration_seed(cfg.seed, i);
        let state = &mut states[if shared { 0 } else { j }];
        std::mem::swap(&mut c.chain, state);
        c.chain.begin_iteration(i);
        c.leader.reset();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ex = c.exchange(i, seed, chain, &mut rng, false);
        let (_, feedback) = c.commit();
        c.chain.end_iteration(feedback).expect("hyperparameters were validated");
        std::mem::swap(&mut c.chain, state);
        crashes.extend(ex.hits.into_iter().map(|v| (i, v)));
        c.dut.soft_reset();
    }
    // One clean attach before the final read.
    c.leader.reset();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    c.exchange(0, cfg.seed, &FuzzerChain::default(), &mut rng, false);
    let cf = c.dut.read_reboot_count();
    let n = chains.len() as u64;
    Ok(EpochResult { c0, cf, epoch_size: n, unexpected_reboot: cf > c0 + n + 1, crashes })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayResult {
    pub crash: Option<(CrashKind, VulnId)>,
    pub packets: u64,
    pub final_state: MleState,
}

impl ReplayResult {
    pub fn reproduces(&self, record: &CrashRecord) -> bool {
        self.crash.map(|(_, v)| v) == Some(record.vuln)
    }
}

/// Re-delivers a record's inputs to a fresh DUT built from the record.
pub fn replay(record: &CrashRecord) -> ReplayResult {
    replay_with_sanitizer(record, record.sanitizer)
}

pub fn replay_with_sanitizer(record: &CrashRecord, sanitizer: bool) -> ReplayResult {
    let target = match record.node_type {
        NodeType::Ftd => NodeRole::Router,
        NodeType::Mtd => NodeRole::Child,
    };
    let cfg = NodeConfig {
        node_type: record.node_type,
        role_target: target,
        sanitizer,
        leader_data_probability: record.leader_data_probability,
        seed: record.seed,
    };
    let mut dut = Joiner::new(cfg);
    let mut packets = 0;
    for e in &record.events {
        match e {
            TraceEvent::Tick => {
                dut.tick();
            }
            TraceEvent::Packet { bytes } => {
                packets += 1;
                if let Ok(StepOutcome::Crash(kind, vuln)) = dut.step_bytes(bytes) {
                    return ReplayResult { crash: Some((kind, vuln)), packets, final_state: dut.state() };
                }
            }
        }
    }
    ReplayResult { crash: None, packets, final_state: dut.state() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engines::{CoverageParams, EngineConfig};
    use crate::mle::MessageType;

    const PREFIX_LENGTH: &str = "network_data_tlv[0].prefix_tlv[0].prefix_length";

    fn cfg(node_type: NodeType, fuzzers: Vec<EngineConfig>, iterations: u64) -> CampaignConfig {
        CampaignConfig { iterations, ..CampaignConfig::new(node_type, fuzzers) }
    }

    fn prefix_max(times: Option<u32>) -> EngineConfig {
        EngineConfig::SetField { message: MessageType::ChildIdResponse, path: PREFIX_LENGTH.into(), value: 255, times }
    }

    #[test]
    fn iteration_seeds_differ_across_campaigns() {
        assert_ne!(iteration_seed(1, 1), iteration_seed(2, 1));
        assert_ne!(iteration_seed(1, 2), iteration_seed(2, 3));
        assert_eq!(iteration_seed(0, 5), 5);
    }

    #[test]
    fn benign_iteration_reaches_router() {
        let mut c = Campaign::new(cfg(NodeType::Ftd, vec![], 1)).unwrap();
        let r = c.run_iteration();
        assert_eq!(r.final_role, NodeRole::Router);
        assert!(r.c_i > 0);
        assert!(r.crash.is_none());
        assert_eq!(r.n_i, 0);
    }

    #[test]
    fn mtd_stays_child() {
        let mut c = Campaign::new(cfg(NodeType::Mtd, vec![], 1)).unwrap();
        assert_eq!(c.run_iteration().final_role, NodeRole::Child);
    }

    #[test]
    fn zero_budget_sends_nothing() {
        let mut conf = cfg(NodeType::Ftd, vec![], 1);
        conf.budget = 0;
        let r = Campaign::new(conf).unwrap().run_iteration();
        assert_eq!(r.packets, 0);
        assert_eq!(r.c_i, 0);
    }

    #[test]
    fn injected_prefix_crash_is_recorded_and_replays() {
        let report = run_campaign(&cfg(NodeType::Ftd, vec![prefix_max(None)], 2)).unwrap();
        assert_eq!(report.first_hit(VulnId::V1), Some(1));
        let record = &report.crashes[0];
        assert_eq!(record.vuln, VulnId::V1);
        assert_eq!(record.dut_state, MleState::ChildIdRequestSent);
        assert_eq!(record.file_name(), "crash_1_V1.json");
        assert!(matches!(record.events.last(), Some(TraceEvent::Packet { .. })));
        let replayed = replay(record);
        assert!(replayed.reproduces(record));
        assert_eq!(replayed.packets, record.packets().count() as u64);
    }

    #[test]
    fn crash_record_round_trips_through_json() {
        let report = run_campaign(&cfg(NodeType::Ftd, vec![prefix_max(Some(1))], 1)).unwrap();
        let record = &report.crashes[0];
        let back: CrashRecord = serde_json::from_str(&serde_json::to_string(record).unwrap()).unwrap();
        assert_eq!(&back, record);
    }

    #[test]
    fn report_invariants_hold() {
        let report = run_campaign(&cfg(NodeType::Ftd, vec![EngineConfig::Random { k: 2.0 }], 50)).unwrap();
        assert_eq!(report.iterations.len(), 50);
        let total: u64 = report.iterations.iter().map(|r| r.c_i).sum();
        assert_eq!(total, report.final_edges);
        assert!(report.iterations.windows(2).all(|w| w[0].cumulative_edges <= w[1].cumulative_edges));
        assert!(report.final_coverage > 0.0 && report.final_coverage <= 1.0);
        let csv = report.coverage_csv();
        assert_eq!(csv.lines().count(), 51);
    }

    #[test]
    fn campaigns_are_deterministic() {
        let conf = cfg(
            NodeType::Ftd,
            vec![EngineConfig::TlvInserter { gamma: 1.0, q: 0.8 }, EngineConfig::Random { k: 2.0 }],
            40,
        );
        let a = serde_json::to_string(&run_campaign(&conf).unwrap()).unwrap();
        let b = serde_json::to_string(&run_campaign(&conf).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn frozen_grey_matches_random() {
        let frozen = CoverageParams { adapt: false, ..CoverageParams::default() };
        let grey = run_campaign(&cfg(NodeType::Ftd, vec![EngineConfig::CoverageGrey(frozen)], 30)).unwrap();
        let random = run_campaign(&cfg(NodeType::Ftd, vec![EngineConfig::Random { k: 2.0 }], 30)).unwrap();
        let edges = |r: &CampaignReport| r.iterations.iter().map(|x| (x.c_i, x.packets)).collect::<Vec<_>>();
        assert_eq!(edges(&grey), edges(&random));
    }

    #[test]
    fn artifacts_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let report = run_campaign(&cfg(NodeType::Ftd, vec![prefix_max(Some(1))], 2)).unwrap();
        report.write_artifacts(dir.path()).unwrap();
        assert!(dir.path().join("report.json").is_file());
        assert!(dir.path().join("coverage.csv").is_file());
        assert!(dir.path().join("crashes").join("crash_1_V1.json").is_file());
    }

    #[test]
    fn epoch_flags_only_crashing_epochs() {
        let conf = cfg(NodeType::Ftd, vec![], 1);
        let clean = run_fuzzing_epoch(&conf, 4).unwrap();
        assert!(!clean.unexpected_reboot);
        assert_eq!(clean.cf, clean.c0 + 5);

        let mut chains = vec![FuzzerChain::default(); 4];
        chains[2] = FuzzerChain { engines: vec![prefix_max(Some(1))] };
        let crashed = run_fuzzing_epoch_with(&conf, &chains).unwrap();
        assert!(crashed.unexpected_reboot);
        assert_eq!(crashed.crashes, vec![(3, VulnId::V1)]);
    }
}
