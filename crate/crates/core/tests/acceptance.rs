//! End-to-end acceptance suite. Prints one verdict line per criterion and
//! exits non-zero when any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use meshfuzz::config::CampaignConfig;
use meshfuzz::coordinator::{replay_with_sanitizer, run_fuzzing_epoch_with, Campaign, CampaignReport};
use meshfuzz::dut::{proto, CrashKind, NodeType, VulnId};
use meshfuzz::engines::{
    feedback_gain, CoverageParams, EngineConfig, FieldMutation, FuzzerChain, MutationLog, ProbabilityTable, P_MAX,
    P_MIN,
};
use meshfuzz::harness::{harness_execute, HarnessInput, HarnessState};
use meshfuzz::mle::{decode_packet, encode_packet, tlv_type as t, MessageType, MlePacket, Tlv, SECURITY_HEADER_LEN};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const FTD_ITERATIONS: u64 = 10_000;
const MTD_ITERATIONS: u64 = 2_000;
const PREFIX_LENGTH: &str = "network_data_tlv[0].prefix_tlv[0].prefix_length";

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Straight transcription of the update rule, kept independent of the crate.
fn reference_update(p: f64, c: u64, i: u64, beta: f64, warm: u64, n: usize, width: u32) -> f64 {
    let gamma = (i as f64 / warm as f64).min(1.0);
    let g = if c > 0 {
        beta * gamma
    } else if gamma == 0.0 {
        1.0 / beta
    } else {
        1.0 / (beta * gamma)
    };
    let h = if c > 0 { 1.0 } else { -1.0 };
    let gain = h * g / n as f64;
    let domain = 2f64.powi(width as i32);
    (p + gain / (domain + 1.0).log2()).clamp(0.001, 1.0)
}

/// Runs one table update where the probed field is one of `n` distinct mutated fields.
fn table_update(p: f64, c: u64, i: u64, beta: f64, warm: u64, n: usize, width: u32) -> f64 {
    let mut table = ProbabilityTable::new(2.0, beta, warm).unwrap();
    table.set(0x0c, "probe", p);
    let mut log = MutationLog::new(i);
    for j in 0..n {
        let path = if j == 0 { "probe".to_string() } else { format!("other{j}") };
        log.mutations.push(FieldMutation { message: 0x0c, path, bit_width: width, old: 0, new: 1 });
    }
    table.update(&log, c, i).unwrap();
    table.get(0x0c, "probe").unwrap()
}

fn criterion_1() -> Verdict {
    let hand = [
        // (p, c, i, beta, warm, n, width, expected)
        (0.2, 5, 4000, 3.0, 2000, 2, 8, 0.38737),
        (0.2, 0, 4000, 3.0, 2000, 3, 8, 0.18612),
        (0.5, 1, 1000, 3.0, 2000, 1, 8, 0.68737),
        (0.5, 0, 0, 3.0, 2000, 1, 1, 0.28969),
        (0.002, 0, 4000, 3.0, 2000, 1, 8, P_MIN),
        (0.99, 9, 4000, 3.0, 2000, 1, 8, P_MAX),
    ];
    let gains = [(5, 4000, 2, 1.5), (0, 4000, 3, -1.0 / 9.0), (1, 1000, 1, 1.5)];
    for (c, i, n, want) in gains {
        let got = feedback_gain(c, i, 3.0, 2000, n).map_err(|e| e.to_string())?;
        if (got - want).abs() > 1e-12 {
            return Err(format!("gain c={c} i={i} n={n}: got {got}, expected {want}"));
        }
    }
    for (p, c, i, beta, warm, n, width, want) in hand {
        let got = table_update(p, c, i, beta, warm, n, width);
        if (got - want).abs() > 1e-5 {
            return Err(format!("p={p} c={c} i={i} n={n}: got {got}, expected {want}"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let p = rng.random_range(P_MIN..=P_MAX);
        let c = if rng.random_bool(0.5) { 0 } else { rng.random_range(1..100) };
        let i = rng.random_range(0..6000);
        let beta = rng.random_range(0.5..8.0);
        let warm = rng.random_range(1..4000);
        let n = rng.random_range(1..20);
        let width = rng.random_range(1..=32);
        let want = reference_update(p, c, i, beta, warm, n, width);
        let got = table_update(p, c, i, beta, warm, n, width);
        worst = worst.max((got - want).abs() / want.abs());
    }
    check(
        worst <= 1e-9,
        format!(
            "{} gains, {} updates by hand, 1000 random updates, max relative error {worst:.1e}",
            gains.len(),
            hand.len()
        ),
    )
}

fn criterion_2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n in 0..5_000 {
        let p = common::consistent_packet(&mut rng);
        let bytes = encode_packet(&p).map_err(|e| e.to_string())?;
        if decode_packet(&bytes).ok().as_ref() != Some(&p) {
            return Err(format!("consistent packet {n} did not round trip"));
        }
    }
    for n in 0..5_000 {
        let bytes = common::inconsistent_bytes(&mut rng);
        let p = decode_packet(&bytes).map_err(|e| e.to_string())?;
        let again = encode_packet(&p).map_err(|e| e.to_string())?;
        if again != bytes || decode_packet(&again).ok().as_ref() != Some(&p) {
            return Err(format!("inconsistent packet {n} changed on re-encode"));
        }
    }
    Ok("5000 consistent and 5000 length-inconsistent packets re-encode byte for byte".into())
}

fn campaign(node_type: NodeType, fuzzers: Vec<EngineConfig>, seed: u64, iterations: u64) -> (CampaignReport, Campaign) {
    let cfg = CampaignConfig { seed, iterations, ..CampaignConfig::new(node_type, fuzzers) };
    let mut c = Campaign::new(cfg).expect("valid config");
    let r = c.run();
    (r, c)
}

struct Runs {
    baseline: Vec<CampaignReport>,
    random: Vec<CampaignReport>,
    inserter: Vec<CampaignReport>,
    grey: Vec<(CampaignReport, Campaign)>,
    mtd: Vec<CampaignReport>,
}

fn run_all() -> Runs {
    let random = || vec![EngineConfig::Random { k: 2.0 }];
    let each = |node_type, fuzzers: Vec<EngineConfig>, iterations| {
        SEEDS.iter().map(|&s| campaign(node_type, fuzzers.clone(), s, iterations)).collect::<Vec<_>>()
    };
    let reports = |v: Vec<(CampaignReport, Campaign)>| v.into_iter().map(|(r, _)| r).collect::<Vec<_>>();
    Runs {
        baseline: reports(each(NodeType::Ftd, vec![], FTD_ITERATIONS)),
        random: reports(each(NodeType::Ftd, random(), FTD_ITERATIONS)),
        inserter: reports(each(
            NodeType::Ftd,
            vec![EngineConfig::TlvInserter { gamma: 1.0, q: 0.8 }, EngineConfig::Random { k: 2.0 }],
            FTD_ITERATIONS,
        )),
        grey: each(NodeType::Ftd, vec![EngineConfig::CoverageGrey(CoverageParams::default())], FTD_ITERATIONS),
        mtd: reports(each(NodeType::Mtd, random(), MTD_ITERATIONS)),
    }
}

fn hit_counts(reports: &[CampaignReport]) -> BTreeMap<VulnId, usize> {
    VulnId::ALL.iter().map(|&v| (v, reports.iter().filter(|r| r.first_hit(v).is_some()).count())).collect()
}

fn describe(hits: &BTreeMap<VulnId, usize>, runs: usize) -> String {
    hits.iter().map(|(v, n)| format!("{v} {n}/{runs}")).collect::<Vec<_>>().join(", ")
}

fn criterion_3(runs: &Runs) -> Verdict {
    let hits = hit_counts(&runs.random);
    let ok = [VulnId::V1, VulnId::V2, VulnId::V5].iter().all(|v| hits[v] >= 4) && hits[&VulnId::V6] == 0;
    check(ok, describe(&hits, runs.random.len()))
}

fn criterion_4(runs: &Runs) -> Verdict {
    let hits = hit_counts(&runs.mtd);
    let ok = [VulnId::V1, VulnId::V3, VulnId::V4].iter().all(|v| hits[v] == runs.mtd.len());
    check(ok, describe(&hits, runs.mtd.len()))
}

fn mean_edges<'a>(reports: impl Iterator<Item = &'a CampaignReport>) -> f64 {
    let v: Vec<f64> = reports.map(|r| r.final_edges as f64).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_5(runs: &Runs) -> Verdict {
    let b = mean_edges(runs.baseline.iter());
    let r = mean_edges(runs.random.iter());
    let t = mean_edges(runs.inserter.iter());
    let g = mean_edges(runs.grey.iter().map(|(r, _)| r));
    let ok = g > t && t > r && r > b && g - r >= 0.05 * (r - b);
    check(
        ok,
        format!("mean edges grey {g:.1} > inserter {t:.1} > random {r:.1} > baseline {b:.1}, margin {:.1}", g - r),
    )
}

fn criterion_6() -> Verdict {
    let crash = FuzzerChain {
        engines: vec![EngineConfig::SetField {
            message: MessageType::ChildIdResponse,
            path: PREFIX_LENGTH.into(),
            value: 255,
            times: Some(1),
        }],
    };
    let positions: Vec<usize> = (0..4).collect();
    let mut cases = 0;
    for count in 0..=4usize {
        for seed in SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + count as u64);
            let crashing: Vec<usize> = positions.choose_multiple(&mut rng, count).copied().collect();
            let chains: Vec<FuzzerChain> =
                (0..4).map(|j| if crashing.contains(&j) { crash.clone() } else { FuzzerChain::default() }).collect();
            let cfg = CampaignConfig { seed, ..CampaignConfig::new(NodeType::Ftd, vec![]) };
            let r = run_fuzzing_epoch_with(&cfg, &chains).map_err(|e| e.to_string())?;
            if r.unexpected_reboot != (count > 0) || r.crashes.len() != count {
                return Err(format!(
                    "seed {seed}, {count} crashes at {crashing:?}: verdict {} with {} in-loop crashes (c0 {}, cf {})",
                    r.unexpected_reboot,
                    r.crashes.len(),
                    r.c0,
                    r.cf
                ));
            }
            cases += 1;
        }
    }
    Ok(format!("{cases} epochs of size 4 with 0..=4 injected crashes, verdict matches every time"))
}

fn payload(p: &MlePacket) -> Vec<u8> {
    encode_packet(p).expect("valid packet")[SECURITY_HEADER_LEN..].to_vec()
}

fn child_id_response(network: Vec<Tlv>, extra: Vec<Tlv>) -> MlePacket {
    let mut tlvs = vec![
        Tlv::u16(t::SOURCE_ADDRESS, proto::LEADER_RLOC16),
        proto::LeaderInfo::default().to_tlv(),
        Tlv::u16(t::ADDRESS16, proto::CHILD_RLOC16),
        Tlv::nested(t::NETWORK_DATA, network),
    ];
    tlvs.extend(extra);
    MlePacket::new(MessageType::ChildIdResponse, tlvs)
}

fn prefix(length: u8, content: usize) -> Tlv {
    let mut v = vec![length];
    v.extend(std::iter::repeat_n(0xfd, content));
    Tlv::raw(t::PREFIX, v)
}

fn criterion_7() -> Verdict {
    let adv = proto::leader_advertisement(&[proto::LEADER_ROUTER_ID]);
    let mut reached = 0;
    for node_type in [NodeType::Ftd, NodeType::Mtd] {
        for &state in HarnessState::valid_for(node_type) {
            let r = harness_execute(&HarnessInput::new(node_type, state, payload(&adv)), true)
                .map_err(|e| e.to_string())?;
            if !r.reached_state || r.crash().is_some() {
                return Err(format!("{node_type:?} {state:?}: reached {} crash {:?}", r.reached_state, r.crash()));
            }
            reached += 1;
        }
    }

    let server = Tlv::raw(t::SERVER, [0x04, 0x00, 0x00, 0x01]);
    let short_server = Tlv::raw(t::SERVER, [(proto::CHILD_RLOC16 >> 8) as u8]);
    let mut oversized = proto::network_data();
    oversized.declared_length = 255;
    let v3 = MlePacket::new(
        MessageType::ChildIdResponse,
        vec![
            Tlv::u16(t::SOURCE_ADDRESS, proto::LEADER_RLOC16),
            proto::LeaderInfo::default().to_tlv(),
            Tlv::u16(t::ADDRESS16, proto::CHILD_RLOC16),
            oversized,
        ],
    );
    let leader = proto::LeaderInfo { leader_id: 255, ..Default::default() };
    let directed = [
        (
            VulnId::V1,
            NodeType::Ftd,
            HarnessState::DetachedAfterChildIdRequest,
            child_id_response(vec![prefix(255, 8), server.clone()], vec![]),
        ),
        (
            VulnId::V2,
            NodeType::Ftd,
            HarnessState::DetachedAfterChildIdRequest,
            child_id_response(vec![prefix(64, 8), short_server], vec![]),
        ),
        (VulnId::V3, NodeType::Mtd, HarnessState::DetachedAfterChildIdRequest, v3),
        (
            VulnId::V4,
            NodeType::Mtd,
            HarnessState::Child,
            proto::child_update_response_from_leader(proto::MODE_MTD, u32::MAX),
        ),
        (
            VulnId::V5,
            NodeType::Ftd,
            HarnessState::ChildAfterAddressSolicit,
            proto::router_advertisement(proto::LEADER_RLOC16, leader, proto::ROUTE_SEQUENCE, 1 << 62),
        ),
        (
            VulnId::V6,
            NodeType::Ftd,
            HarnessState::DetachedAfterChildIdRequest,
            child_id_response(vec![prefix(255, 32), server], vec![Tlv::raw(t::CHALLENGE, [1; 8])]),
        ),
    ];
    for (vuln, node_type, state, packet) in directed {
        let r =
            harness_execute(&HarnessInput::new(node_type, state, payload(&packet)), true).map_err(|e| e.to_string())?;
        if r.crash() != Some(vuln) {
            return Err(format!("{vuln} via {node_type:?} {state:?}: got {:?} ({:?})", r.crash(), r.abort_reason));
        }
    }
    Ok(format!("{reached} states reached, 6/6 directed triggers fire"))
}

fn criterion_8(runs: &Runs) -> Verdict {
    let corpus = runs.random.iter().chain(&runs.mtd).flat_map(|r| &r.crashes);
    let (mut assertions, mut reproduced, mut overflows, mut total) = (0, 0, 0, 0);
    for record in corpus {
        total += 1;
        let r = replay_with_sanitizer(record, false);
        if matches!(r.crash, Some((CrashKind::BufferOverflowDetected, _))) {
            overflows += 1;
        }
        if record.kind == CrashKind::AssertionFailure {
            assertions += 1;
            reproduced += usize::from(r.reproduces(record));
        }
    }
    let ok = assertions > 0 && reproduced == assertions && overflows == 0;
    check(ok, format!("{total} records replayed without sanitizer: {reproduced}/{assertions} assertions reproduce, {overflows} overflow reports"))
}

fn criterion_9() -> Verdict {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/random_ftd.toml");
    let dirs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
    for d in &dirs {
        let status = Command::new(env!("CARGO_BIN_EXE_meshfuzz"))
            .args(["fuzz", "--seed", "7", "--iterations", "500", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(d.path())
            .output()
            .map_err(|e| e.to_string())?
            .status;
        if !matches!(status.code(), Some(0 | 2)) {
            return Err(format!("fuzz exited with {status}"));
        }
    }
    let listing = |root: &Path| -> Result<Vec<(String, Vec<u8>)>, String> {
        let mut files =
            vec![("report.json".to_string(), std::fs::read(root.join("report.json")).map_err(|e| e.to_string())?)];
        let crashes = root.join("crashes");
        if crashes.is_dir() {
            let mut entries: Vec<_> =
                std::fs::read_dir(&crashes).map_err(|e| e.to_string())?.flatten().map(|e| e.path()).collect();
            entries.sort();
            for p in entries {
                let name = p.file_name().unwrap().to_string_lossy().into_owned();
                files.push((name, std::fs::read(&p).map_err(|e| e.to_string())?));
            }
        }
        Ok(files)
    };
    let a = listing(dirs[0].path())?;
    let b = listing(dirs[1].path())?;
    check(a == b, format!("two runs of seed 7 produced {} identical artifacts", a.len()))
}

fn criterion_10(runs: &Runs) -> Verdict {
    let mut entries = 0;
    for (report, c) in &runs.grey {
        let table = c.chain_state().table().ok_or("grey campaign has no probability table")?;
        if let Some((m, path, p)) = table.iter().find(|(_, _, p)| !(P_MIN..=P_MAX).contains(p)) {
            return Err(format!("seed {}: p({m:#04x}, {path}) = {p}", report.config.seed));
        }
        entries += table.len();
        let monotone = report.iterations.windows(2).all(|w| w[0].cumulative_edges <= w[1].cumulative_edges);
        let total: u64 = report.iterations.iter().map(|r| r.c_i).sum();
        if !monotone || total != report.final_edges {
            return Err(format!(
                "seed {}: monotone {monotone}, sum c_i {total} vs final {}",
                report.config.seed, report.final_edges
            ));
        }
    }
    Ok(format!("{} grey runs, {entries} table entries in range, coverage monotone and additive", runs.grey.len()))
}

fn main() {
    let start = Instant::now();
    let mut failed = 0;
    let mut report = |n: u32, v: Verdict| {
        let (tag, detail) = match v {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n:>2}: {tag}  {detail}");
    };
    let runs = run_all();
    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3(&runs));
    report(4, criterion_4(&runs));
    report(5, criterion_5(&runs));
    report(6, criterion_6());
    report(7, criterion_7());
    report(8, criterion_8(&runs));
    report(9, criterion_9());
    report(10, criterion_10(&runs));
    println!("acceptance: {} failed, {:.0}s", failed, start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
