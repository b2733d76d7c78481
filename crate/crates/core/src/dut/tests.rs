use proptest::prelude::*;

use super::*;
use crate::mle::{tlv_type as t, MessageType, Tlv, TlvPayload};

/// Runs the benign dialogue for up to `steps` steps, stopping as soon as `done` holds.
fn drive(j: &mut Joiner, l: &mut Leader, steps: u32, done: impl Fn(&Joiner) -> bool) -> u32 {
    for step in 1..=steps {
        for p in j.tick() {
            l.receive(&p);
        }
        if done(j) {
            return step;
        }
        l.tick();
        while let Some(p) = l.generate_next() {
            let out = j.step(&p).unwrap();
            assert_eq!(out.crash(), None, "benign traffic crashed the joiner");
            out.responses().iter().for_each(|r| l.receive(r));
            if done(j) {
                return step;
            }
        }
    }
    steps
}

fn joiner(node_type: NodeType, sanitizer: bool) -> (Joiner, Leader) {
    let target = if node_type == NodeType::Ftd { NodeRole::Router } else { NodeRole::Child };
    (Joiner::new(NodeConfig::new(node_type, target, sanitizer)), Leader::new())
}

fn in_state(node_type: NodeType, sanitizer: bool, state: MleState) -> Joiner {
    let (mut j, mut l) = joiner(node_type, sanitizer);
    drive(&mut j, &mut l, 40, |j| j.state() == state);
    assert_eq!(j.state(), state);
    j
}

fn prefix(length: u8, content: usize) -> Tlv {
    let mut v = vec![length];
    v.extend(std::iter::repeat_n(0xfd, content));
    Tlv::raw(t::PREFIX, v)
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

fn benign_server() -> Tlv {
    Tlv::raw(t::SERVER, [0x04, 0x00, 0x00, 0x01])
}

#[test]
fn ftd_attaches_as_router() {
    let (mut j, mut l) = joiner(NodeType::Ftd, true);
    let steps = drive(&mut j, &mut l, 20, |j| j.role() == NodeRole::Router);
    assert!(steps <= 20);
    assert_eq!(j.role(), NodeRole::Router);
    assert!(!j.is_crashed());
    assert!(j.coverage().scratch_count() > 0);
}

#[test]
fn mtd_attaches_as_child() {
    let (mut j, mut l) = joiner(NodeType::Mtd, true);
    drive(&mut j, &mut l, 20, |j| j.role() == NodeRole::Child);
    assert_eq!(j.role(), NodeRole::Child);
    drive(&mut j, &mut l, 60, |_| false);
    assert_ne!(j.role(), NodeRole::Router);
}

#[test]
fn ftd_router_stays_attached() {
    let (mut j, mut l) = joiner(NodeType::Ftd, true);
    drive(&mut j, &mut l, 200, |_| false);
    assert_eq!(j.role(), NodeRole::Router);
}

#[test]
fn v1_prefix_length_max() {
    let mut j = in_state(NodeType::Ftd, true, MleState::ChildIdRequestSent);
    let p = child_id_response(vec![prefix(255, 8), benign_server()], vec![]);
    assert_eq!(j.step(&p).unwrap().crash(), Some((CrashKind::AssertionFailure, VulnId::V1)));
    assert!(j.is_crashed());
    assert_eq!(j.step(&p), Err(SimError::Crashed));
}

#[test]
fn v1_needs_the_exact_maximum() {
    let mut j = in_state(NodeType::Ftd, true, MleState::ChildIdRequestSent);
    let p = child_id_response(vec![prefix(254, 8), benign_server()], vec![]);
    assert_eq!(j.step(&p).unwrap().crash(), None);
}

#[test]
fn v2_short_server_with_matching_stale_byte() {
    let mut j = in_state(NodeType::Ftd, true, MleState::ChildIdRequestSent);
    let short = Tlv::raw(t::SERVER, [(proto::CHILD_RLOC16 >> 8) as u8]);
    let p = child_id_response(vec![prefix(64, 8), short], vec![]);
    assert_eq!(j.step(&p).unwrap().crash(), Some((CrashKind::BufferOverflowDetected, VulnId::V2)));
}

#[test]
fn v2_high_byte_mismatch_is_harmless() {
    let mut j = in_state(NodeType::Ftd, true, MleState::ChildIdRequestSent);
    let p = child_id_response(vec![prefix(64, 8), Tlv::raw(t::SERVER, [0x77])], vec![]);
    assert_eq!(j.step(&p).unwrap().crash(), None);
}

#[test]
fn v2_is_silent_without_sanitizer() {
    let mut j = in_state(NodeType::Ftd, false, MleState::ChildIdRequestSent);
    let short = Tlv::raw(t::SERVER, [(proto::CHILD_RLOC16 >> 8) as u8]);
    let p = child_id_response(vec![prefix(64, 8), short], vec![]);
    assert_eq!(j.step(&p).unwrap().crash(), None);
    assert!(!j.is_crashed());
}

fn oversized_network_data() -> MlePacket {
    let mut nd = proto::network_data();
    nd.declared_length = 255;
    MlePacket::new(
        MessageType::ChildIdResponse,
        vec![
            Tlv::u16(t::SOURCE_ADDRESS, proto::LEADER_RLOC16),
            proto::LeaderInfo::default().to_tlv(),
            Tlv::u16(t::ADDRESS16, proto::CHILD_RLOC16),
            nd,
        ],
    )
}

#[test]
fn v3_oversized_network_data_with_leader_data() {
    let mut j = in_state(NodeType::Mtd, true, MleState::ChildIdRequestSent);
    assert!(j.holds_leader_data());
    assert_eq!(j.step(&oversized_network_data()).unwrap().crash(), Some((CrashKind::AssertionFailure, VulnId::V3)));
}

#[test]
fn v3_needs_leader_data() {
    let cfg = NodeConfig { leader_data_probability: 0.0, ..NodeConfig::new(NodeType::Ftd, NodeRole::Router, true) };
    let (mut j, mut l) = (Joiner::new(cfg), Leader::new());
    drive(&mut j, &mut l, 40, |j| j.state() == MleState::ChildIdRequestSent);
    assert!(!j.holds_leader_data());
    assert_eq!(j.step(&oversized_network_data()).unwrap().crash(), None);
}

fn child_update_response(timeout: u32) -> MlePacket {
    proto::child_update_response_from_leader(proto::MODE_MTD, timeout)
}

#[test]
fn v4_max_timeout_on_mtd() {
    let mut j = in_state(NodeType::Mtd, true, MleState::ChildUpdateRequestSent);
    assert_eq!(
        j.step(&child_update_response(u32::MAX)).unwrap().crash(),
        Some((CrashKind::AssertionFailure, VulnId::V4))
    );
}

#[test]
fn v4_ignored_on_ftd() {
    let mut j = in_state(NodeType::Ftd, true, MleState::ChildUpdateRequestSent);
    assert_eq!(j.step(&child_update_response(u32::MAX)).unwrap().crash(), None);
}

#[test]
fn v5_leader_id_max_then_success() {
    let mut j = in_state(NodeType::Ftd, true, MleState::AddressSolicitSent);
    let leader = proto::LeaderInfo { leader_id: 255, ..Default::default() };
    let adv = proto::router_advertisement(proto::LEADER_RLOC16, leader, proto::ROUTE_SEQUENCE, 1 << 62);
    assert_eq!(j.step(&adv).unwrap().crash(), None);
    let asr = proto::address_solicit_response(&[proto::LEADER_ROUTER_ID]);
    assert_eq!(j.step(&asr).unwrap().crash(), Some((CrashKind::AssertionFailure, VulnId::V5)));
}

#[test]
fn v5_unarmed_response_is_benign() {
    let mut j = in_state(NodeType::Ftd, true, MleState::AddressSolicitSent);
    let asr = proto::address_solicit_response(&[proto::LEADER_ROUTER_ID, 2]);
    assert_eq!(j.step(&asr).unwrap().crash(), None);
    assert_eq!(j.role(), NodeRole::Router);
}

fn v6_packet() -> MlePacket {
    child_id_response(vec![prefix(255, 32), benign_server()], vec![Tlv::raw(t::CHALLENGE, [1; 8])])
}

#[test]
fn v6_needs_a_foreign_tlv() {
    let mut j = in_state(NodeType::Ftd, true, MleState::ChildIdRequestSent);
    assert_eq!(j.step(&v6_packet()).unwrap().crash(), Some((CrashKind::BufferOverflowDetected, VulnId::V6)));

    let mut j = in_state(NodeType::Ftd, true, MleState::ChildIdRequestSent);
    let plain = child_id_response(vec![prefix(255, 32), benign_server()], vec![]);
    assert_eq!(j.step(&plain).unwrap().crash(), Some((CrashKind::AssertionFailure, VulnId::V1)));
}

#[test]
fn v6_is_silent_without_sanitizer() {
    let mut j = in_state(NodeType::Ftd, false, MleState::ChildIdRequestSent);
    assert_eq!(j.step(&v6_packet()).unwrap().crash(), None);
}

#[test]
fn vulnerabilities_are_state_gated() {
    let mut j = in_state(NodeType::Ftd, true, MleState::Router);
    let p = child_id_response(vec![prefix(255, 8), benign_server()], vec![]);
    assert_eq!(j.step(&p).unwrap().crash(), None);
}

#[test]
fn resets_track_reboots() {
    let (mut j, mut l) = joiner(NodeType::Ftd, true);
    drive(&mut j, &mut l, 20, |j| j.role() == NodeRole::Router);
    j.soft_reset();
    j.soft_reset();
    assert_eq!(j.state(), MleState::Detached);
    assert_eq!(j.read_reboot_count(), 2);
    j.hard_reset();
    assert_eq!(j.read_reboot_count(), 0);
    assert!(!j.holds_leader_data());
}

#[test]
fn crash_restart_counts_as_reboot() {
    let mut j = in_state(NodeType::Ftd, true, MleState::ChildIdRequestSent);
    j.step(&v6_packet()).unwrap();
    j.restart();
    assert!(!j.is_crashed());
    assert_eq!(j.reboot_count(), 1);
}

#[test]
fn leader_data_survives_soft_reset() {
    let cfg = NodeConfig { leader_data_probability: 1.0, ..NodeConfig::new(NodeType::Ftd, NodeRole::Router, true) };
    let (mut j, mut l) = (Joiner::new(cfg), Leader::new());
    drive(&mut j, &mut l, 20, |j| j.role() == NodeRole::Router);
    assert!(j.holds_leader_data());
    j.soft_reset();
    assert!(j.holds_leader_data());
}

#[test]
fn malformed_input_is_tolerated() {
    let mut j = in_state(NodeType::Ftd, true, MleState::ChildIdRequestSent);
    for bytes in [&[][..], &[0; 3], &[0, 0, 0, 0, 0, 0xee], &[0, 0, 0, 0, 0, 0x0c, 0x0c, 0xff]] {
        assert!(matches!(j.step_bytes(bytes), Ok(StepOutcome::Silent)));
    }
}

#[test]
fn leader_answers_parent_request_with_challenge() {
    let mut l = Leader::new();
    assert_eq!(l.generate_next(), None);
    let challenge = [9; 8];
    l.receive(&proto::parent_request(proto::MODE_FTD, challenge));
    let resp = l.generate_next().unwrap();
    assert_eq!(resp.message_type, MessageType::ParentResponse.code());
    let r = resp.tlvs.iter().find(|x| x.tlv_type == t::RESPONSE).unwrap();
    assert_eq!(r.payload, TlvPayload::Raw(challenge.to_vec()));
    assert_eq!(l.generate_next(), None);
}

#[test]
fn leader_advertises_periodically() {
    let mut l = Leader::new();
    let mut adverts = 0;
    for _ in 0..20 {
        l.tick();
        while let Some(p) = l.generate_next() {
            assert_eq!(p.message_type, MessageType::Advertisement.code());
            adverts += 1;
        }
    }
    assert_eq!(adverts, 4);
}

#[test]
fn sim_node_dispatches_by_role() {
    let mut leader = SimNode::leader();
    assert_eq!(leader.role(), NodeRole::Leader);
    assert!(leader.tick().is_empty());
    let mut node = create_node(NodeType::Mtd, NodeRole::Router, true);
    assert_eq!(node.role(), NodeRole::Detached);
    let out = node.tick();
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].message_type, MessageType::ParentRequest.code());
    assert_eq!(node.state(), MleState::ParentRequestSent);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn mtd_never_becomes_router(seed in any::<u64>(), corpus in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..48), 1..32)) {
        let cfg = NodeConfig::new(NodeType::Mtd, NodeRole::Router, true).with_seed(seed);
        let mut j = Joiner::new(cfg);
        let mut l = Leader::new();
        let mut rng = seed;
        for step in 0..12_500u32 {
            for p in j.tick() {
                l.receive(&p);
            }
            l.tick();
            while let Some(p) = l.generate_next() {
                let mut bytes = wire(&p);
                // Splice in arbitrary bytes on a fixed schedule so the dialogue still progresses.
                rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                if rng >> 61 == 0 {
                    let extra = &corpus[(rng >> 32) as usize % corpus.len()];
                    let at = (rng >> 16) as usize % (bytes.len() + 1);
                    bytes.splice(at..at, extra.iter().copied());
                }
                match j.step_bytes(&bytes).unwrap() {
                    StepOutcome::Crash(..) => { j.restart(); l.peer_lost(); }
                    StepOutcome::Ok(out) => out.iter().for_each(|r| l.receive(r)),
                    StepOutcome::Silent => {}
                }
                prop_assert_ne!(j.role(), NodeRole::Router, "step {}", step);
            }
        }
    }
}
