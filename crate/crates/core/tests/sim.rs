use std::collections::BTreeSet;

use auditchain_core::codec::{AuditTransaction, TxnDetail, WireDate};
use auditchain_core::ledger::{diff_against_peer, query_history, store, verify_chain};
use auditchain_core::sim::{CpuModel, FaultBehavior, FaultSpec, SimConfig, SimNetwork, SubmitOutcome};
use auditchain_core::{EventKind, NodeId};
use uuid::Uuid;

fn txn(seq: u128, value: &str) -> AuditTransaction {
    AuditTransaction {
        class_name: "SAGE.BL.InspSystem.PermitInspection".into(),
        created_date: WireDate::new(1_532_366_360_155, -240),
        entity_id: 161031,
        event_type: if seq == 1 { EventKind::Insert } else { EventKind::Update },
        id: Uuid::from_u128(seq),
        session_id: Uuid::from_u128(0x5E55),
        url: "/SAGE/Building/Inspection".into(),
        user_id: 666,
        details: vec![TxnDetail {
            id: Uuid::from_u128(seq << 16),
            new_value: Some(value.into()),
            old_value: None,
            property_name: "DBVersion".into(),
        }],
    }
}

fn instant(n: usize) -> SimConfig {
    SimConfig { cpu: CpuModel::instant(), ..SimConfig::with_nodes(n) }
}

#[test]
fn spawn_builds_a_full_mesh_at_genesis() {
    for n in [1usize, 4, 7] {
        let net = SimNetwork::new(SimConfig::with_nodes(n)).unwrap();
        assert_eq!(net.link_count(), n * (n - 1));
        let heads: BTreeSet<_> = net.head_digests().into_iter().collect();
        assert_eq!(heads.len(), 1);
    }
    assert!(SimNetwork::new(SimConfig { n_nodes: 0, ..SimConfig::default() }).is_err());
    assert!(SimNetwork::new(SimConfig { bandwidth: 0, ..SimConfig::default() }).is_err());
    assert!(SimNetwork::new(SimConfig { jitter_fraction: 1.0, ..SimConfig::default() }).is_err());
}

#[test]
fn empty_network_is_immediately_quiescent() {
    let mut net = SimNetwork::new(SimConfig::default()).unwrap();
    let report = net.run_until_quiescent(0);
    assert!(report.quiescent);
    assert!(report.txns.is_empty());
    assert_eq!(report.messages.txn + report.messages.consensus(), 0);
    assert_eq!(report.events_processed, 0);
}

#[test]
fn submit_schedules_one_delivery_per_peer_at_the_transit_time() {
    let mut config = instant(4);
    config.link_latency_ms = 7;
    config.bandwidth = 100;
    let mut net = SimNetwork::new(config.clone()).unwrap();
    let t = txn(1, "x");
    let size = auditchain_core::SealedTxn::new(t.clone()).unwrap().encoded_len() as u64;
    assert_eq!(net.submit_transaction(2, t.clone()).unwrap(), SubmitOutcome::Accepted);
    let expected = 7 + size.div_ceil(100);
    let times: Vec<u64> = net.scheduled().into_iter().map(|(time, _)| time).collect();
    assert_eq!(times, vec![expected; 3]);

    assert_eq!(net.submit_transaction(2, t).unwrap(), SubmitOutcome::Duplicate);
    assert_eq!(net.pending_events(), 3);
}

#[test]
fn cpu_cost_delays_outputs_by_the_processing_time() {
    let mut config = SimConfig::with_nodes(4);
    config.cpu = CpuModel { per_message_us: 1_500, bytes_per_us: 10 };
    let mut net = SimNetwork::new(config.clone()).unwrap();
    let t = txn(1, "x");
    let size = auditchain_core::SealedTxn::new(t.clone()).unwrap().encoded_len() as u64;
    net.submit_transaction(3, t).unwrap();
    let done_ms = (1_500 + size / 10).div_ceil(1000);
    let expected = done_ms + config.transit_ms(size as usize);
    assert!(net.scheduled().iter().all(|&(time, _)| time == expected));
}

#[test]
fn one_transaction_commits_everywhere_with_protocol_message_counts() {
    for n in [4usize, 7, 10] {
        let mut net = SimNetwork::new(SimConfig::with_nodes(n)).unwrap();
        net.submit_transaction(1 % n as NodeId, txn(1, "x")).unwrap();
        let report = net.run_until_quiescent(60_000);
        assert!(report.quiescent);
        let heads: BTreeSet<_> = report.nodes.iter().map(|s| (s.height, s.head)).collect();
        assert_eq!(heads.len(), 1, "n={n}");
        assert_eq!(report.nodes[0].height, 1);
        let n = n as u64;
        assert_eq!(report.messages.txn, n - 1);
        assert_eq!(report.messages.pre_prepare, n - 1);
        assert_eq!(report.messages.prepare, n * (n - 1));
        assert_eq!(report.messages.commit, n * (n - 1));
        let timing = &report.txns[&Uuid::from_u128(1)];
        let all: Vec<NodeId> = (0..n as NodeId).collect();
        assert!(timing.committed_by_all(&all).unwrap() >= timing.generated_at);
    }
}

#[test]
fn causality_and_commit_order() {
    let mut net = SimNetwork::new(SimConfig { jitter_fraction: 0.5, rng_seed: 3, ..SimConfig::with_nodes(7) }).unwrap();
    for i in 0..20u128 {
        net.schedule_submission((i % 7) as NodeId, txn(i + 1, &format!("v{i}")), i as u64 * 3).unwrap();
    }
    let report = net.run_until_quiescent(600_000);
    assert!(report.quiescent);
    assert_eq!(report.txns.len(), 20);
    for timing in report.txns.values() {
        assert_eq!(timing.commits.len(), 7);
        assert!(timing.commits.values().all(|&c| c > timing.generated_at));
    }
    let first = net.ledger(0).unwrap();
    for node in 1..7 {
        assert_eq!(net.ledger(node).unwrap(), first);
    }
    assert!(verify_chain(first).ok);
}

#[test]
fn equal_seeds_give_identical_reports() {
    let run = |seed: u64| {
        let mut net =
            SimNetwork::new(SimConfig { jitter_fraction: 0.3, rng_seed: seed, ..SimConfig::with_nodes(5) }).unwrap();
        for i in 0..8u128 {
            net.schedule_submission((i % 5) as NodeId, txn(i + 1, "v"), i as u64).unwrap();
        }
        net.inject_fault(FaultSpec { target: 4, behavior: FaultBehavior::DropOutbound { fraction: 0.3 } }).unwrap();
        net.run_until_quiescent(600_000)
    };
    let (a, b) = (run(11), run(11));
    assert_eq!(a, b);
    assert_eq!(a.to_json(), b.to_json());
    assert_ne!(a.trace_digest, run(12).trace_digest);
}

#[test]
fn deadline_leaves_the_run_flagged_non_quiescent() {
    let mut net = SimNetwork::new(SimConfig::with_nodes(4)).unwrap();
    net.submit_transaction(1, txn(1, "x")).unwrap();
    let report = net.run_until_quiescent(1);
    assert!(!report.quiescent);
    assert!(net.run_until_quiescent(60_000).quiescent);
}

fn committed_network(n: usize, blocks: u128) -> SimNetwork {
    let mut net = SimNetwork::new(SimConfig::with_nodes(n)).unwrap();
    for i in 0..blocks {
        net.submit_transaction(1, txn(i + 1, &format!("value-{i}"))).unwrap();
        let report = net.run_until_quiescent(u64::MAX);
        assert!(report.quiescent);
    }
    assert_eq!(net.ledger(0).unwrap().height(), blocks as u64);
    net
}

#[test]
fn local_tamper_is_isolated_and_exposed() {
    for offset in [0usize, 5, 17, 400] {
        let mut net = committed_network(4, 4);
        let before: Vec<Vec<u8>> = (0..4).map(|i| store::encode_ledger(net.ledger(i).unwrap())).collect();
        net.inject_fault(FaultSpec {
            target: 2,
            behavior: FaultBehavior::TamperLocalLedger { height: 2, byte_offset: offset },
        })
        .unwrap();
        let victim = net.ledger(2).unwrap();
        let report = verify_chain(victim);
        assert!(!report.ok);
        assert!(report.first_bad_height.unwrap() <= 3);
        for peer in [0, 1, 3] {
            let honest = net.ledger(peer).unwrap();
            assert_eq!(store::encode_ledger(honest), before[peer as usize], "peer {peer} bytes changed");
            assert!(verify_chain(honest).ok);
            let fork = diff_against_peer(victim, honest).unwrap();
            assert!(fork.is_some_and(|h| h <= 2), "fork {fork:?}");
        }
    }
    let mut net = committed_network(4, 1);
    assert!(net.inject_fault(FaultSpec { target: 9, behavior: FaultBehavior::Equivocate }).is_err());
    assert!(net
        .inject_fault(FaultSpec { target: 0, behavior: FaultBehavior::TamperLocalLedger { height: 5, byte_offset: 0 } })
        .is_err());
}

#[test]
fn forged_write_is_committed_and_attributed() {
    let mut net = committed_network(4, 2);
    let forged = net
        .inject_fault(FaultSpec {
            target: 3,
            behavior: FaultBehavior::ForgeAppWrite {
                entity: "SAGE.BL.InspSystem.PermitInspection".into(),
                entity_id: 161031,
                property: "DBVersion".into(),
                value: "attacker".into(),
                user_id: 4242,
            },
        })
        .unwrap()
        .unwrap();
    assert!(net.run_until_quiescent(u64::MAX).quiescent);
    for node in 0..4 {
        let history = query_history(net.ledger(node).unwrap(), "SAGE.BL.InspSystem.PermitInspection", 161031);
        let entry = history.iter().find(|t| t.id == forged).expect("forged write is in history");
        assert_eq!(entry.user_id, 4242);
        assert_eq!(entry.details[0].old_value.as_deref(), Some("value-1"));
    }
}

#[test]
fn byzantine_backups_cannot_split_honest_nodes() {
    for (n, behaviors) in [
        (4usize, vec![FaultBehavior::Equivocate]),
        (4, vec![FaultBehavior::InvalidBlocks]),
        (7, vec![FaultBehavior::Equivocate, FaultBehavior::DropOutbound { fraction: 1.0 }]),
    ] {
        let mut net = SimNetwork::new(SimConfig::with_nodes(n)).unwrap();
        for (i, behavior) in behaviors.into_iter().enumerate() {
            net.inject_fault(FaultSpec { target: (n - 1 - i) as NodeId, behavior }).unwrap();
        }
        for i in 0..6u128 {
            net.schedule_submission(0, txn(i + 1, "v"), i as u64 * 40).unwrap();
        }
        let report = net.run_until_quiescent(u64::MAX);
        assert!(report.quiescent);
        let honest = report.honest_nodes();
        let first = net.ledger(honest[0]).unwrap().clone();
        assert!(first.height() >= 1);
        for &h in &honest {
            assert_eq!(net.ledger(h).unwrap(), &first, "n={n} node {h}");
        }
        assert!(report.txns.values().all(|t| t.committed_by_all(&honest).is_some()));
    }
}

#[test]
fn equivocating_primary_never_forks_honest_nodes() {
    for seed in 0..10 {
        let mut net =
            SimNetwork::new(SimConfig { rng_seed: seed, jitter_fraction: 0.4, ..SimConfig::with_nodes(4) }).unwrap();
        net.inject_fault(FaultSpec { target: 0, behavior: FaultBehavior::Equivocate }).unwrap();
        for i in 0..3u128 {
            net.schedule_submission(1, txn(i + 1, "v"), i as u64 * 10).unwrap();
        }
        assert!(net.run_until_quiescent(u64::MAX).quiescent);
        let ledgers: Vec<_> = (1..4).map(|i| net.ledger(i).unwrap().clone()).collect();
        for a in &ledgers {
            for b in &ledgers {
                let common = a.height().min(b.height());
                for h in 0..=common {
                    assert_eq!(a.get(h).unwrap().digest(), b.get(h).unwrap().digest(), "seed {seed}");
                }
            }
        }
    }
}

#[test]
fn trace_file_replays_to_the_same_ledger() {
    use std::io::BufRead;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.jsonl");
    let mut net = SimNetwork::new(SimConfig { jitter_fraction: 0.2, ..SimConfig::with_nodes(4) }).unwrap();
    net.set_trace_writer(Box::new(std::fs::File::create(&path).unwrap()));
    for i in 0..5u128 {
        net.schedule_submission(2, txn(i + 1, "v"), i as u64 * 25).unwrap();
    }
    assert!(net.run_until_quiescent(u64::MAX).quiescent);
    net.set_trace_writer(Box::new(std::io::sink()));
    let records: Vec<auditchain_core::sim::TraceRecord> = std::io::BufReader::new(std::fs::File::open(&path).unwrap())
        .lines()
        .map(|l| serde_json::from_str(&l.unwrap()).unwrap())
        .collect();
    for node in 0..4 {
        let msgs = records.iter().filter(|r| r.to == node).map(|r| r.message.clone());
        let config = net.consensus_config();
        let (replica, _) = auditchain_core::consensus::replay(node, config, msgs);
        if node == config.primary(0) {
            // The primary's own proposals never cross the wire.
            continue;
        }
        assert_eq!(replica.ledger(), net.ledger(node).unwrap());
    }
}

#[test]
fn persisted_ledgers_verify_from_disk() {
    let net = committed_network(4, 3);
    let dir = tempfile::tempdir().unwrap();
    net.persist(dir.path()).unwrap();
    for node in 0..4 {
        let file = store::LedgerFile::open(dir.path().join(format!("node-{node}.ledger")));
        assert!(file.verify().unwrap().ok);
        assert_eq!(&file.load().unwrap(), net.ledger(node).unwrap());
    }
}
