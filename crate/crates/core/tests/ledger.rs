use std::collections::BTreeMap;
use std::sync::Arc;

use proptest::prelude::*;
use sha2::{Digest as _, Sha256};
use uuid::Uuid;

use auditchain_core::ledger::{
    build_block, diff_against_peer, merkle_root, query_history, restore_state, store, verify_chain, Ledger,
};
use auditchain_core::{AuditTransaction, Digest, EventKind, SealedTxn, TxnDetail, VerificationCause, WireDate};

fn txn(seq: u128, entity_id: i64, kind: EventKind, props: &[(&str, Option<&str>, Option<&str>)]) -> AuditTransaction {
    AuditTransaction {
        class_name: "SAGE.BL.Permits.BuildingPermit".into(),
        created_date: WireDate::new(1_532_366_360_155 + seq as i64, -240),
        entity_id,
        event_type: kind,
        id: Uuid::from_u128(seq),
        session_id: Uuid::from_u128(1 << 100),
        url: "/permits/edit".into(),
        user_id: 7,
        details: props
            .iter()
            .enumerate()
            .map(|(i, (p, old, new))| TxnDetail {
                id: Uuid::from_u128(seq << 16 | i as u128),
                new_value: new.map(str::to_string),
                old_value: old.map(str::to_string),
                property_name: p.to_string(),
            })
            .collect(),
    }
}

fn chain(batches: &[Vec<AuditTransaction>]) -> Ledger {
    let mut ledger = Ledger::new();
    for (i, batch) in batches.iter().enumerate() {
        let sealed: Vec<_> = batch.iter().cloned().map(|t| SealedTxn::new(t).unwrap()).collect();
        let block = build_block(&sealed, ledger.head(), 0, i as i64 + 1).unwrap();
        ledger.append(block).unwrap();
    }
    ledger
}

fn simple_chain(blocks: usize) -> Ledger {
    let batches: Vec<Vec<AuditTransaction>> = (0..blocks)
        .map(|b| {
            (0..3)
                .map(|i| txn((b * 3 + i) as u128 + 1, 1, EventKind::Update, &[("Fee", Some("1"), Some("2"))]))
                .collect()
        })
        .collect();
    chain(&batches)
}

/// Merkle root computed directly with SHA-256.
fn merkle_oracle(leaves: &[[u8; 32]]) -> [u8; 32] {
    if leaves.is_empty() {
        return [0; 32];
    }
    if leaves.len() == 1 {
        return leaves[0];
    }
    let mut next = Vec::new();
    for i in (0..leaves.len()).step_by(2) {
        let right = if i + 1 < leaves.len() { leaves[i + 1] } else { leaves[i] };
        next.push(Sha256::new().chain_update(leaves[i]).chain_update(right).finalize().into());
    }
    merkle_oracle(&next)
}

#[test]
fn merkle_root_matches_direct_computation() {
    for n in 0..=17u8 {
        let leaves: Vec<[u8; 32]> = (0..n).map(|i| Sha256::digest([i]).into()).collect();
        let digests: Vec<Digest> = leaves.iter().map(|l| Digest(*l)).collect();
        assert_eq!(merkle_root(&digests).0, merkle_oracle(&leaves), "{n} leaves");
    }
}

#[test]
fn every_bit_flip_in_the_stored_image_is_detected_by_the_next_height() {
    let ledger = simple_chain(3);
    let image = store::encode_ledger(&ledger);
    let mut ends = Vec::new();
    let mut pos = 0;
    for block in ledger.blocks() {
        pos += store::encode_record(block).len();
        ends.push(pos);
    }
    for i in 0..image.len() {
        let height = ends.iter().position(|&e| i < e).unwrap() as u64;
        for bit in 0..8 {
            let mut copy = image.clone();
            copy[i] ^= 1 << bit;
            let report = store::verify_bytes(&copy);
            assert!(!report.ok, "byte {i} bit {bit}");
            assert!(report.first_bad_height.unwrap() <= height + 1, "byte {i} bit {bit}: {report:?}");
        }
    }
}

#[test]
fn rewritten_history_with_consistent_root_breaks_the_next_link() {
    let mut ledger = simple_chain(4);
    // An attacker rewrites block 2 and recomputes its root.
    let blocks = ledger.storage_mut();
    let forged = SealedTxn::new(txn(99, 1, EventKind::Update, &[("Fee", Some("1"), Some("0"))])).unwrap();
    blocks[2].txns[0] = forged;
    blocks[2].header.txn_root = blocks[2].computed_root();
    let report = verify_chain(&ledger);
    assert_eq!((report.first_bad_height, report.cause), (Some(3), Some(VerificationCause::HashMismatch)));
}

#[test]
fn truncated_and_extended_files() {
    let ledger = simple_chain(2);
    let image = store::encode_ledger(&ledger);
    assert!(store::verify_bytes(&image[..image.len() - 1]).first_bad_height == Some(2));
    let mut extended = image.clone();
    extended.extend_from_slice(&[0, 0, 0, 9]);
    assert_eq!(store::verify_bytes(&extended).first_bad_height, Some(3));
}

#[test]
fn persisted_file_loads_to_the_same_ledger() {
    let ledger = simple_chain(5);
    let dir = tempfile::tempdir().unwrap();
    let file = store::LedgerFile::create(dir.path().join("chain.ledger"), &chain(&[])).unwrap();
    for block in &ledger.blocks()[1..] {
        file.append(block).unwrap();
    }
    assert_eq!(file.load().unwrap(), ledger);
    assert!(file.verify().unwrap().ok);
}

#[test]
fn diff_finds_the_fork_height() {
    let a = simple_chain(4);
    let mut b = a.clone();
    assert_eq!(diff_against_peer(&a, &b).unwrap(), None);
    let short = chain(&[a.get(1).unwrap().txns.iter().map(|t| t.txn().clone()).collect()]);
    assert_eq!(diff_against_peer(&a, &short).unwrap(), None);
    b.storage_mut()[3].header.timestamp += 1;
    assert_eq!(diff_against_peer(&a, &b).unwrap(), Some(3));
}

/// Replays one entity's events into a plain map, independently of the ledger.
type Event = (EventKind, Vec<(String, Option<String>)>);

fn state_oracle(events: &[Event]) -> (BTreeMap<String, Option<String>>, bool) {
    let mut props = BTreeMap::new();
    let mut deleted = false;
    for (kind, changes) in events {
        match kind {
            EventKind::Insert => {
                props = changes.iter().cloned().collect();
                deleted = false;
            }
            EventKind::Update => props.extend(changes.iter().cloned()),
            EventKind::Delete => deleted = true,
        }
    }
    (props, deleted)
}

fn arb_events() -> impl Strategy<Value = Vec<Event>> {
    let change = ("[A-C]", proptest::option::of("[a-z]{0,3}"));
    let update = (Just(EventKind::Update), prop::collection::vec(change.clone(), 1..4));
    let insert = (Just(EventKind::Insert), prop::collection::vec(change, 1..4));
    let first = insert.clone();
    (first, prop::collection::vec(prop_oneof![4 => update, 1 => insert], 0..8)).prop_map(|(f, rest)| {
        let mut all = vec![f];
        all.extend(rest);
        all
    })
}

proptest! {
    #[test]
    fn restore_state_matches_a_plain_replay(events in arb_events(), delete_last in any::<bool>()) {
        let mut events = events;
        // Property names within one event must be unique for a map replay.
        for (_, changes) in &mut events {
            let mut seen = std::collections::BTreeSet::new();
            changes.retain(|(p, _)| seen.insert(p.clone()));
        }
        let mut current: BTreeMap<String, Option<String>> = BTreeMap::new();
        let mut batches = Vec::new();
        for (seq, (kind, changes)) in events.iter().enumerate() {
            let olds: Vec<Option<String>> = changes
                .iter()
                .map(|(p, _)| if *kind == EventKind::Insert { None } else { current.get(p).cloned().flatten() })
                .collect();
            let props: Vec<(&str, Option<&str>, Option<&str>)> = changes
                .iter()
                .zip(&olds)
                .map(|((p, v), old)| (p.as_str(), old.as_deref(), v.as_deref()))
                .collect();
            batches.push(vec![txn(seq as u128 + 1, 42, *kind, &props)]);
            if *kind == EventKind::Insert {
                current.clear();
            }
            current.extend(changes.iter().cloned());
        }
        if delete_last {
            let props: Vec<(String, Option<String>)> = current.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
            let details: Vec<(&str, Option<&str>, Option<&str>)> =
                props.iter().map(|(k, v)| (k.as_str(), v.as_deref(), None)).collect();
            batches.push(vec![txn(1000, 42, EventKind::Delete, &details)]);
            events.push((EventKind::Delete, vec![]));
        }
        let ledger = chain(&batches);
        let state = restore_state(&ledger, "SAGE.BL.Permits.BuildingPermit", 42);
        let (props, deleted) = state_oracle(&events);
        prop_assert_eq!(state.properties, props);
        prop_assert_eq!(state.deleted, deleted);
        prop_assert!(!state.incomplete_history);
        prop_assert_eq!(state.applied, events.len());
        prop_assert_eq!(query_history(&ledger, "SAGE.BL.Permits.BuildingPermit", 42).len(), events.len());
        prop_assert!(query_history(&ledger, "SAGE.BL.Permits.BuildingPermit", 43).is_empty());
    }
}

#[test]
fn sealed_txn_is_shared_not_copied() {
    let sealed = SealedTxn::new(txn(1, 1, EventKind::Insert, &[("A", None, Some("x"))])).unwrap();
    let block = build_block(std::slice::from_ref(&sealed), &auditchain_core::ledger::genesis(), 0, 1).unwrap();
    assert!(Arc::ptr_eq(&block.txns[0], &sealed));
}
