use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use auditchain_bench::workload::{
    min_txn_bytes, payload_bytes, synth_payload, synth_payload_sized, synth_txn, WorkloadError,
};
use auditchain_core::decode_transaction;
use auditchain_core::DateMode;

const SAMPLE: &str = include_str!("../../core/tests/data/sample_audit.json");

fn sample_size() -> usize {
    decode_transaction(SAMPLE.as_bytes()).unwrap().canonical_bytes().len()
}

#[test]
fn sample_sized_total_gives_one_transaction() {
    let size = sample_size();
    assert!(size >= min_txn_bytes(), "sample {size} < minimum {}", min_txn_bytes());
    let txns = synth_payload(size, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(txns.len(), 1);
    assert_eq!(payload_bytes(&txns), size);
}

#[test]
fn payload_sums_exactly_and_every_txn_decodes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for total in [min_txn_bytes(), 10_000, 65_536, 200_001, 2_000_000] {
        let txns = synth_payload(total, &mut rng).unwrap();
        // Re-encode independently through the wire format.
        let sum: usize = txns
            .iter()
            .map(|t| {
                let wire = t.encode(DateMode::Legacy).unwrap();
                let back = decode_transaction(&wire).unwrap();
                assert_eq!(&back, t);
                back.canonical_bytes().len()
            })
            .sum();
        assert_eq!(sum, total);
    }
}

#[test]
fn transaction_count_follows_target_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let txns = synth_payload_sized(1_000_000, 10_000, &mut rng).unwrap();
    assert_eq!(txns.len(), 100);
    assert!(txns.iter().all(|t| t.canonical_bytes().len() == 10_000));
}

#[test]
fn too_small_totals_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let min = min_txn_bytes();
    assert_eq!(
        synth_payload(min - 1, &mut rng).unwrap_err(),
        WorkloadError::TooSmall { requested: min - 1, minimum: min }
    );
    assert!(synth_txn(min, &mut rng).is_ok());
}

#[test]
fn generator_is_seeded() {
    let a = synth_payload(300_000, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let b = synth_payload(300_000, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(a, b);
}
