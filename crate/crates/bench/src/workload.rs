//! Synthetic audit transactions of controlled size.

use rand::distr::Alphanumeric;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uuid::Uuid;

use auditchain_core::{AuditTransaction, EventKind, TxnDetail, WireDate};

/// Default size of one generated transaction.
pub const DEFAULT_TXN_BYTES: usize = 64 * 1024;

const ENTITIES: [&str; 4] = [
    "SAGE.BL.InspSystem.PermitInspection",
    "SAGE.BL.Permits.BuildingPermit",
    "SAGE.BL.Licensing.BusinessLicense",
    "SAGE.BL.CodeEnforcement.Case",
];

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum WorkloadError {
    #[error("{requested} bytes is below the minimum transaction size of {minimum} bytes")]
    TooSmall { requested: usize, minimum: usize },
}

fn random_uuid(rng: &mut impl Rng) -> Uuid {
    uuid::Builder::from_random_bytes(rng.random()).into_uuid()
}

/// A schema-valid update whose padding property is empty.
fn skeleton(rng: &mut impl Rng) -> AuditTransaction {
    let entity = ENTITIES[rng.random_range(0..ENTITIES.len())];
    AuditTransaction {
        class_name: entity.to_string(),
        created_date: WireDate::new(1_532_366_360_155 + rng.random_range(0..86_400_000), -240),
        entity_id: rng.random_range(1..1_000_000),
        event_type: EventKind::Update,
        id: random_uuid(rng),
        session_id: random_uuid(rng),
        url: "/SAGE/Building/Inspection/Edit".to_string(),
        user_id: rng.random_range(1..10_000),
        details: vec![
            TxnDetail {
                id: random_uuid(rng),
                new_value: Some(rng.random_range(1..100).to_string()),
                old_value: Some("0".to_string()),
                property_name: "DBVersion".to_string(),
            },
            TxnDetail {
                id: random_uuid(rng),
                new_value: Some(String::new()),
                old_value: None,
                property_name: "Notes".to_string(),
            },
        ],
    }
}

fn encoded_len(txn: &AuditTransaction) -> usize {
    txn.canonical_bytes().len()
}

/// Builds one transaction whose canonical encoding is exactly `bytes` long.
pub fn synth_txn(bytes: usize, rng: &mut impl Rng) -> Result<AuditTransaction, WorkloadError> {
    let mut txn = skeleton(rng);
    let base = encoded_len(&txn);
    if bytes < base {
        return Err(WorkloadError::TooSmall { requested: bytes, minimum: base });
    }
    // Alphanumeric padding is never escaped, so it adds exactly its length.
    let padding: String = rng.sample_iter(Alphanumeric).take(bytes - base).map(char::from).collect();
    txn.details[1].new_value = Some(padding);
    debug_assert_eq!(encoded_len(&txn), bytes);
    Ok(txn)
}

/// Smallest transaction [`synth_txn`] can produce, over any random draw.
pub fn min_txn_bytes() -> usize {
    // The skeleton's variable parts are bounded; take the largest case.
    let mut txn = skeleton(&mut ChaCha8Rng::seed_from_u64(0));
    txn.class_name = ENTITIES.iter().max_by_key(|e| e.len()).unwrap().to_string();
    txn.entity_id = 999_999;
    txn.user_id = 9_999;
    txn.details[0].new_value = Some("99".into());
    txn.created_date = WireDate::new(1_532_366_360_155 + 86_400_000, -240);
    encoded_len(&txn)
}

/// Transactions of about `txn_bytes` each whose encodings sum to exactly
/// `total_bytes`.
pub fn synth_payload_sized(
    total_bytes: usize,
    txn_bytes: usize,
    rng: &mut impl Rng,
) -> Result<Vec<AuditTransaction>, WorkloadError> {
    let minimum = min_txn_bytes();
    if total_bytes < minimum || txn_bytes < minimum {
        return Err(WorkloadError::TooSmall { requested: total_bytes.min(txn_bytes), minimum });
    }
    let count = ((total_bytes + txn_bytes / 2) / txn_bytes).max(1);
    let count = count.min(total_bytes / minimum);
    let (share, extra) = (total_bytes / count, total_bytes % count);
    (0..count).map(|i| synth_txn(share + usize::from(i < extra), rng)).collect()
}

pub fn synth_payload(total_bytes: usize, rng: &mut impl Rng) -> Result<Vec<AuditTransaction>, WorkloadError> {
    synth_payload_sized(total_bytes, DEFAULT_TXN_BYTES, rng)
}

/// Total canonical size of `txns`.
pub fn payload_bytes(txns: &[AuditTransaction]) -> usize {
    txns.iter().map(encoded_len).sum()
}
