//! On-disk ledger format: a sequence of records, each a 4-byte big-endian
//! length followed by the canonical JSON of `{"hash", "header", "txns"}`.
//! Loading is strict: a record must re-encode to exactly its stored bytes and
//! its stored hash must match its header.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{verify_blocks, Block, Ledger, VerificationCause, VerificationReport};
use crate::canonical::to_canonical_bytes;
use crate::digest::Digest;

#[derive(Serialize)]
struct RecordRef<'a> {
    hash: Digest,
    #[serde(flatten)]
    block: &'a Block,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordOwned {
    hash: Digest,
    header: super::BlockHeader,
    txns: Vec<crate::codec::AuditTransaction>,
}

#[derive(Debug, thiserror::Error)]
#[error("ledger record {height}: {reason}")]
pub struct LoadError {
    /// Index of the first record that could not be loaded.
    pub height: u64,
    pub cause: VerificationCause,
    pub reason: String,
    /// Records before `height`, decoded but not chain-verified.
    pub prefix: Vec<Block>,
}

pub fn encode_record(block: &Block) -> Vec<u8> {
    let json =
        to_canonical_bytes(&RecordRef { hash: block.digest(), block }).expect("block serialization is infallible");
    let mut out = Vec::with_capacity(json.len() + 4);
    out.extend_from_slice(&(json.len() as u32).to_be_bytes());
    out.extend_from_slice(&json);
    out
}

pub fn encode_ledger(ledger: &Ledger) -> Vec<u8> {
    ledger.blocks().iter().flat_map(encode_record).collect()
}

fn decode_record(json: &[u8]) -> Result<Block, (VerificationCause, String)> {
    let record: RecordOwned =
        serde_json::from_slice(json).map_err(|e| (VerificationCause::TxnInvalid, e.to_string()))?;
    let txns = record
        .txns
        .into_iter()
        .map(crate::codec::SealedTxn::new)
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| (VerificationCause::TxnInvalid, e.to_string()))?;
    let block = Block { header: record.header, txns };
    if encode_record(&block)[4..] != *json {
        return Err((VerificationCause::TxnInvalid, "record is not in canonical form".into()));
    }
    if block.digest() != record.hash {
        return Err((VerificationCause::HashMismatch, "stored hash does not match header".into()));
    }
    Ok(block)
}

/// Decodes every record. Chain links are not checked here; see [`verify_bytes`].
pub fn load_ledger(bytes: &[u8]) -> Result<Ledger, LoadError> {
    let mut blocks = Vec::new();
    let mut rest = bytes;
    while !rest.is_empty() {
        let height = blocks.len() as u64;
        let fail = |blocks: Vec<Block>, cause, reason: String| LoadError { height, cause, reason, prefix: blocks };
        if rest.len() < 4 {
            return Err(fail(blocks, VerificationCause::TxnInvalid, "truncated length prefix".into()));
        }
        let len = u32::from_be_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
        if rest.len() - 4 < len {
            return Err(fail(blocks, VerificationCause::TxnInvalid, "truncated record".into()));
        }
        match decode_record(&rest[4..4 + len]) {
            Ok(block) => blocks.push(block),
            Err((cause, reason)) => return Err(fail(blocks, cause, reason)),
        }
        rest = &rest[4 + len..];
    }
    if blocks.is_empty() {
        return Err(LoadError {
            height: 0,
            cause: VerificationCause::HeightGap,
            reason: "no genesis record".into(),
            prefix: blocks,
        });
    }
    Ok(Ledger::from_blocks_unchecked(blocks))
}

/// Verifies a stored ledger image: every record must load, and the decoded
/// chain must verify. Reports the lowest failing height either way.
pub fn verify_bytes(bytes: &[u8]) -> VerificationReport {
    match load_ledger(bytes) {
        Ok(ledger) => super::verify_chain(&ledger),
        Err(err) => {
            let prefix_report = verify_blocks(&err.prefix);
            if prefix_report.ok {
                VerificationReport::failed(err.height, err.cause)
            } else {
                prefix_report
            }
        }
    }
}

/// An append-only ledger file.
#[derive(Debug, Clone)]
pub struct LedgerFile {
    path: PathBuf,
}

impl LedgerFile {
    /// Creates (or truncates) the file with the full contents of `ledger`.
    pub fn create(path: impl AsRef<Path>, ledger: &Ledger) -> std::io::Result<Self> {
        std::fs::write(path.as_ref(), encode_ledger(ledger))?;
        Ok(Self { path: path.as_ref().to_path_buf() })
    }

    pub fn open(path: impl AsRef<Path>) -> Self {
        Self { path: path.as_ref().to_path_buf() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, block: &Block) -> std::io::Result<()> {
        let mut file = OpenOptions::new().append(true).open(&self.path)?;
        file.write_all(&encode_record(block))?;
        file.sync_data()
    }

    pub fn read_bytes(&self) -> std::io::Result<Vec<u8>> {
        std::fs::read(&self.path)
    }

    pub fn load(&self) -> Result<Ledger, LoadError> {
        let bytes = self.read_bytes().map_err(|e| LoadError {
            height: 0,
            cause: VerificationCause::TxnInvalid,
            reason: e.to_string(),
            prefix: Vec::new(),
        })?;
        load_ledger(&bytes)
    }

    pub fn verify(&self) -> std::io::Result<VerificationReport> {
        Ok(verify_bytes(&self.read_bytes()?))
    }
}
