//! Per-node append-only block chain.
//!
//! Each block header commits to its predecessor (`prev_hash`) and to its
//! transactions (`txn_root`, a binary Merkle root over transaction digests
//! with the last node duplicated on odd levels). A block's identity is the
//! digest of its canonical header encoding.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use uuid::Uuid;

use crate::canonical::to_canonical_bytes;
use crate::capture::EventKind;
use crate::codec::{AuditTransaction, SealedTxn};
use crate::digest::Digest;

pub mod store;

pub use store::{load_ledger, verify_bytes, LedgerFile, LoadError};

pub type NodeId = u32;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum LedgerError {
    #[error("no pending transactions")]
    EmptyPending,
    #[error("duplicate transaction {0}")]
    DuplicateTxn(Uuid),
    #[error("expected height {expected}, got {got}")]
    WrongHeight { expected: u64, got: u64 },
    #[error("block {height} does not link to the current head")]
    WrongPrevHash { height: u64 },
    #[error("block {height} transaction root does not match its transactions")]
    InvalidRoot { height: u64 },
    #[error("non-genesis block {height} carries no transactions")]
    EmptyBlock { height: u64 },
    #[error("ledgers do not share a genesis block")]
    GenesisMismatch,
}

/// Size/time thresholds for cutting a block from the mempool: a block is
/// proposed once pending bytes reach `max_block_bytes` or the oldest pending
/// transaction has waited `block_timeout_ms`, whichever happens first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPolicy {
    pub max_block_bytes: usize,
    pub block_timeout_ms: u64,
}

impl Default for BlockPolicy {
    fn default() -> Self {
        Self { max_block_bytes: 1_000_000, block_timeout_ms: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockHeader {
    pub height: u64,
    pub prev_hash: Digest,
    pub txn_root: Digest,
    pub timestamp: i64,
    pub proposer: NodeId,
}

impl BlockHeader {
    /// Canonical JSON of the header, written directly since it is hashed on
    /// every vote check. Keys are in sorted order.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        format!(
            "{{\"height\":{},\"prev_hash\":\"{}\",\"proposer\":{},\"timestamp\":{},\"txn_root\":\"{}\"}}",
            self.height,
            self.prev_hash.to_hex(),
            self.proposer,
            self.timestamp,
            self.txn_root.to_hex()
        )
        .into_bytes()
    }

    pub fn digest(&self) -> Digest {
        Digest::of(&self.canonical_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub header: BlockHeader,
    pub txns: Vec<Arc<SealedTxn>>,
}

/// Approximate framing overhead of a block on the wire beyond its transactions.
const HEADER_WIRE_BYTES: usize = 256;

impl Block {
    pub fn digest(&self) -> Digest {
        self.header.digest()
    }

    pub fn height(&self) -> u64 {
        self.header.height
    }

    pub fn txn_digests(&self) -> Vec<Digest> {
        self.txns.iter().map(|t| t.digest()).collect()
    }

    pub fn computed_root(&self) -> Digest {
        merkle_root(&self.txn_digests())
    }

    /// Bytes a full copy of this block occupies on a link.
    pub fn wire_size(&self) -> usize {
        HEADER_WIRE_BYTES + self.txns.iter().map(|t| t.encoded_len()).sum::<usize>()
    }

    fn has_unique_ids(&self) -> bool {
        let mut seen = HashSet::with_capacity(self.txns.len());
        self.txns.iter().all(|t| seen.insert(t.id()))
    }
}

impl std::hash::Hash for Block {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.header.hash(state);
        for txn in &self.txns {
            txn.hash(state);
        }
    }
}

#[derive(Serialize)]
struct BlockRef<'a> {
    header: &'a BlockHeader,
    txns: Vec<&'a AuditTransaction>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockOwned {
    header: BlockHeader,
    txns: Vec<AuditTransaction>,
}

impl Serialize for Block {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        BlockRef { header: &self.header, txns: self.txns.iter().map(|t| t.txn()).collect() }.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Block {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let owned = BlockOwned::deserialize(deserializer)?;
        let txns = owned
            .txns
            .into_iter()
            .map(SealedTxn::new)
            .collect::<Result<Vec<_>, _>>()
            .map_err(serde::de::Error::custom)?;
        Ok(Block { header: owned.header, txns })
    }
}

/// Binary Merkle root; odd levels duplicate their last node. The empty list
/// hashes to the zero digest.
pub fn merkle_root(leaves: &[Digest]) -> Digest {
    if leaves.is_empty() {
        return Digest::ZERO;
    }
    let mut level = leaves.to_vec();
    while level.len() > 1 {
        if level.len() % 2 == 1 {
            level.push(*level.last().expect("non-empty"));
        }
        level = level.chunks_exact(2).map(|pair| Digest::combine(&pair[0], &pair[1])).collect();
    }
    level[0]
}

pub fn block_digest(block: &Block) -> Digest {
    block.digest()
}

/// The shared first block. All fields are fixed so every node derives the
/// same genesis independently.
pub fn genesis() -> Block {
    Block {
        header: BlockHeader { height: 0, prev_hash: Digest::ZERO, txn_root: Digest::ZERO, timestamp: 0, proposer: 0 },
        txns: Vec::new(),
    }
}

pub fn build_block(pending: &[Arc<SealedTxn>], prev: &Block, proposer: NodeId, now: i64) -> Result<Block, LedgerError> {
    if pending.is_empty() {
        return Err(LedgerError::EmptyPending);
    }
    let mut ids = HashSet::with_capacity(pending.len());
    let mut digests = HashSet::with_capacity(pending.len());
    for txn in pending {
        if !ids.insert(txn.id()) || !digests.insert(txn.digest()) {
            return Err(LedgerError::DuplicateTxn(txn.id()));
        }
    }
    let digests: Vec<Digest> = pending.iter().map(|t| t.digest()).collect();
    Ok(Block {
        header: BlockHeader {
            height: prev.header.height + 1,
            prev_hash: prev.digest(),
            txn_root: merkle_root(&digests),
            timestamp: now,
            proposer,
        },
        txns: pending.to_vec(),
    })
}

/// Checks that `block` can extend a chain whose head is `head`.
pub fn validate_successor(head: &Block, block: &Block) -> Result<(), LedgerError> {
    let expected = head.header.height + 1;
    if block.header.height != expected {
        return Err(LedgerError::WrongHeight { expected, got: block.header.height });
    }
    if block.header.prev_hash != head.digest() {
        return Err(LedgerError::WrongPrevHash { height: block.header.height });
    }
    if block.txns.is_empty() {
        return Err(LedgerError::EmptyBlock { height: block.header.height });
    }
    if !block.has_unique_ids() {
        let mut seen = HashSet::new();
        let dup = block.txns.iter().find(|t| !seen.insert(t.id())).expect("duplicate exists");
        return Err(LedgerError::DuplicateTxn(dup.id()));
    }
    if block.computed_root() != block.header.txn_root {
        return Err(LedgerError::InvalidRoot { height: block.header.height });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Ledger {
    blocks: Vec<Block>,
}

impl Default for Ledger {
    fn default() -> Self {
        Self::new()
    }
}

impl Ledger {
    pub fn new() -> Self {
        Self { blocks: vec![genesis()] }
    }

    /// Wraps blocks without any validation; use [`verify_chain`] to check them.
    pub fn from_blocks_unchecked(blocks: Vec<Block>) -> Self {
        Self { blocks }
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn head(&self) -> &Block {
        self.blocks.last().expect("ledger always holds genesis")
    }

    pub fn height(&self) -> u64 {
        self.head().header.height
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn get(&self, height: u64) -> Option<&Block> {
        self.blocks.get(usize::try_from(height).ok()?)
    }

    pub fn append(&mut self, block: Block) -> Result<(), LedgerError> {
        validate_successor(self.head(), &block)?;
        self.blocks.push(block);
        Ok(())
    }

    /// Direct mutable access to stored blocks, bypassing every check. This is
    /// the storage-level access an attacker with physical access has; honest
    /// code paths only ever call [`Ledger::append`].
    pub fn storage_mut(&mut self) -> &mut Vec<Block> {
        &mut self.blocks
    }

    pub fn iter_txns(&self) -> impl Iterator<Item = &Arc<SealedTxn>> {
        self.blocks.iter().flat_map(|b| b.txns.iter())
    }

    pub fn contains_txn(&self, id: Uuid) -> bool {
        self.iter_txns().any(|t| t.id() == id)
    }
}

pub fn append_block(ledger: &mut Ledger, block: Block) -> Result<(), LedgerError> {
    ledger.append(block)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VerificationCause {
    HashMismatch,
    RootMismatch,
    HeightGap,
    TxnInvalid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub ok: bool,
    pub first_bad_height: Option<u64>,
    pub cause: Option<VerificationCause>,
}

impl VerificationReport {
    pub fn clean() -> Self {
        Self { ok: true, first_bad_height: None, cause: None }
    }

    pub fn failed(height: u64, cause: VerificationCause) -> Self {
        Self { ok: false, first_bad_height: Some(height), cause: Some(cause) }
    }
}

/// Recomputes every link and root and reports the lowest violation.
pub fn verify_chain(ledger: &Ledger) -> VerificationReport {
    verify_blocks(ledger.blocks())
}

pub(crate) fn verify_blocks(blocks: &[Block]) -> VerificationReport {
    use VerificationCause::*;
    let genesis_digest = genesis().digest();
    for (index, block) in blocks.iter().enumerate() {
        let index = index as u64;
        let header = &block.header;
        if header.height != index {
            return VerificationReport::failed(index, HeightGap);
        }
        if index == 0 {
            if block.digest() != genesis_digest || !block.txns.is_empty() {
                return VerificationReport::failed(0, HashMismatch);
            }
            continue;
        }
        let prev = &blocks[index as usize - 1];
        if header.prev_hash != prev.digest() {
            return VerificationReport::failed(index, HashMismatch);
        }
        if block.txns.is_empty() || !block.has_unique_ids() || block.txns.iter().any(|t| t.txn().validate().is_err()) {
            return VerificationReport::failed(index, TxnInvalid);
        }
        if block.computed_root() != header.txn_root {
            return VerificationReport::failed(index, RootMismatch);
        }
    }
    VerificationReport::clean()
}

/// Lowest height at which the two chains hold different blocks, or `None`
/// when one is a prefix of the other. A block is compared by its header
/// digest and by the root recomputed from the transactions it actually holds,
/// so payload edits that leave the header alone are still exposed.
pub fn diff_against_peer(local: &Ledger, remote: &Ledger) -> Result<Option<u64>, LedgerError> {
    let fingerprint = |b: &Block| (b.digest(), b.computed_root());
    match (local.blocks.first(), remote.blocks.first()) {
        (Some(a), Some(b)) if fingerprint(a) == fingerprint(b) => {}
        _ => return Err(LedgerError::GenesisMismatch),
    }
    Ok(local.blocks.iter().zip(&remote.blocks).position(|(a, b)| fingerprint(a) != fingerprint(b)).map(|h| h as u64))
}

/// All committed transactions for one entity, in chain order.
pub fn query_history(ledger: &Ledger, entity_name: &str, entity_id: i64) -> Vec<AuditTransaction> {
    ledger
        .iter_txns()
        .filter(|t| t.txn().class_name == entity_name && t.txn().entity_id == entity_id)
        .map(|t| t.txn().clone())
        .collect()
}

/// State of one entity rebuilt from its audit history.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityState {
    pub properties: BTreeMap<String, Option<String>>,
    pub deleted: bool,
    /// The history did not start with an insert, so properties never touched
    /// by a recorded change are unknown.
    pub incomplete_history: bool,
    pub applied: usize,
}

impl EntityState {
    pub fn canonical_bytes(&self) -> Vec<u8> {
        to_canonical_bytes(self).expect("state serialization is infallible")
    }

    pub fn get(&self, property: &str) -> Option<&str> {
        self.properties.get(property).and_then(|v| v.as_deref())
    }
}

/// Applies one transaction to a replayed state.
pub fn apply_to_state(state: &mut EntityState, txn: &AuditTransaction) {
    if state.applied == 0 && txn.event_type != EventKind::Insert {
        state.incomplete_history = true;
    }
    match txn.event_type {
        EventKind::Insert => {
            state.properties.clear();
            state.deleted = false;
            for d in &txn.details {
                state.properties.insert(d.property_name.clone(), d.new_value.clone());
            }
        }
        EventKind::Update => {
            for d in &txn.details {
                state.properties.insert(d.property_name.clone(), d.new_value.clone());
            }
        }
        EventKind::Delete => {
            for d in &txn.details {
                state.properties.entry(d.property_name.clone()).or_insert_with(|| d.old_value.clone());
            }
            state.deleted = true;
        }
    }
    state.applied += 1;
}

/// Replays the entity's committed history in chain order.
pub fn restore_state(ledger: &Ledger, entity_name: &str, entity_id: i64) -> EntityState {
    let mut state = EntityState::default();
    for txn in query_history(ledger, entity_name, entity_id) {
        apply_to_state(&mut state, &txn);
    }
    state
}
