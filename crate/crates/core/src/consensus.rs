//! Three-phase BFT agreement (pre-prepare / prepare / commit) on blocks.
//!
//! A [`ReplicaState`] is a deterministic state machine: one input (a message
//! or a proposal) in, a batch of broadcast messages and possibly committed
//! blocks out. It owns the node's ledger; blocks only ever enter the ledger
//! through a commit quorum.
//!
//! The primary of view `v` is node `v mod n`. Views never change.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::codec::SealedTxn;
use crate::digest::Digest;
use crate::ledger::{build_block, validate_successor, Block, Ledger, LedgerError, NodeId};

pub mod explore;

/// Default number of future heights whose messages are held back.
pub const DEFAULT_FUTURE_WINDOW: u64 = 4;

pub fn max_faults(n: usize) -> usize {
    n.saturating_sub(1) / 3
}

pub fn quorum_size(n: usize) -> usize {
    2 * max_faults(n) + 1
}

/// Vote threshold actually used by replicas. Equals `2f + 1` when
/// `n = 3f + 1`; for other `n` two sets of `2f + 1` can overlap only in
/// Byzantine replicas, so the threshold grows until any two quorums share
/// more than `f` members.
pub fn vote_threshold(n: usize, f: usize) -> usize {
    if f == 0 {
        return 1;
    }
    (2 * f + 1).max((n + f) / 2 + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConsensusConfig {
    pub n: usize,
    pub f: usize,
    pub quorum: usize,
}

impl ConsensusConfig {
    /// Largest tolerable `f` for `n` replicas.
    pub fn for_nodes(n: usize) -> Self {
        assert!(n >= 1, "a replica set needs at least one node");
        let f = max_faults(n);
        Self { n, f, quorum: vote_threshold(n, f) }
    }

    pub fn new(n: usize, f: usize) -> Result<Self, ConsensusError> {
        if n == 0 || n < 3 * f + 1 {
            return Err(ConsensusError::InvalidConfig { n, f });
        }
        Ok(Self { n, f, quorum: vote_threshold(n, f) })
    }

    pub fn primary(&self, view: u64) -> NodeId {
        (view % self.n as u64) as NodeId
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    PrePrepare,
    Prepare,
    Commit,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsensusMessage {
    pub kind: MessageKind,
    pub view: u64,
    pub height: u64,
    pub block_digest: Digest,
    pub sender: NodeId,
    /// Present on pre-prepares only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block: Option<Arc<Block>>,
}

/// Approximate encoded size of a vote (prepare/commit) on the wire.
pub const VOTE_WIRE_BYTES: usize = 160;

impl ConsensusMessage {
    pub fn vote(kind: MessageKind, view: u64, height: u64, block_digest: Digest, sender: NodeId) -> Self {
        Self { kind, view, height, block_digest, sender, block: None }
    }

    pub fn pre_prepare(view: u64, block: Arc<Block>, sender: NodeId) -> Self {
        Self {
            kind: MessageKind::PrePrepare,
            view,
            height: block.header.height,
            block_digest: block.digest(),
            sender,
            block: Some(block),
        }
    }

    pub fn wire_size(&self) -> usize {
        VOTE_WIRE_BYTES + self.block.as_ref().map_or(0, |b| b.wire_size())
    }

    fn check_shape(&self, n: usize) -> Result<(), ConsensusError> {
        if self.sender as usize >= n {
            return Err(ConsensusError::Malformed(format!("unknown sender {}", self.sender)));
        }
        match (&self.kind, &self.block) {
            (MessageKind::PrePrepare, None) => Err(ConsensusError::Malformed("pre-prepare without block".into())),
            (MessageKind::PrePrepare, Some(block)) => {
                if block.header.height != self.height || block.digest() != self.block_digest {
                    Err(ConsensusError::Malformed("pre-prepare block does not match its digest".into()))
                } else {
                    Ok(())
                }
            }
            (_, Some(_)) => Err(ConsensusError::Malformed("vote carries a block".into())),
            (_, None) => Ok(()),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ConsensusError {
    #[error("n={n} cannot tolerate f={f}")]
    InvalidConfig { n: usize, f: usize },
    #[error("node {0} is not the primary")]
    NotPrimary(NodeId),
    #[error("no pending transactions")]
    EmptyPending,
    #[error("a proposal for height {0} is already in progress")]
    RoundInProgress(u64),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("pre-prepare from non-primary {0}")]
    NotFromPrimary(NodeId),
    #[error("invalid proposed block: {0}")]
    InvalidBlock(LedgerError),
}

/// Result of one state-machine input.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct Step {
    /// Messages to broadcast to every other replica.
    pub outbound: Vec<ConsensusMessage>,
    /// Blocks appended to the local ledger, in height order.
    pub committed: Vec<Arc<Block>>,
}

impl Step {
    fn absorb(&mut self, other: Step) {
        self.outbound.extend(other.outbound);
        self.committed.extend(other.committed);
    }
}

/// Per-height voting bookkeeping.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
struct Round {
    proposal: Option<Arc<Block>>,
    prepares: BTreeMap<Digest, BTreeSet<NodeId>>,
    commits: BTreeMap<Digest, BTreeSet<NodeId>>,
    /// First message seen from each sender per phase; later ones are ignored.
    seen: BTreeMap<(MessageKind, NodeId), Digest>,
    sent_prepare: bool,
    sent_commit: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ReplicaState {
    id: NodeId,
    config: ConsensusConfig,
    view: u64,
    ledger: Ledger,
    round: Round,
    future: BTreeMap<u64, BTreeMap<(MessageKind, NodeId), ConsensusMessage>>,
    window: u64,
}

impl ReplicaState {
    pub fn new(id: NodeId, config: ConsensusConfig) -> Self {
        Self::with_ledger(id, config, Ledger::new())
    }

    pub fn with_ledger(id: NodeId, config: ConsensusConfig, ledger: Ledger) -> Self {
        Self {
            id,
            config,
            view: 0,
            ledger,
            round: Round::default(),
            future: BTreeMap::new(),
            window: DEFAULT_FUTURE_WINDOW,
        }
    }

    pub fn with_window(mut self, window: u64) -> Self {
        self.window = window;
        self
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn config(&self) -> &ConsensusConfig {
        &self.config
    }

    pub fn view(&self) -> u64 {
        self.view
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    /// Storage-level access for fault injection; bypasses consensus.
    pub fn ledger_storage_mut(&mut self) -> &mut Ledger {
        &mut self.ledger
    }

    pub fn is_primary(&self) -> bool {
        self.config.primary(self.view) == self.id
    }

    /// Height currently being agreed on.
    pub fn next_height(&self) -> u64 {
        self.ledger.height() + 1
    }

    pub fn has_proposal(&self) -> bool {
        self.round.proposal.is_some()
    }

    pub fn buffered_heights(&self) -> impl Iterator<Item = u64> + '_ {
        self.future.keys().copied()
    }

    /// Builds the next block from `pending` and broadcasts it with the
    /// primary's own prepare vote.
    pub fn propose(&mut self, pending: &[Arc<SealedTxn>], now: i64) -> Result<Step, ConsensusError> {
        if !self.is_primary() {
            return Err(ConsensusError::NotPrimary(self.id));
        }
        if pending.is_empty() {
            return Err(ConsensusError::EmptyPending);
        }
        if self.round.proposal.is_some() || self.round.sent_prepare {
            return Err(ConsensusError::RoundInProgress(self.next_height()));
        }
        let block = Arc::new(build_block(pending, self.ledger.head(), self.id, now).map_err(|e| match e {
            LedgerError::EmptyPending => ConsensusError::EmptyPending,
            other => ConsensusError::InvalidBlock(other),
        })?);
        let digest = block.digest();
        let height = block.header.height;
        self.round.seen.insert((MessageKind::PrePrepare, self.id), digest);
        self.round.proposal = Some(block.clone());
        let mut step = Step::default();
        step.outbound.push(ConsensusMessage::pre_prepare(self.view, block, self.id));
        self.cast(MessageKind::Prepare, height, digest, &mut step);
        self.advance(&mut step);
        Ok(step)
    }

    pub fn handle_message(&mut self, msg: ConsensusMessage) -> Result<Step, ConsensusError> {
        msg.check_shape(self.config.n)?;
        if msg.view != self.view || msg.sender == self.id {
            return Ok(Step::default());
        }
        let next = self.next_height();
        if msg.height < next {
            return Ok(Step::default());
        }
        if msg.height > next {
            if msg.height - next <= self.window {
                self.future.entry(msg.height).or_default().entry((msg.kind, msg.sender)).or_insert(msg);
            }
            return Ok(Step::default());
        }
        let mut step = Step::default();
        self.apply(msg, &mut step)?;
        self.advance(&mut step);
        Ok(step)
    }

    /// Records our own vote and queues it for broadcast.
    fn cast(&mut self, kind: MessageKind, height: u64, digest: Digest, step: &mut Step) {
        let round = &mut self.round;
        match kind {
            MessageKind::Prepare => {
                round.sent_prepare = true;
                round.prepares.entry(digest).or_default().insert(self.id);
            }
            MessageKind::Commit => {
                round.sent_commit = true;
                round.commits.entry(digest).or_default().insert(self.id);
            }
            MessageKind::PrePrepare => unreachable!("pre-prepares are sent by propose"),
        }
        round.seen.insert((kind, self.id), digest);
        step.outbound.push(ConsensusMessage::vote(kind, self.view, height, digest, self.id));
    }

    fn apply(&mut self, msg: ConsensusMessage, step: &mut Step) -> Result<(), ConsensusError> {
        let key = (msg.kind, msg.sender);
        if self.round.seen.contains_key(&key) {
            return Ok(());
        }
        if msg.kind == MessageKind::PrePrepare {
            // Rejected proposals leave no trace in the round.
            if msg.sender != self.config.primary(self.view) {
                return Err(ConsensusError::NotFromPrimary(msg.sender));
            }
            let block = msg.block.as_ref().expect("shape checked");
            validate_successor(self.ledger.head(), block).map_err(ConsensusError::InvalidBlock)?;
        }
        self.round.seen.insert(key, msg.block_digest);
        match msg.kind {
            MessageKind::PrePrepare => {
                let block = msg.block.expect("shape checked");
                if self.round.proposal.is_none() && !self.round.sent_prepare {
                    self.round.proposal = Some(block);
                    self.cast(MessageKind::Prepare, msg.height, msg.block_digest, step);
                }
            }
            MessageKind::Prepare => {
                self.round.prepares.entry(msg.block_digest).or_default().insert(msg.sender);
            }
            MessageKind::Commit => {
                self.round.commits.entry(msg.block_digest).or_default().insert(msg.sender);
            }
        }
        Ok(())
    }

    /// Emits a commit once prepared, appends once committed, then replays
    /// any buffered messages for the new height.
    fn advance(&mut self, step: &mut Step) {
        loop {
            let Some(block) = self.round.proposal.clone() else { return };
            let digest = block.digest();
            let height = block.header.height;
            let votes = |map: &BTreeMap<Digest, BTreeSet<NodeId>>| map.get(&digest).map_or(0, BTreeSet::len);
            if !self.round.sent_commit && votes(&self.round.prepares) >= self.config.quorum {
                self.cast(MessageKind::Commit, height, digest, step);
            }
            if !(self.round.sent_commit && votes(&self.round.commits) >= self.config.quorum) {
                return;
            }
            self.ledger.append((*block).clone()).expect("proposal was validated against the head");
            step.committed.push(block);
            self.round = Round::default();
            let next = self.next_height();
            self.future.retain(|&h, _| h >= next);
            if let Some(buffered) = self.future.remove(&next) {
                // PrePrepare sorts first, so votes land after the proposal.
                for (_, msg) in buffered {
                    let mut inner = Step::default();
                    // Buffered messages were shape-checked on arrival; an
                    // invalid pre-prepare is dropped here like a live one.
                    let _ = self.apply(msg, &mut inner);
                    step.absorb(inner);
                }
            }
        }
    }
}

/// Feeds a recorded message sequence into a fresh replica.
pub fn replay<I>(id: NodeId, config: ConsensusConfig, messages: I) -> (ReplicaState, Vec<Arc<Block>>)
where
    I: IntoIterator<Item = ConsensusMessage>,
{
    let mut replica = ReplicaState::new(id, config);
    let mut committed = Vec::new();
    for msg in messages {
        if let Ok(step) = replica.handle_message(msg) {
            committed.extend(step.committed);
        }
    }
    (replica, committed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::EventKind;
    use crate::codec::{AuditTransaction, TxnDetail, WireDate};
    use uuid::Uuid;

    fn sealed(seq: u128) -> Arc<SealedTxn> {
        SealedTxn::new(AuditTransaction {
            class_name: "E".into(),
            created_date: WireDate::new(0, 0),
            entity_id: 1,
            event_type: EventKind::Insert,
            id: Uuid::from_u128(seq),
            session_id: Uuid::nil(),
            url: String::new(),
            user_id: 1,
            details: vec![TxnDetail {
                id: Uuid::from_u128(seq + 1000),
                new_value: Some(seq.to_string()),
                old_value: None,
                property_name: "x".into(),
            }],
        })
        .unwrap()
    }

    #[test]
    fn bounds() {
        assert_eq!((max_faults(4), quorum_size(4)), (1, 3));
        assert_eq!((max_faults(31), quorum_size(31)), (10, 21));
        assert_eq!((max_faults(3), quorum_size(3)), (0, 1));
        assert_eq!((max_faults(1), quorum_size(1)), (0, 1));
        assert!(ConsensusConfig::new(3, 1).is_err());
        assert_eq!(ConsensusConfig::new(4, 1).unwrap(), ConsensusConfig::for_nodes(4));
    }

    #[test]
    fn vote_threshold_keeps_quorums_intersecting_in_an_honest_replica() {
        for n in 1..=64usize {
            let f = max_faults(n);
            let q = vote_threshold(n, f);
            if n % 3 == 1 {
                assert_eq!(q, quorum_size(n), "n={n}");
            }
            assert!(q <= n - f, "n={n}: honest replicas alone must reach a quorum");
            if f > 0 {
                assert!(2 * q > n + f, "n={n}: quorum overlap must exceed f");
            }
        }
    }

    #[test]
    fn primary_proposes_non_primary_cannot() {
        let config = ConsensusConfig::for_nodes(4);
        let mut primary = ReplicaState::new(0, config);
        let step = primary.propose(&[sealed(1)], 5).unwrap();
        let kinds: Vec<_> = step.outbound.iter().map(|m| m.kind).collect();
        assert_eq!(kinds, [MessageKind::PrePrepare, MessageKind::Prepare]);
        let block = step.outbound[0].block.clone().unwrap();
        assert_eq!(block.header.prev_hash, primary.ledger().head().digest());
        assert!(matches!(primary.propose(&[sealed(2)], 6), Err(ConsensusError::RoundInProgress(1))));

        let mut replica = ReplicaState::new(1, config);
        assert_eq!(replica.propose(&[sealed(1)], 5), Err(ConsensusError::NotPrimary(1)));
        let mut fresh = ReplicaState::new(0, config);
        assert_eq!(fresh.propose(&[], 5), Err(ConsensusError::EmptyPending));
    }

    #[test]
    fn prepare_quorum_with_own_vote_triggers_commit() {
        let config = ConsensusConfig::for_nodes(4);
        let mut primary = ReplicaState::new(0, config);
        let pp = primary.propose(&[sealed(1)], 5).unwrap().outbound.remove(0);
        let digest = pp.block_digest;
        let mut r1 = ReplicaState::new(1, config);
        let step = r1.handle_message(pp).unwrap();
        assert_eq!(step.outbound.len(), 1);
        assert_eq!(step.outbound[0].kind, MessageKind::Prepare);
        // Prepare from node 0 only: 2 votes, below quorum 3.
        let step = r1.handle_message(ConsensusMessage::vote(MessageKind::Prepare, 0, 1, digest, 0)).unwrap();
        assert!(step.outbound.is_empty());
        let before = r1.clone();
        let dup = r1.handle_message(ConsensusMessage::vote(MessageKind::Prepare, 0, 1, digest, 0)).unwrap();
        assert!(dup.outbound.is_empty());
        assert_eq!(r1, before);
        let step = r1.handle_message(ConsensusMessage::vote(MessageKind::Prepare, 0, 1, digest, 2)).unwrap();
        assert_eq!(step.outbound.len(), 1);
        assert_eq!(step.outbound[0].kind, MessageKind::Commit);
        // Commits: own + 2 others.
        r1.handle_message(ConsensusMessage::vote(MessageKind::Commit, 0, 1, digest, 0)).unwrap();
        let step = r1.handle_message(ConsensusMessage::vote(MessageKind::Commit, 0, 1, digest, 3)).unwrap();
        assert_eq!(step.committed.len(), 1);
        assert_eq!(r1.ledger().height(), 1);
    }

    #[test]
    fn invalid_pre_prepare_rejected() {
        let config = ConsensusConfig::for_nodes(4);
        let mut primary = ReplicaState::new(0, config);
        let pp = primary.propose(&[sealed(1)], 5).unwrap().outbound.remove(0);
        let mut block = (**pp.block.as_ref().unwrap()).clone();
        block.header.prev_hash = Digest::of(b"wrong");
        let forged = ConsensusMessage::pre_prepare(0, Arc::new(block), 0);
        let mut r1 = ReplicaState::new(1, config);
        assert!(matches!(
            r1.handle_message(forged),
            Err(ConsensusError::InvalidBlock(LedgerError::WrongPrevHash { .. }))
        ));
        assert!(!r1.has_proposal());

        let mut r2 = ReplicaState::new(2, config);
        let mut from_replica = pp.clone();
        from_replica.sender = 3;
        assert_eq!(r2.handle_message(from_replica), Err(ConsensusError::NotFromPrimary(3)));

        let mut no_block = pp.clone();
        no_block.block = None;
        assert!(matches!(r2.handle_message(no_block), Err(ConsensusError::Malformed(_))));
        let mut bad_sender = pp;
        bad_sender.sender = 9;
        assert!(matches!(r2.handle_message(bad_sender), Err(ConsensusError::Malformed(_))));
    }

    #[test]
    fn future_messages_buffered_then_replayed() {
        let config = ConsensusConfig::for_nodes(1);
        // n=1: the primary commits alone.
        let mut solo = ReplicaState::new(0, config);
        let step = solo.propose(&[sealed(1)], 1).unwrap();
        assert_eq!(step.committed.len(), 1);

        let config = ConsensusConfig::for_nodes(4);
        let mut nodes: Vec<ReplicaState> = (0..4).map(|i| ReplicaState::new(i, config)).collect();
        // Run height 1 fully on nodes 0..3 except node 3, collecting height-2 traffic.
        let mut queue: Vec<(NodeId, ConsensusMessage)> =
            nodes[0].propose(&[sealed(1)], 1).unwrap().outbound.into_iter().map(|m| (0, m)).collect();
        let mut held_for_3 = Vec::new();
        while let Some((from, msg)) = queue.pop() {
            for to in 0..3u32 {
                if to == from {
                    continue;
                }
                let step = nodes[to as usize].handle_message(msg.clone()).unwrap();
                queue.extend(step.outbound.into_iter().map(|m| (to, m)));
            }
            held_for_3.push(msg);
        }
        assert!(nodes[..3].iter().all(|n| n.ledger().height() == 1));
        let step = nodes[0].propose(&[sealed(2)], 2).unwrap();
        // Height-2 messages reach node 3 before any height-1 traffic.
        for msg in &step.outbound {
            assert!(nodes[3].handle_message(msg.clone()).unwrap().outbound.is_empty());
        }
        assert_eq!(nodes[3].buffered_heights().collect::<Vec<_>>(), [2]);
        let mut committed = 0;
        for msg in held_for_3 {
            committed += nodes[3].handle_message(msg).unwrap().committed.len();
        }
        assert_eq!(committed, 1);
        assert!(nodes[3].has_proposal(), "buffered height-2 pre-prepare applied after commit");
    }

    #[test]
    fn trace_messages_serialize() {
        let config = ConsensusConfig::for_nodes(4);
        let mut primary = ReplicaState::new(0, config);
        let step = primary.propose(&[sealed(1)], 5).unwrap();
        for msg in step.outbound {
            let json = crate::canonical::to_canonical_bytes(&msg).unwrap();
            let back: ConsensusMessage = serde_json::from_slice(&json).unwrap();
            assert_eq!(back, msg);
        }
    }
}
