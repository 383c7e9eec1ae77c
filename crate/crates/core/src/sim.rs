//! Deterministic discrete-event simulation of a full-mesh peer network.
//!
//! Every node runs a [`ReplicaState`] plus a mempool. Time is integer
//! milliseconds; events fire in `(fire_time, sequence)` order, so a run is a
//! pure function of the config, the submissions and the injected faults.
//!
//! Transport: a `b`-byte message sent at `t` arrives at
//! `t + link_latency_ms + ceil(b / bandwidth)`, optionally scaled by uniform
//! multiplicative jitter. Each node also has one CPU: handling a message
//! costs a fixed per-message time plus a per-byte time, and messages queue
//! behind each other. Outputs leave when handling finishes.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashSet, VecDeque};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use uuid::Uuid;

use crate::capture::EventKind;
use crate::codec::{AuditTransaction, CodecError, SealedTxn, TxnDetail, WireDate};
use crate::consensus::{ConsensusConfig, ConsensusMessage, MessageKind, ReplicaState};
use crate::digest::Digest;
use crate::ledger::{build_block, restore_state, store, Block, BlockPolicy, Ledger, NodeId};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {node} has no block at height {height}")]
    NoSuchBlock { node: NodeId, height: u64 },
    #[error("block {height} has no mutable text to tamper with")]
    NothingToTamper { height: u64 },
    #[error("cannot schedule at {at} ms, the clock is already at {now} ms")]
    InThePast { at: u64, now: u64 },
    #[error("invalid transaction: {0}")]
    InvalidTxn(#[from] CodecError),
    #[error("replacement ledger fails verification at height {height}")]
    UnverifiedLedger { height: u64 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-node processing cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CpuModel {
    /// Fixed cost of handling any message (signature check, bookkeeping).
    pub per_message_us: u64,
    /// Throughput for hashing and parsing message bodies.
    pub bytes_per_us: u64,
}

impl Default for CpuModel {
    fn default() -> Self {
        Self { per_message_us: 3_000, bytes_per_us: 500 }
    }
}

impl CpuModel {
    /// Zero processing cost; outputs leave at the arrival time.
    pub fn instant() -> Self {
        Self { per_message_us: 0, bytes_per_us: u64::MAX }
    }

    pub fn cost_us(&self, bytes: usize) -> u64 {
        self.per_message_us + bytes as u64 / self.bytes_per_us
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_nodes: usize,
    pub link_latency_ms: u64,
    /// Bytes per millisecond on each directed link.
    pub bandwidth: u64,
    /// Multiplicative delay noise in `[0, 1)`.
    pub jitter_fraction: f64,
    pub rng_seed: u64,
    pub cpu: CpuModel,
    pub block_policy: BlockPolicy,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_nodes: 4,
            link_latency_ms: 5,
            bandwidth: 12_500,
            jitter_fraction: 0.0,
            rng_seed: 0,
            cpu: CpuModel::default(),
            block_policy: BlockPolicy::default(),
        }
    }
}

impl SimConfig {
    pub fn with_nodes(n_nodes: usize) -> Self {
        Self { n_nodes, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: &str| Err(SimError::InvalidConfig(msg.to_string()));
        if self.n_nodes == 0 {
            return bad("n_nodes must be at least 1");
        }
        if self.bandwidth == 0 {
            return bad("bandwidth must be positive");
        }
        if !(0.0..1.0).contains(&self.jitter_fraction) {
            return bad("jitter_fraction must be in [0, 1)");
        }
        if self.cpu.bytes_per_us == 0 {
            return bad("cpu.bytes_per_us must be positive");
        }
        if self.block_policy.max_block_bytes == 0 {
            return bad("max_block_bytes must be positive");
        }
        Ok(())
    }

    /// Delay of a `bytes`-sized message on one link, before jitter.
    pub fn transit_ms(&self, bytes: usize) -> u64 {
        self.link_latency_ms + (bytes as u64).div_ceil(self.bandwidth)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FaultBehavior {
    /// Flip one byte of transaction text inside the target's stored block.
    /// The offset indexes the concatenated text fields of the block's
    /// transactions and wraps around.
    TamperLocalLedger { height: u64, byte_offset: usize },
    /// Votes (and, as primary, proposals) differ between the two halves of
    /// the peer set.
    Equivocate,
    /// Each outbound consensus message is lost with this probability.
    DropOutbound { fraction: f64 },
    /// As primary, send a block with a corrupted root to half the peers; as
    /// a backup, broadcast forged proposals alongside each prepare.
    InvalidBlocks,
    /// An attacker with application access submits a write through the
    /// target node.
    ForgeAppWrite { entity: String, entity_id: i64, property: String, value: String, user_id: i64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub target: NodeId,
    pub behavior: FaultBehavior,
}

impl FaultBehavior {
    /// Behaviors that deviate from the consensus protocol.
    pub fn is_byzantine(&self) -> bool {
        matches!(self, Self::Equivocate | Self::DropOutbound { .. } | Self::InvalidBlocks)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubmitOutcome {
    Accepted,
    Duplicate,
}

#[derive(Debug, Clone)]
enum Payload {
    Txn(Arc<SealedTxn>),
    Consensus(ConsensusMessage),
}

impl Payload {
    fn size(&self) -> usize {
        match self {
            Self::Txn(t) => t.encoded_len(),
            Self::Consensus(m) => m.wire_size(),
        }
    }
}

#[derive(Debug, Clone)]
enum Action {
    Deliver { from: NodeId, to: NodeId, payload: Payload },
    Submit { node: NodeId, txn: Arc<SealedTxn> },
    Timer { node: NodeId },
    Inject(FaultSpec),
}

#[derive(Debug, Clone)]
pub struct SimEvent {
    pub fire_time: u64,
    pub sequence: u64,
    action: Action,
}

impl PartialEq for SimEvent {
    fn eq(&self, other: &Self) -> bool {
        (self.fire_time, self.sequence) == (other.fire_time, other.sequence)
    }
}

impl Eq for SimEvent {}

impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SimEvent {
    // Reversed: BinaryHeap is a max-heap and we want the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.fire_time, other.sequence).cmp(&(self.fire_time, self.sequence))
    }
}

#[derive(Debug, Clone, Default)]
struct Byzantine {
    equivocate: bool,
    drop_fraction: f64,
    invalid_blocks: bool,
}

impl Byzantine {
    fn any(&self) -> bool {
        self.equivocate || self.drop_fraction > 0.0 || self.invalid_blocks
    }
}

#[derive(Debug)]
struct Node {
    replica: ReplicaState,
    /// (arrival ms, txn); entries no longer in `pending` are stale.
    mempool: VecDeque<(u64, Arc<SealedTxn>)>,
    pending: HashSet<Uuid>,
    pending_bytes: usize,
    /// Every transaction id this node has accepted or committed.
    known: HashSet<Uuid>,
    cpu_free_us: u64,
    timer_at: Option<u64>,
    byzantine: Byzantine,
    /// Digest a Byzantine primary showed the other half of its peers.
    alternate: BTreeMap<u64, Digest>,
}

impl Node {
    fn new(id: NodeId, consensus: ConsensusConfig) -> Self {
        Self {
            replica: ReplicaState::new(id, consensus),
            mempool: VecDeque::new(),
            pending: HashSet::new(),
            pending_bytes: 0,
            known: HashSet::new(),
            cpu_free_us: 0,
            timer_at: None,
            byzantine: Byzantine::default(),
            alternate: BTreeMap::new(),
        }
    }

    fn drop_stale(&mut self) {
        while let Some((_, txn)) = self.mempool.front() {
            if self.pending.contains(&txn.id()) {
                break;
            }
            self.mempool.pop_front();
        }
    }

    /// Occupies the CPU from `at_ms` for one message of `bytes` and returns
    /// the completion time in milliseconds.
    fn process(&mut self, cpu: &CpuModel, at_ms: u64, bytes: usize) -> u64 {
        let start = self.cpu_free_us.max(at_ms * 1000);
        self.cpu_free_us = start + cpu.cost_us(bytes);
        self.cpu_free_us.div_ceil(1000)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageCounts {
    pub txn: u64,
    pub pre_prepare: u64,
    pub prepare: u64,
    pub commit: u64,
    /// Consensus messages discarded by a `DropOutbound` sender.
    pub dropped: u64,
}

impl MessageCounts {
    pub fn consensus(&self) -> u64 {
        self.pre_prepare + self.prepare + self.commit
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxnTiming {
    pub generated_at: u64,
    pub origin: NodeId,
    /// Commit time per node.
    pub commits: BTreeMap<NodeId, u64>,
}

impl TxnTiming {
    /// Latest commit time over `nodes`, if all of them committed.
    pub fn committed_by_all(&self, nodes: &[NodeId]) -> Option<u64> {
        nodes.iter().map(|n| self.commits.get(n).copied()).try_fold(0, |acc, t| t.map(|t| acc.max(t)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSummary {
    pub id: NodeId,
    pub height: u64,
    pub head: Digest,
    pub byzantine: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimReport {
    /// False when the deadline stopped the run with events still queued.
    pub quiescent: bool,
    pub end_time_ms: u64,
    pub events_processed: u64,
    pub txns: BTreeMap<Uuid, TxnTiming>,
    pub nodes: Vec<NodeSummary>,
    pub messages: MessageCounts,
    pub trace_digest: Digest,
}

impl SimReport {
    pub fn honest_nodes(&self) -> Vec<NodeId> {
        self.nodes.iter().filter(|n| !n.byzantine).map(|n| n.id).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization is infallible")
    }
}

/// One line of the optional trace file: a consensus message as delivered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub time: u64,
    pub from: NodeId,
    pub to: NodeId,
    pub message: ConsensusMessage,
}

pub struct SimNetwork {
    config: SimConfig,
    consensus: ConsensusConfig,
    now: u64,
    sequence: u64,
    queue: BinaryHeap<SimEvent>,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
    txns: BTreeMap<Uuid, TxnTiming>,
    counts: MessageCounts,
    events_processed: u64,
    trace_hash: Sha256,
    trace_out: Option<Box<dyn Write + Send>>,
}

impl std::fmt::Debug for SimNetwork {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimNetwork")
            .field("n_nodes", &self.nodes.len())
            .field("now", &self.now)
            .field("queued", &self.queue.len())
            .finish()
    }
}

pub fn spawn_network(config: SimConfig) -> Result<SimNetwork, SimError> {
    SimNetwork::new(config)
}

impl SimNetwork {
    pub fn new(config: SimConfig) -> Result<Self, SimError> {
        config.validate()?;
        let consensus = ConsensusConfig::for_nodes(config.n_nodes);
        let nodes = (0..config.n_nodes as NodeId).map(|id| Node::new(id, consensus)).collect();
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.rng_seed),
            config,
            consensus,
            now: 0,
            sequence: 0,
            queue: BinaryHeap::new(),
            nodes,
            txns: BTreeMap::new(),
            counts: MessageCounts::default(),
            events_processed: 0,
            trace_hash: Sha256::new(),
            trace_out: None,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn consensus_config(&self) -> ConsensusConfig {
        self.consensus
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Directed links in the full mesh.
    pub fn link_count(&self) -> usize {
        self.nodes.len() * (self.nodes.len() - 1)
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    /// Queued events in firing order.
    pub fn scheduled(&self) -> Vec<(u64, u64)> {
        let mut out: Vec<_> = self.queue.iter().map(|e| (e.fire_time, e.sequence)).collect();
        out.sort_unstable();
        out
    }

    pub fn ledger(&self, node: NodeId) -> Result<&Ledger, SimError> {
        Ok(self.node(node)?.replica.ledger())
    }

    pub fn replica(&self, node: NodeId) -> Result<&ReplicaState, SimError> {
        Ok(&self.node(node)?.replica)
    }

    pub fn mempool_len(&self, node: NodeId) -> Result<usize, SimError> {
        Ok(self.node(node)?.pending.len())
    }

    pub fn head_digests(&self) -> Vec<Digest> {
        self.nodes.iter().map(|n| n.replica.ledger().head().digest()).collect()
    }

    pub fn is_byzantine(&self, node: NodeId) -> bool {
        self.nodes.get(node as usize).is_some_and(|n| n.byzantine.any())
    }

    pub fn honest_nodes(&self) -> Vec<NodeId> {
        (0..self.nodes.len() as NodeId).filter(|&n| !self.is_byzantine(n)).collect()
    }

    /// Streams every consensus delivery as a JSON line to `out`.
    pub fn set_trace_writer(&mut self, out: Box<dyn Write + Send>) {
        self.trace_out = Some(out);
    }

    /// Replaces a node's chain, e.g. with a copy fetched from honest peers
    /// after local corruption. The replacement must verify.
    pub fn replace_ledger(&mut self, node: NodeId, ledger: Ledger) -> Result<(), SimError> {
        self.check_node(node)?;
        let report = crate::ledger::verify_chain(&ledger);
        if !report.ok {
            return Err(SimError::UnverifiedLedger { height: report.first_bad_height.unwrap_or(0) });
        }
        let state = &mut self.nodes[node as usize];
        for txn in ledger.iter_txns() {
            if state.pending.remove(&txn.id()) {
                state.pending_bytes -= txn.encoded_len();
            }
            state.known.insert(txn.id());
        }
        *state.replica.ledger_storage_mut() = ledger;
        Ok(())
    }

    /// Writes each node's chain to `dir/node-<id>.ledger`.
    pub fn persist(&self, dir: impl AsRef<Path>) -> Result<(), SimError> {
        std::fs::create_dir_all(dir.as_ref())?;
        for (id, node) in self.nodes.iter().enumerate() {
            std::fs::write(
                dir.as_ref().join(format!("node-{id}.ledger")),
                store::encode_ledger(node.replica.ledger()),
            )?;
        }
        Ok(())
    }

    fn node(&self, id: NodeId) -> Result<&Node, SimError> {
        self.nodes.get(id as usize).ok_or(SimError::UnknownNode(id))
    }

    fn check_node(&self, id: NodeId) -> Result<(), SimError> {
        self.node(id).map(|_| ())
    }

    fn schedule(&mut self, fire_time: u64, action: Action) {
        let sequence = self.sequence;
        self.sequence += 1;
        self.queue.push(SimEvent { fire_time, sequence, action });
    }

    fn trace(&mut self, parts: &[&[u8]]) {
        for part in parts {
            self.trace_hash.update((part.len() as u64).to_be_bytes());
            self.trace_hash.update(part);
        }
    }

    /// Submits `txn` at `node` now. Duplicates of an id the node already
    /// knows are ignored.
    pub fn submit_transaction(&mut self, node: NodeId, txn: AuditTransaction) -> Result<SubmitOutcome, SimError> {
        self.check_node(node)?;
        let sealed = SealedTxn::new(txn)?;
        let now = self.now;
        self.trace(&[b"submit", &now.to_be_bytes(), &node.to_be_bytes(), &sealed.digest().0]);
        Ok(self.accept_submission(node, sealed, now))
    }

    /// Submits `txn` at `node` when the clock reaches `at`.
    pub fn schedule_submission(&mut self, node: NodeId, txn: AuditTransaction, at: u64) -> Result<(), SimError> {
        self.check_node(node)?;
        if at < self.now {
            return Err(SimError::InThePast { at, now: self.now });
        }
        let sealed = SealedTxn::new(txn)?;
        self.schedule(at, Action::Submit { node, txn: sealed });
        Ok(())
    }

    fn accept_submission(&mut self, node: NodeId, txn: Arc<SealedTxn>, at: u64) -> SubmitOutcome {
        if self.nodes[node as usize].known.contains(&txn.id()) {
            return SubmitOutcome::Duplicate;
        }
        self.txns.entry(txn.id()).or_insert_with(|| TxnTiming {
            generated_at: at,
            origin: node,
            commits: BTreeMap::new(),
        });
        let cpu = self.config.cpu;
        let done = self.nodes[node as usize].process(&cpu, at, txn.encoded_len());
        self.add_to_mempool(node, txn.clone(), done);
        for peer in 0..self.nodes.len() as NodeId {
            if peer != node {
                self.send(node, peer, Payload::Txn(txn.clone()), done);
            }
        }
        self.maybe_propose(node, done);
        SubmitOutcome::Accepted
    }

    fn add_to_mempool(&mut self, node: NodeId, txn: Arc<SealedTxn>, at: u64) {
        let state = &mut self.nodes[node as usize];
        if !state.known.insert(txn.id()) {
            return;
        }
        state.pending.insert(txn.id());
        state.pending_bytes += txn.encoded_len();
        state.mempool.push_back((at, txn));
    }

    fn send(&mut self, from: NodeId, to: NodeId, payload: Payload, at: u64) {
        let mut delay = self.config.transit_ms(payload.size());
        if self.config.jitter_fraction > 0.0 {
            let u: f64 = self.rng.random();
            let factor = 1.0 + self.config.jitter_fraction * (2.0 * u - 1.0);
            delay = (delay as f64 * factor).round() as u64;
        }
        self.schedule(at + delay, Action::Deliver { from, to, payload });
    }

    /// Sends a replica's outbound messages to every peer, applying the
    /// sender's Byzantine behaviors per recipient.
    fn broadcast(&mut self, from: NodeId, outbound: Vec<ConsensusMessage>, at: u64) {
        for msg in outbound {
            for to in 0..self.nodes.len() as NodeId {
                if to == from {
                    continue;
                }
                let byz = self.nodes[from as usize].byzantine.clone();
                if byz.drop_fraction > 0.0 && self.rng.random::<f64>() < byz.drop_fraction {
                    self.counts.dropped += 1;
                    continue;
                }
                let mut out = msg.clone();
                if byz.equivocate && to % 2 == 1 && msg.kind != MessageKind::PrePrepare {
                    out.block_digest = self.nodes[from as usize]
                        .alternate
                        .get(&msg.height)
                        .copied()
                        .unwrap_or_else(|| equivocation_digest(&msg.block_digest));
                }
                self.send(from, to, Payload::Consensus(out), at);
                if byz.invalid_blocks && msg.kind == MessageKind::Prepare {
                    if let Some(forged) = self.forged_proposal(from, msg.height) {
                        self.send(from, to, Payload::Consensus(forged), at);
                    }
                }
            }
        }
    }

    fn forged_proposal(&self, from: NodeId, height: u64) -> Option<ConsensusMessage> {
        let replica = &self.nodes[from as usize].replica;
        let head = replica.ledger().head();
        if head.header.height + 1 != height {
            return None;
        }
        let txn = forged_filler(height);
        let mut block = build_block(&[txn], head, from, self.now as i64).ok()?;
        block.header.txn_root = Digest::of(b"forged root");
        Some(ConsensusMessage::pre_prepare(replica.view(), Arc::new(block), from))
    }

    /// Cuts a block at the primary when the pending batch is full or its
    /// oldest transaction has waited out the timeout.
    fn maybe_propose(&mut self, node: NodeId, at: u64) {
        let policy = self.config.block_policy;
        let state = &mut self.nodes[node as usize];
        if !state.replica.is_primary() || state.replica.has_proposal() {
            return;
        }
        state.drop_stale();
        let Some(&(oldest, _)) = state.mempool.front() else { return };
        let due = oldest + policy.block_timeout_ms;
        if state.pending_bytes < policy.max_block_bytes && at < due {
            if state.timer_at != Some(due) {
                state.timer_at = Some(due);
                self.schedule(due, Action::Timer { node });
            }
            return;
        }
        let mut batch = Vec::new();
        let mut bytes = 0;
        for (_, txn) in &state.mempool {
            if !state.pending.contains(&txn.id()) {
                continue;
            }
            if !batch.is_empty() && bytes + txn.encoded_len() > policy.max_block_bytes {
                break;
            }
            bytes += txn.encoded_len();
            batch.push(txn.clone());
        }
        let cpu = self.config.cpu;
        let done = state.process(&cpu, at, bytes);
        let step = state.replica.propose(&batch, done as i64).expect("primary with a non-empty batch can propose");
        let byz = state.byzantine.clone();
        let (proposal, votes): (Vec<_>, Vec<_>) =
            step.outbound.into_iter().partition(|m| m.kind == MessageKind::PrePrepare);
        for msg in proposal {
            let block = msg.block.clone().expect("pre-prepare carries its block");
            let twin = if byz.invalid_blocks {
                let mut bad = (*block).clone();
                bad.header.txn_root = Digest::of(b"corrupted root");
                Some(bad)
            } else if byz.equivocate {
                let mut other = batch.clone();
                other.reverse();
                build_block(&other, &self.nodes[node as usize].replica.ledger().head().clone(), node, done as i64 + 1)
                    .ok()
            } else {
                None
            };
            let twin = twin.map(|b| ConsensusMessage::pre_prepare(msg.view, Arc::new(b), node));
            if let (Some(t), true) = (&twin, byz.equivocate) {
                self.nodes[node as usize].alternate.insert(msg.height, t.block_digest);
            }
            for to in 0..self.nodes.len() as NodeId {
                if to == node {
                    continue;
                }
                if byz.drop_fraction > 0.0 && self.rng.random::<f64>() < byz.drop_fraction {
                    self.counts.dropped += 1;
                    continue;
                }
                let out = match &twin {
                    Some(t) if to % 2 == 1 => t.clone(),
                    _ => msg.clone(),
                };
                self.send(node, to, Payload::Consensus(out), done);
            }
        }
        self.broadcast(node, votes, done);
    }

    fn record_commits(&mut self, node: NodeId, blocks: &[Arc<Block>], at: u64) {
        for block in blocks {
            for txn in &block.txns {
                let state = &mut self.nodes[node as usize];
                if state.pending.remove(&txn.id()) {
                    state.pending_bytes -= txn.encoded_len();
                }
                state.known.insert(txn.id());
                if let Some(timing) = self.txns.get_mut(&txn.id()) {
                    timing.commits.entry(node).or_insert(at);
                }
            }
        }
    }

    fn step(&mut self, event: SimEvent) {
        self.now = event.fire_time;
        self.events_processed += 1;
        let t = event.fire_time;
        let cpu = self.config.cpu;
        match event.action {
            Action::Deliver { from, to, payload: Payload::Txn(txn) } => {
                self.counts.txn += 1;
                self.trace(&[b"txn", &t.to_be_bytes(), &from.to_be_bytes(), &to.to_be_bytes(), &txn.digest().0]);
                let done = self.nodes[to as usize].process(&cpu, t, txn.encoded_len());
                self.add_to_mempool(to, txn, done);
                self.maybe_propose(to, done);
            }
            Action::Deliver { from, to, payload: Payload::Consensus(msg) } => {
                match msg.kind {
                    MessageKind::PrePrepare => self.counts.pre_prepare += 1,
                    MessageKind::Prepare => self.counts.prepare += 1,
                    MessageKind::Commit => self.counts.commit += 1,
                }
                self.trace(&[
                    b"consensus",
                    &t.to_be_bytes(),
                    &from.to_be_bytes(),
                    &to.to_be_bytes(),
                    &[msg.kind as u8],
                    &msg.height.to_be_bytes(),
                    &msg.block_digest.0,
                ]);
                if let Some(out) = self.trace_out.as_mut() {
                    let record = TraceRecord { time: t, from, to, message: msg.clone() };
                    let mut line = serde_json::to_vec(&record).expect("trace record serializes");
                    line.push(b'\n');
                    // Tracing is best-effort diagnostics; a failed write
                    // disables it instead of aborting the run.
                    if out.write_all(&line).is_err() {
                        self.trace_out = None;
                    }
                }
                let done = self.nodes[to as usize].process(&cpu, t, msg.wire_size());
                let Ok(step) = self.nodes[to as usize].replica.handle_message(msg) else { return };
                self.record_commits(to, &step.committed, done);
                self.broadcast(to, step.outbound, done);
                if !step.committed.is_empty() {
                    self.maybe_propose(to, done);
                }
            }
            Action::Submit { node, txn } => {
                self.trace(&[b"submit", &t.to_be_bytes(), &node.to_be_bytes(), &txn.digest().0]);
                self.accept_submission(node, txn, t);
            }
            Action::Timer { node } => {
                self.trace(&[b"timer", &t.to_be_bytes(), &node.to_be_bytes()]);
                if self.nodes[node as usize].timer_at == Some(t) {
                    self.nodes[node as usize].timer_at = None;
                }
                self.maybe_propose(node, t);
            }
            Action::Inject(spec) => {
                self.trace(&[b"fault", &t.to_be_bytes(), &spec.target.to_be_bytes()]);
                // Targets were checked when the fault was scheduled; a
                // tamper aimed at a height not yet reached is a no-op.
                let _ = self.apply_fault(spec);
            }
        }
    }

    /// Processes events until the queue is empty or the next event lies
    /// past `deadline_ms`.
    pub fn run_until_quiescent(&mut self, deadline_ms: u64) -> SimReport {
        while let Some(next) = self.queue.peek() {
            if next.fire_time > deadline_ms {
                break;
            }
            let event = self.queue.pop().expect("peeked");
            self.step(event);
        }
        self.report()
    }

    pub fn report(&self) -> SimReport {
        SimReport {
            quiescent: self.queue.is_empty(),
            end_time_ms: self.now,
            events_processed: self.events_processed,
            txns: self.txns.clone(),
            nodes: self
                .nodes
                .iter()
                .enumerate()
                .map(|(id, n)| NodeSummary {
                    id: id as NodeId,
                    height: n.replica.ledger().height(),
                    head: n.replica.ledger().head().digest(),
                    byzantine: n.byzantine.any(),
                })
                .collect(),
            messages: self.counts.clone(),
            trace_digest: Digest(self.trace_hash.clone().finalize().into()),
        }
    }

    /// Applies a fault now. `ForgeAppWrite` returns the forged transaction id.
    pub fn inject_fault(&mut self, spec: FaultSpec) -> Result<Option<Uuid>, SimError> {
        self.check_node(spec.target)?;
        let now = self.now;
        self.trace(&[b"fault", &now.to_be_bytes(), &spec.target.to_be_bytes()]);
        self.apply_fault(spec)
    }

    /// Applies a fault when the clock reaches `at`.
    pub fn schedule_fault(&mut self, spec: FaultSpec, at: u64) -> Result<(), SimError> {
        self.check_node(spec.target)?;
        if at < self.now {
            return Err(SimError::InThePast { at, now: self.now });
        }
        self.schedule(at, Action::Inject(spec));
        Ok(())
    }

    fn apply_fault(&mut self, spec: FaultSpec) -> Result<Option<Uuid>, SimError> {
        let target = spec.target;
        match spec.behavior {
            FaultBehavior::TamperLocalLedger { height, byte_offset } => {
                let node = &mut self.nodes[target as usize];
                let blocks = node.replica.ledger_storage_mut().storage_mut();
                let block = blocks.get_mut(height as usize).ok_or(SimError::NoSuchBlock { node: target, height })?;
                tamper_block(block, byte_offset)?;
                Ok(None)
            }
            FaultBehavior::Equivocate => {
                self.nodes[target as usize].byzantine.equivocate = true;
                Ok(None)
            }
            FaultBehavior::DropOutbound { fraction } => {
                self.nodes[target as usize].byzantine.drop_fraction = fraction.clamp(0.0, 1.0);
                Ok(None)
            }
            FaultBehavior::InvalidBlocks => {
                self.nodes[target as usize].byzantine.invalid_blocks = true;
                Ok(None)
            }
            FaultBehavior::ForgeAppWrite { entity, entity_id, property, value, user_id } => {
                let current = restore_state(self.nodes[target as usize].replica.ledger(), &entity, entity_id);
                let seed = self.rng.random::<u128>();
                let txn = AuditTransaction {
                    class_name: entity,
                    created_date: WireDate::new(self.now as i64, 0),
                    entity_id,
                    event_type: EventKind::Update,
                    id: uuid::Builder::from_random_bytes(seed.to_le_bytes()).into_uuid(),
                    session_id: uuid::Builder::from_random_bytes(seed.rotate_left(64).to_le_bytes()).into_uuid(),
                    url: "/".into(),
                    user_id,
                    details: vec![TxnDetail {
                        id: uuid::Builder::from_random_bytes((!seed).to_le_bytes()).into_uuid(),
                        old_value: current.get(&property).map(str::to_string),
                        new_value: Some(value),
                        property_name: property,
                    }],
                };
                let id = txn.id;
                self.submit_transaction(target, txn)?;
                Ok(Some(id))
            }
        }
    }
}

fn equivocation_digest(real: &Digest) -> Digest {
    let mut bytes = b"equivocation:".to_vec();
    bytes.extend_from_slice(&real.0);
    Digest::of(&bytes)
}

fn forged_filler(height: u64) -> Arc<SealedTxn> {
    SealedTxn::new(AuditTransaction {
        class_name: "Forged".into(),
        created_date: WireDate::new(0, 0),
        entity_id: height as i64,
        event_type: EventKind::Insert,
        id: Uuid::from_u128(0xF0F0_0000_0000_0000 | u128::from(height)),
        session_id: Uuid::nil(),
        url: "/".into(),
        user_id: 0,
        details: vec![TxnDetail {
            id: Uuid::nil(),
            new_value: Some("x".into()),
            old_value: None,
            property_name: "P".into(),
        }],
    })
    .expect("filler transaction is valid")
}

/// Flips the low bit of one ASCII byte in the text fields (class name, url,
/// property names and values) of `block`'s transactions. The offset indexes
/// those bytes in order and wraps around; non-ASCII bytes are skipped so the
/// text stays valid UTF-8.
pub fn tamper_block(block: &mut Block, byte_offset: usize) -> Result<(), SimError> {
    let mut positions = Vec::new();
    for (ti, txn) in block.txns.iter().enumerate() {
        for (fi, field) in text_fields(txn.txn()).iter().enumerate() {
            positions.extend(field.bytes().enumerate().filter(|(_, b)| b.is_ascii()).map(|(bi, _)| (ti, fi, bi)));
        }
    }
    if positions.is_empty() {
        return Err(SimError::NothingToTamper { height: block.header.height });
    }
    let (ti, fi, bi) = positions[byte_offset % positions.len()];
    let mut txn = block.txns[ti].txn().clone();
    let field = text_fields_mut(&mut txn).swap_remove(fi);
    let mut bytes = std::mem::take(field).into_bytes();
    bytes[bi] ^= 0x01;
    *field = String::from_utf8(bytes).expect("flipping bit 0 of an ASCII byte keeps UTF-8");
    block.txns[ti] = SealedTxn::new(txn)?;
    Ok(())
}

fn text_fields(txn: &AuditTransaction) -> Vec<&String> {
    let mut out = vec![&txn.class_name, &txn.url];
    for d in &txn.details {
        out.push(&d.property_name);
        out.extend(d.old_value.as_ref());
        out.extend(d.new_value.as_ref());
    }
    out
}

fn text_fields_mut(txn: &mut AuditTransaction) -> Vec<&mut String> {
    let mut out = vec![&mut txn.class_name, &mut txn.url];
    for d in &mut txn.details {
        out.push(&mut d.property_name);
        out.extend(d.old_value.as_mut());
        out.extend(d.new_value.as_mut());
    }
    out
}
