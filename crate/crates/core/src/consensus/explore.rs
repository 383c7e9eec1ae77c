//! Exhaustive exploration of message interleavings for one consensus height.
//!
//! Honest replicas run the real [`ReplicaState`]; the Byzantine replica is a
//! script of messages injected at the start. Every delivery order of the
//! in-flight messages is explored (memoized on the global state), and safety
//! is checked after every delivery.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use uuid::Uuid;

use super::{ConsensusConfig, ConsensusMessage, MessageKind, ReplicaState};
use crate::capture::EventKind;
use crate::codec::{AuditTransaction, SealedTxn, TxnDetail, WireDate};
use crate::digest::Digest;
use crate::ledger::{build_block, genesis, BlockHeader, NodeId};

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub n: usize,
    pub byzantine: BTreeSet<NodeId>,
    /// Transactions the (honest) primary proposes; `None` when the primary
    /// is Byzantine and its behavior is fully scripted.
    pub honest_proposal: Option<Vec<Arc<SealedTxn>>>,
    /// Byzantine messages, as (recipient, message), in flight from the start.
    pub injected: Vec<(NodeId, ConsensusMessage)>,
    /// Require every honest replica to commit once nothing is in flight.
    pub expect_liveness: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ExploreOutcome {
    pub states: usize,
    pub terminal_states: usize,
    pub violations: Vec<String>,
    /// The state budget ran out before the space was exhausted.
    pub truncated: bool,
}

/// In-flight deliveries as a bitset over (recipient, message id).
const FLIGHT_WORDS: usize = 16;

#[derive(Clone)]
struct World {
    replicas: Vec<Arc<ReplicaState>>,
    /// Per-replica fingerprint of (state, votes sent).
    local: Vec<u128>,
    in_flight: [u64; FLIGHT_WORDS],
    votes_sent: Vec<[u8; 2]>,
}

impl World {
    fn fingerprint(&self) -> u128 {
        let mut h = FxHasher128::default();
        self.in_flight.hash(&mut h);
        self.local.hash(&mut h);
        h.finish128()
    }

    fn flights(&self, n: usize) -> Vec<(NodeId, usize)> {
        let mut out = Vec::new();
        for (w, &word) in self.in_flight.iter().enumerate() {
            let mut bits = word;
            while bits != 0 {
                let slot = w * 64 + bits.trailing_zeros() as usize;
                out.push(((slot % n) as NodeId, slot / n));
                bits &= bits - 1;
            }
        }
        out
    }

    fn is_quiet(&self) -> bool {
        self.in_flight.iter().all(|&w| w == 0)
    }
}

/// Two independent multiplicative hashes; collisions would silently prune
/// part of the search, so 64 bits are not enough.
#[derive(Default)]
struct FxHasher128 {
    a: u64,
    b: u64,
}

impl FxHasher128 {
    fn finish128(&self) -> u128 {
        (u128::from(self.a) << 64) | u128::from(self.b)
    }
}

impl Hasher for FxHasher128 {
    fn write(&mut self, bytes: &[u8]) {
        for chunk in bytes.chunks(8) {
            let mut word = [0u8; 8];
            word[..chunk.len()].copy_from_slice(chunk);
            self.write_u64(u64::from_le_bytes(word));
        }
    }

    fn write_u64(&mut self, word: u64) {
        self.a = (self.a.rotate_left(5) ^ word).wrapping_mul(0x51_7c_c1_b7_27_22_0a_95);
        self.b = (self.b.rotate_left(23) ^ word ^ 0x9e37_79b9_7f4a_7c15).wrapping_mul(0xff51_afd7_ed55_8ccd);
    }

    fn write_u8(&mut self, v: u8) {
        self.write_u64(u64::from(v));
    }

    fn write_u32(&mut self, v: u32) {
        self.write_u64(u64::from(v));
    }

    fn write_usize(&mut self, v: usize) {
        self.write_u64(v as u64);
    }

    fn finish(&self) -> u64 {
        self.a ^ self.b
    }
}

struct Explorer<'a> {
    scenario: &'a Scenario,
    messages: Vec<ConsensusMessage>,
    ids: HashMap<ConsensusMessage, usize>,
    visited: HashSet<u128>,
    outcome: ExploreOutcome,
    budget: usize,
}

fn local_fp(replica: &ReplicaState, votes: [u8; 2]) -> u128 {
    let mut h = FxHasher128::default();
    (replica, votes).hash(&mut h);
    h.finish128()
}

impl Explorer<'_> {
    fn intern(&mut self, msg: ConsensusMessage) -> usize {
        if let Some(&id) = self.ids.get(&msg) {
            return id;
        }
        let id = self.messages.len();
        self.ids.insert(msg.clone(), id);
        self.messages.push(msg);
        id
    }

    fn is_honest(&self, node: NodeId) -> bool {
        !self.scenario.byzantine.contains(&node)
    }

    fn slot(&self, (to, id): (NodeId, usize)) -> (usize, u64) {
        let slot = id * self.scenario.n + to as usize;
        assert!(slot < FLIGHT_WORDS * 64, "too many distinct messages to explore");
        (slot / 64, 1 << (slot % 64))
    }

    fn add_flight(&self, world: &mut World, entry: (NodeId, usize)) {
        let (w, bit) = self.slot(entry);
        world.in_flight[w] |= bit;
    }

    fn remove_flight(&self, world: &mut World, entry: (NodeId, usize)) {
        let (w, bit) = self.slot(entry);
        world.in_flight[w] &= !bit;
    }

    /// Queues `outbound` from `from` for every other honest replica.
    fn broadcast(&mut self, world: &mut World, from: NodeId, outbound: Vec<ConsensusMessage>) {
        for msg in outbound {
            let slot = match msg.kind {
                MessageKind::Prepare => Some(0),
                MessageKind::Commit => Some(1),
                MessageKind::PrePrepare => None,
            };
            if let Some(slot) = slot {
                world.votes_sent[from as usize][slot] += 1;
            }
            let id = self.intern(msg);
            for to in 0..self.scenario.n as NodeId {
                if to != from && self.is_honest(to) {
                    self.add_flight(world, (to, id));
                }
            }
        }
    }

    fn check(&mut self, world: &World) {
        let mut committed: Option<&BlockHeader> = None;
        for (node, replica) in world.replicas.iter().enumerate() {
            if !self.is_honest(node as NodeId) {
                continue;
            }
            if world.votes_sent[node].iter().any(|&c| c > 1) {
                self.outcome.violations.push(format!("{}: node {node} voted twice in one phase", self.scenario.name));
            }
            if let Some(block) = replica.ledger().get(1) {
                match committed {
                    None => committed = Some(&block.header),
                    Some(h) if *h != block.header => self.outcome.violations.push(format!(
                        "{}: honest replicas committed different blocks at height 1",
                        self.scenario.name
                    )),
                    Some(_) => {}
                }
            }
        }
    }

    /// Delivers `(to, id)` in `world`, returning the successor and whether
    /// the delivery left the recipient untouched.
    fn successor(&mut self, world: &World, to: NodeId, id: usize) -> (World, bool) {
        let mut next = world.clone();
        self.remove_flight(&mut next, (to, id));
        let mut replica = (*world.replicas[to as usize]).clone();
        let msg = self.messages[id].clone();
        let mut sent = false;
        if let Ok(step) = replica.handle_message(msg) {
            sent = !step.outbound.is_empty();
            self.broadcast(&mut next, to, step.outbound);
        }
        let ignored = !sent && replica == *world.replicas[to as usize];
        if replica.ledger().height() >= 1 {
            // A replica past height 1 ignores everything still addressed to it.
            for entry in next.flights(self.scenario.n) {
                if entry.0 == to {
                    self.remove_flight(&mut next, entry);
                }
            }
        }
        next.local[to as usize] = local_fp(&replica, next.votes_sent[to as usize]);
        next.replicas[to as usize] = Arc::new(replica);
        (next, ignored)
    }

    fn dfs(&mut self, world: World) {
        if world.is_quiet() {
            self.outcome.terminal_states += 1;
            if self.scenario.expect_liveness {
                for (node, replica) in world.replicas.iter().enumerate() {
                    if self.is_honest(node as NodeId) && replica.ledger().height() < 1 {
                        self.outcome.violations.push(format!(
                            "{}: honest node {node} did not commit after quiescence",
                            self.scenario.name
                        ));
                    }
                }
            }
            return;
        }
        let choices = world.flights(self.scenario.n);
        let mut successors = Vec::with_capacity(choices.len());
        for (to, id) in choices {
            let (next, ignored) = self.successor(&world, to, id);
            if ignored {
                // A replica never reconsiders a message it dropped (the first
                // vote per sender wins, an invalid block stays invalid), so an
                // ignored delivery commutes with every other delivery.
                successors.clear();
                successors.push(next);
                break;
            }
            successors.push(next);
        }
        for next in successors {
            if self.outcome.states >= self.budget {
                self.outcome.truncated = true;
                return;
            }
            if !self.visited.insert(next.fingerprint()) {
                continue;
            }
            self.outcome.states += 1;
            self.check(&next);
            self.dfs(next);
        }
    }
}

/// Explores every interleaving of `scenario`, visiting at most `max_states`
/// distinct global states.
pub fn explore(scenario: &Scenario, max_states: usize) -> ExploreOutcome {
    let config = ConsensusConfig::for_nodes(scenario.n);
    let mut explorer = Explorer {
        scenario,
        messages: Vec::new(),
        ids: HashMap::new(),
        visited: HashSet::new(),
        outcome: ExploreOutcome::default(),
        budget: max_states,
    };
    let mut replicas: Vec<ReplicaState> = (0..scenario.n as NodeId).map(|i| ReplicaState::new(i, config)).collect();
    let mut world = World {
        replicas: Vec::new(),
        local: Vec::new(),
        in_flight: [0; FLIGHT_WORDS],
        votes_sent: vec![[0, 0]; scenario.n],
    };
    if let Some(txns) = &scenario.honest_proposal {
        let primary = config.primary(0);
        let step = replicas[primary as usize].propose(txns, 1).expect("honest primary can propose");
        explorer.broadcast(&mut world, primary, step.outbound);
    }
    for (to, msg) in &scenario.injected {
        let id = explorer.intern(msg.clone());
        if explorer.is_honest(*to) {
            explorer.add_flight(&mut world, (*to, id));
        }
    }
    world.local = replicas.iter().zip(&world.votes_sent).map(|(r, v)| local_fp(r, *v)).collect();
    world.replicas = replicas.into_iter().map(Arc::new).collect();
    explorer.visited.insert(world.fingerprint());
    explorer.outcome.states = 1;
    explorer.check(&world);
    explorer.dfs(world);
    explorer.outcome
}

fn sample_txn(seq: u128) -> Arc<SealedTxn> {
    SealedTxn::new(AuditTransaction {
        class_name: "SAGE.BL.InspSystem.PermitInspection".into(),
        created_date: WireDate::new(1_532_366_360_155, -240),
        entity_id: 161031,
        event_type: EventKind::Update,
        id: Uuid::from_u128(seq),
        session_id: Uuid::from_u128(0xC0FFEE),
        url: "/SAGE/Building".into(),
        user_id: 666,
        details: vec![TxnDetail {
            id: Uuid::from_u128(seq << 8),
            new_value: Some(format!("v{seq}")),
            old_value: Some("v0".into()),
            property_name: "DBVersion".into(),
        }],
    })
    .expect("valid sample transaction")
}

/// Byzantine scripts for a 4-replica network: equivocation, omission and
/// invalid blocks from a Byzantine backup, and equivocating or invalid
/// proposals from a Byzantine primary.
pub fn four_node_scenarios() -> Vec<Scenario> {
    use MessageKind::*;
    let n = 4;
    let honest_txns = vec![sample_txn(1)];
    let block_a = build_block(&honest_txns, &genesis(), 0, 1).expect("block a");
    let block_b = build_block(&[sample_txn(2)], &genesis(), 0, 1).expect("block b");
    let mut invalid = block_a.clone();
    invalid.header.txn_root = Digest::of(b"not the root");
    let (a, b) = (Arc::new(block_a), Arc::new(block_b));
    let invalid = Arc::new(invalid);
    let (da, db) = (a.digest(), b.digest());
    let vote = |kind, digest, sender| ConsensusMessage::vote(kind, 0, 1, digest, sender);
    let mut out = Vec::new();

    // Byzantine backup (node 3), honest primary proposing block a.
    let backup = |name: String, injected: Vec<(NodeId, ConsensusMessage)>| Scenario {
        name,
        n,
        byzantine: BTreeSet::from([3]),
        honest_proposal: Some(honest_txns.clone()),
        injected,
        expect_liveness: true,
    };
    out.push(backup("backup omission".into(), vec![]));
    for mask in 0u8..8 {
        // Each honest recipient sees either a or b from the equivocator.
        let injected = (0..3u32)
            .flat_map(|to| {
                let d = if mask & (1 << to) != 0 { db } else { da };
                [(to, vote(Prepare, d, 3)), (to, vote(Commit, d, 3))]
            })
            .collect();
        out.push(backup(format!("backup equivocation mask {mask:03b}"), injected));
    }
    let both: Vec<_> = (0..3u32)
        .flat_map(|to| {
            [
                (to, vote(Prepare, da, 3)),
                (to, vote(Prepare, db, 3)),
                (to, vote(Commit, da, 3)),
                (to, vote(Commit, db, 3)),
            ]
        })
        .collect();
    out.push(backup("backup double votes".into(), both));
    let forged: Vec<_> = (0..3u32)
        .flat_map(|to| {
            [
                (to, ConsensusMessage::pre_prepare(0, b.clone(), 3)),
                (to, ConsensusMessage::pre_prepare(0, invalid.clone(), 3)),
                (to, vote(Prepare, db, 3)),
                (to, vote(Commit, db, 3)),
            ]
        })
        .collect();
    out.push(backup("backup invalid block".into(), forged));

    // Byzantine primary (node 0): per-recipient proposal choice, plus votes.
    let proposals = [Some(a.clone()), Some(b.clone()), Some(invalid.clone()), None];
    for choice in 0..(4u32.pow(3)) {
        let picks: Vec<usize> = (0..3).map(|i| ((choice / 4u32.pow(i)) % 4) as usize).collect();
        for vote_same in [true, false] {
            let mut injected = Vec::new();
            for (idx, to) in (1..=3u32).enumerate() {
                let pick = &proposals[picks[idx]];
                if let Some(block) = pick {
                    injected.push((to, ConsensusMessage::pre_prepare(0, block.clone(), 0)));
                }
                let digest = match (pick, vote_same) {
                    (Some(block), true) => block.digest(),
                    (Some(block), false) if block.digest() == da => db,
                    _ => da,
                };
                injected.push((to, vote(Prepare, digest, 0)));
                injected.push((to, vote(Commit, digest, 0)));
            }
            out.push(Scenario {
                name: format!("primary proposals {picks:?} votes_same={vote_same}"),
                n,
                byzantine: BTreeSet::from([0]),
                honest_proposal: None,
                injected,
                expect_liveness: false,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn honest_run_commits_everywhere() {
        let scenario = Scenario {
            name: "all honest".into(),
            n: 4,
            byzantine: BTreeSet::new(),
            honest_proposal: Some(vec![sample_txn(1)]),
            injected: vec![],
            expect_liveness: true,
        };
        let outcome = explore(&scenario, 2_000_000);
        assert!(!outcome.truncated);
        assert!(outcome.violations.is_empty(), "{:?}", outcome.violations);
        assert!(outcome.terminal_states >= 1);
    }

    #[test]
    fn checker_flags_divergence_beyond_fault_bound() {
        // Two Byzantine replicas out of four exceed f = 1: the primary sends a
        // to node 1 and b to node 2 and both liars vote accordingly.
        let txn_a = vec![sample_txn(1)];
        let a = Arc::new(build_block(&txn_a, &genesis(), 0, 1).unwrap());
        let b = Arc::new(build_block(&[sample_txn(2)], &genesis(), 0, 1).unwrap());
        let mut injected = Vec::new();
        for (to, block) in [(1u32, &a), (2u32, &b)] {
            injected.push((to, ConsensusMessage::pre_prepare(0, block.clone(), 0)));
            for liar in [0u32, 3] {
                injected.push((to, ConsensusMessage::vote(MessageKind::Prepare, 0, 1, block.digest(), liar)));
                injected.push((to, ConsensusMessage::vote(MessageKind::Commit, 0, 1, block.digest(), liar)));
            }
        }
        let scenario = Scenario {
            name: "two liars".into(),
            n: 4,
            byzantine: BTreeSet::from([0, 3]),
            honest_proposal: None,
            injected,
            expect_liveness: false,
        };
        let outcome = explore(&scenario, 100_000);
        assert!(!outcome.violations.is_empty());
    }
}
