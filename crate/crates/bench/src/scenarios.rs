//! Scripted attack and recovery runs on a four-node network.
//!
//! A small application keeps its "current data" in memory and emits audit
//! transactions through the capture hooks and the gateway, exactly like a
//! real deployment would. Each scenario then attacks either the ledger or the
//! application data and checks that the audit chain exposes it.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use auditchain_core::capture::{capture, AuditPolicy, EntityChangeEvent, PropertyDelta, SeededIds};
use auditchain_core::codec::{encode_transaction, DateMode, WireDate};
use auditchain_core::gateway::{Gateway, SubmitStatus};
use auditchain_core::ledger::{diff_against_peer, query_history, restore_state, store, verify_chain, Ledger};
use auditchain_core::sim::{FaultBehavior, FaultSpec, SimConfig, SimNetwork};
use auditchain_core::{EventKind, IdSource, NodeId};

const ENTITY: &str = "SAGE.BL.InspSystem.PermitInspection";
const OTHER: &str = "SAGE.BL.Permits.BuildingPermit";
const NODES: usize = 4;
const GATEWAY: NodeId = 1;
const CLERK: i64 = 101;
const INSPECTOR: i64 = 202;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub seed: u64,
    pub scenarios: Vec<ScenarioOutcome>,
}

impl ScenarioReport {
    pub fn all_passed(&self) -> bool {
        self.scenarios.iter().all(|s| s.passed)
    }

    pub fn get(&self, name: &str) -> Option<&ScenarioOutcome> {
        self.scenarios.iter().find(|s| s.name == name)
    }
}

pub const SCENARIOS: [&str; 4] = ["control", "credential-theft", "local-tamper", "remote-corruption"];

type Row = BTreeMap<String, Option<String>>;

/// The application: current rows plus the audit pipeline into one node.
struct App {
    net: SimNetwork,
    gateway: Gateway,
    policy: AuditPolicy,
    ids: SeededIds,
    rows: BTreeMap<(String, i64), Row>,
    sessions: BTreeMap<i64, Uuid>,
    clock_ms: i64,
}

impl App {
    fn new(seed: u64) -> Self {
        let net = SimNetwork::new(SimConfig { rng_seed: seed, ..SimConfig::with_nodes(NODES) }).expect("valid config");
        let gateway = Gateway::new(&net, GATEWAY).expect("gateway node exists");
        let policy = AuditPolicy::default().with_entity(ENTITY, &["LastViewed"]).with_entity(OTHER, &[] as &[&str]);
        let mut ids = SeededIds::new(seed);
        let sessions = [CLERK, INSPECTOR].into_iter().map(|u| (u, ids.next_id())).collect();
        Self { net, gateway, policy, ids, rows: BTreeMap::new(), sessions, clock_ms: 1_532_366_360_155 }
    }

    /// Applies a write to the current data and audits it.
    fn write(
        &mut self,
        user: i64,
        entity: &str,
        id: i64,
        kind: EventKind,
        changes: &[(&str, Option<&str>)],
    ) -> Result<(), String> {
        let key = (entity.to_string(), id);
        let before = self.rows.get(&key).cloned().unwrap_or_default();
        let mut after = before.clone();
        for (prop, value) in changes {
            after.insert(prop.to_string(), value.map(str::to_string));
        }
        let properties = after
            .keys()
            .map(|p| {
                let old = before.get(p).cloned().flatten();
                let new = after.get(p).cloned().flatten();
                match kind {
                    EventKind::Insert => PropertyDelta::inserted(p.as_str(), new.as_deref()),
                    EventKind::Update => PropertyDelta::updated(p.as_str(), old.as_deref(), new.as_deref()),
                    EventKind::Delete => PropertyDelta::deleted(p.as_str(), old.as_deref()),
                }
            })
            .collect();
        self.clock_ms += 60_000;
        let event = EntityChangeEvent {
            entity_name: entity.to_string(),
            entity_id: id,
            kind,
            properties,
            session_id: self.sessions[&user],
            user_id: user,
            url: "/SAGE/Building/Inspection/Edit".to_string(),
            timestamp: WireDate::new(self.clock_ms, -240),
        };
        self.rows.insert(key, after);
        let Some(entry) = capture(&event, &self.policy, &mut self.ids) else { return Ok(()) };
        let body = encode_transaction(&entry, DateMode::Legacy).map_err(|e| e.to_string())?;
        let receipt = self.gateway.create_audit(&mut self.net, &body);
        if receipt.status != SubmitStatus::Accepted {
            return Err(format!("gateway refused a legitimate write: {:?}", receipt.status));
        }
        if !self.net.run_until_quiescent(u64::MAX).quiescent {
            return Err("network did not settle".into());
        }
        Ok(())
    }

    fn seed_history(&mut self) -> Result<(), String> {
        use EventKind::*;
        self.write(
            CLERK,
            ENTITY,
            161031,
            Insert,
            &[("DBVersion", Some("1")), ("Status", Some("Open")), ("Inspector", None)],
        )?;
        self.write(CLERK, OTHER, 77, Insert, &[("Address", Some("12 Elm St")), ("Fee", Some("150.00"))])?;
        self.write(INSPECTOR, ENTITY, 161031, Update, &[("Inspector", Some("j.doe")), ("DBVersion", Some("2"))])?;
        self.write(INSPECTOR, ENTITY, 161031, Update, &[("Status", Some("Scheduled")), ("LastViewed", Some("today"))])?;
        self.write(CLERK, OTHER, 77, Update, &[("Fee", Some("175.00"))])?;
        self.write(INSPECTOR, ENTITY, 161031, Update, &[("Status", Some("Passed")), ("DBVersion", Some("3"))])?;
        Ok(())
    }

    fn ledger(&self, node: NodeId) -> &Ledger {
        self.net.ledger(node).expect("node exists")
    }

    /// Audited view of the current data: suppressed properties excluded.
    fn audited_row(&self, entity: &str, id: i64) -> Row {
        let mut row = self.rows.get(&(entity.to_string(), id)).cloned().unwrap_or_default();
        row.retain(|p, _| !self.policy.is_suppressed(entity, p));
        row
    }

    fn entities(&self) -> Vec<(String, i64)> {
        self.rows.keys().cloned().collect()
    }

    /// Properties where the chain and the current data disagree.
    fn data_mismatches(&self, node: NodeId) -> Vec<(String, i64, String)> {
        let mut out = Vec::new();
        for (entity, id) in self.entities() {
            let state = restore_state(self.ledger(node), &entity, id);
            let row = self.audited_row(&entity, id);
            let props: BTreeSet<&String> = state.properties.keys().chain(row.keys()).collect();
            for p in props {
                if state.properties.get(p).cloned().flatten() != row.get(p).cloned().flatten() {
                    out.push((entity.clone(), id, p.clone()));
                }
            }
        }
        out
    }

    fn chains_clean(&self) -> Result<(), String> {
        for node in 0..NODES as NodeId {
            let report = verify_chain(self.ledger(node));
            if !report.ok {
                return Err(format!("node {node} fails verification: {report:?}"));
            }
            if let Some(h) = diff_against_peer(self.ledger(node), self.ledger(0)).map_err(|e| e.to_string())? {
                return Err(format!("node {node} forks from node 0 at height {h}"));
            }
        }
        Ok(())
    }
}

fn outcome(name: &str, result: Result<String, String>) -> ScenarioOutcome {
    match result {
        Ok(detail) => ScenarioOutcome { name: name.into(), passed: true, detail },
        Err(detail) => ScenarioOutcome { name: name.into(), passed: false, detail },
    }
}

fn control(seed: u64) -> Result<String, String> {
    let mut app = App::new(seed);
    app.seed_history()?;
    app.chains_clean()?;
    for node in 0..NODES as NodeId {
        let mismatches = app.data_mismatches(node);
        if !mismatches.is_empty() {
            return Err(format!("node {node} disagrees with the data: {mismatches:?}"));
        }
    }
    let legit: BTreeSet<Uuid> = app.sessions.values().copied().collect();
    let foreign = app.ledger(0).iter_txns().filter(|t| !legit.contains(&t.txn().session_id)).count();
    if foreign != 0 {
        return Err(format!("{foreign} transactions from unknown sessions"));
    }
    Ok(format!("height {}, all detectors clean", app.ledger(0).height()))
}

/// An attacker replays the clerk's credentials through the application.
fn credential_theft(seed: u64) -> Result<String, String> {
    let mut app = App::new(seed);
    app.seed_history()?;
    let forged = app
        .net
        .inject_fault(FaultSpec {
            target: GATEWAY,
            behavior: FaultBehavior::ForgeAppWrite {
                entity: ENTITY.into(),
                entity_id: 161031,
                property: "Status".into(),
                value: "Failed".into(),
                user_id: CLERK,
            },
        })
        .map_err(|e| e.to_string())?
        .ok_or("forged write returned no id")?;
    app.rows.entry((ENTITY.into(), 161031)).or_default().insert("Status".into(), Some("Failed".into()));
    if !app.net.run_until_quiescent(u64::MAX).quiescent {
        return Err("network did not settle".into());
    }
    app.chains_clean()?;
    let legit: BTreeSet<Uuid> = app.sessions.values().copied().collect();
    for node in 0..NODES as NodeId {
        let history = query_history(app.ledger(node), ENTITY, 161031);
        let entry = history.iter().find(|t| t.id == forged).ok_or(format!("forged write missing on node {node}"))?;
        if entry.user_id != CLERK {
            return Err(format!("forged write attributed to {}", entry.user_id));
        }
        let suspicious: Vec<Uuid> = history.iter().filter(|t| !legit.contains(&t.session_id)).map(|t| t.id).collect();
        if suspicious != [forged] {
            return Err(format!("session audit flagged {suspicious:?} on node {node}"));
        }
    }
    Ok(format!("forged write {forged} logged under user {CLERK} from an unknown session"))
}

/// Majority ledger among the peers other than `victim`, by head digest.
fn quorum_ledger(app: &App, victim: NodeId) -> Result<Ledger, String> {
    let quorum = app.net.consensus_config().quorum.min(NODES - 1);
    let mut groups: BTreeMap<Vec<u8>, Vec<NodeId>> = BTreeMap::new();
    for node in (0..NODES as NodeId).filter(|&n| n != victim) {
        if verify_chain(app.ledger(node)).ok {
            groups.entry(store::encode_ledger(app.ledger(node))).or_default().push(node);
        }
    }
    let (_, members) = groups.into_iter().max_by_key(|(_, m)| m.len()).ok_or("no verifying peers")?;
    if members.len() < quorum {
        return Err(format!("only {} peers agree, quorum is {quorum}", members.len()));
    }
    Ok(app.ledger(members[0]).clone())
}

fn local_tamper(seed: u64) -> Result<String, String> {
    const VICTIM: NodeId = 2;
    const HEIGHT: u64 = 2;
    let mut app = App::new(seed);
    app.seed_history()?;
    let honest_before = store::encode_ledger(app.ledger(0));
    let offset = (seed % 997) as usize;
    app.net
        .inject_fault(FaultSpec {
            target: VICTIM,
            behavior: FaultBehavior::TamperLocalLedger { height: HEIGHT, byte_offset: offset },
        })
        .map_err(|e| e.to_string())?;

    let report = verify_chain(app.ledger(VICTIM));
    match report.first_bad_height {
        Some(h) if !report.ok && h <= HEIGHT + 1 => {}
        _ => return Err(format!("tamper not detected: {report:?}")),
    }
    for peer in (0..NODES as NodeId).filter(|&n| n != VICTIM) {
        let fork = diff_against_peer(app.ledger(VICTIM), app.ledger(peer)).map_err(|e| e.to_string())?;
        if !fork.is_some_and(|h| h <= HEIGHT) {
            return Err(format!("diff against node {peer} reported {fork:?}"));
        }
    }
    if store::encode_ledger(app.ledger(0)) != honest_before {
        return Err("tamper leaked into an honest node".into());
    }

    let recovered = quorum_ledger(&app, VICTIM)?;
    app.net.replace_ledger(VICTIM, recovered).map_err(|e| e.to_string())?;
    if store::encode_ledger(app.ledger(VICTIM)) != honest_before {
        return Err("recovered chain differs from the honest chain".into());
    }
    for (entity, id) in app.entities() {
        let restored = restore_state(app.ledger(VICTIM), &entity, id);
        let honest = restore_state(app.ledger(0), &entity, id);
        if restored.canonical_bytes() != honest.canonical_bytes() {
            return Err(format!("restored state of {entity}#{id} differs"));
        }
    }
    app.chains_clean()?;
    Ok(format!("detected at height {}, recovered from honest quorum", report.first_bad_height.unwrap_or_default()))
}

/// The database is modified behind the application's back.
fn remote_corruption(seed: u64) -> Result<String, String> {
    let mut app = App::new(seed);
    app.seed_history()?;
    let key = (ENTITY.to_string(), 161031);
    app.rows.get_mut(&key).ok_or("seeded row missing")?.insert("Inspector".into(), Some("m.allory".into()));
    app.rows.get_mut(&(OTHER.to_string(), 77)).ok_or("seeded row missing")?.insert("Fee".into(), Some("0.00".into()));

    let mismatches = app.data_mismatches(0);
    let expected =
        vec![(ENTITY.to_string(), 161031, "Inspector".to_string()), (OTHER.to_string(), 77, "Fee".to_string())];
    if mismatches != expected {
        return Err(format!("expected {expected:?}, found {mismatches:?}"));
    }
    // Correct the data from the chain.
    for (entity, id, prop) in &mismatches {
        let state = restore_state(app.ledger(0), entity, *id);
        let value = state.properties.get(prop).cloned().flatten();
        app.rows.get_mut(&(entity.clone(), *id)).expect("row exists").insert(prop.clone(), value);
    }
    let left = app.data_mismatches(0);
    if !left.is_empty() {
        return Err(format!("recovery left {left:?}"));
    }
    Ok(format!("{} corrupted values exposed and restored", mismatches.len()))
}

pub fn run_scenario(name: &str, seed: u64) -> Option<ScenarioOutcome> {
    let result = match name {
        "control" => control(seed),
        "credential-theft" => credential_theft(seed),
        "local-tamper" => local_tamper(seed),
        "remote-corruption" => remote_corruption(seed),
        _ => return None,
    };
    Some(outcome(name, result))
}

pub fn run_attack_scenarios(seed: u64) -> ScenarioReport {
    ScenarioReport {
        seed,
        scenarios: SCENARIOS.iter().map(|name| run_scenario(name, seed).expect("known scenario")).collect(),
    }
}
