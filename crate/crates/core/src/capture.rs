//! Audit entry generation from ORM post-insert / post-update / post-delete
//! notifications.
//!
//! The listeners are pure: the same event and policy always yield the same
//! entry except for the identifiers drawn from the supplied [`IdSource`].

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::codec::WireDate;

/// Entity names of the audit tables themselves. Changes to these never
/// produce audit entries, otherwise saving an entry would recurse.
pub const AUDIT_TABLES: [&str; 2] = ["AuditLog", "AuditLogDetail"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    Insert,
    Update,
    Delete,
}

/// Old and new value of one mapped property. Values are string-rendered.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropertyDelta {
    pub property_name: String,
    pub old_value: Option<String>,
    pub new_value: Option<String>,
}

impl PropertyDelta {
    pub fn inserted(name: impl Into<String>, value: Option<&str>) -> Self {
        Self { property_name: name.into(), old_value: None, new_value: value.map(str::to_string) }
    }

    pub fn updated(name: impl Into<String>, old: Option<&str>, new: Option<&str>) -> Self {
        Self { property_name: name.into(), old_value: old.map(str::to_string), new_value: new.map(str::to_string) }
    }

    pub fn deleted(name: impl Into<String>, value: Option<&str>) -> Self {
        Self { property_name: name.into(), old_value: value.map(str::to_string), new_value: None }
    }
}

/// A change notification raised by the persistence layer after a flush.
/// `properties` lists every mapped property once, in mapping order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityChangeEvent {
    pub entity_name: String,
    pub entity_id: i64,
    pub kind: EventKind,
    pub properties: Vec<PropertyDelta>,
    pub session_id: Uuid,
    pub user_id: i64,
    pub url: String,
    pub timestamp: WireDate,
}

/// Which entities are audited and which of their properties are excluded.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditPolicy {
    auditable: BTreeSet<String>,
    suppressed: BTreeMap<String, BTreeSet<String>>,
}

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("suppressed properties configured for non-auditable entity `{0}`")]
    SuppressedNotAuditable(String),
    #[error("empty entity or property name")]
    EmptyName,
    #[error("policy file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("policy file: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyFile {
    #[serde(default)]
    entities: BTreeMap<String, EntitySection>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EntitySection {
    #[serde(default)]
    suppress: Vec<String>,
}

impl AuditPolicy {
    pub fn new<I, S>(auditable: I, suppressed: BTreeMap<String, BTreeSet<String>>) -> Result<Self, PolicyError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let auditable: BTreeSet<String> = auditable.into_iter().map(Into::into).collect();
        if auditable.iter().any(String::is_empty) {
            return Err(PolicyError::EmptyName);
        }
        for (entity, props) in &suppressed {
            if !auditable.contains(entity) {
                return Err(PolicyError::SuppressedNotAuditable(entity.clone()));
            }
            if props.iter().any(String::is_empty) {
                return Err(PolicyError::EmptyName);
            }
        }
        Ok(Self { auditable, suppressed })
    }

    /// Builder-style helper for code and tests: marks `entity` auditable with
    /// the given suppressed properties.
    pub fn with_entity<S: AsRef<str>>(mut self, entity: &str, suppress: &[S]) -> Self {
        self.auditable.insert(entity.to_string());
        let set: BTreeSet<String> = suppress.iter().map(|s| s.as_ref().to_string()).collect();
        if !set.is_empty() {
            self.suppressed.entry(entity.to_string()).or_default().extend(set);
        }
        self
    }

    /// Parses the TOML policy format:
    ///
    /// ```toml
    /// [entities."SAGE.BL.InspSystem.PermitInspection"]
    /// suppress = ["LastUpdateDate"]
    ///
    /// [entities."SAGE.BL.Permit"]
    /// ```
    pub fn from_toml(text: &str) -> Result<Self, PolicyError> {
        let file: PolicyFile = toml::from_str(text)?;
        let mut suppressed = BTreeMap::new();
        for (name, section) in &file.entities {
            if !section.suppress.is_empty() {
                suppressed.insert(name.clone(), section.suppress.iter().cloned().collect());
            }
        }
        Self::new(file.entities.into_keys(), suppressed)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PolicyError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn auditable_entities(&self) -> &BTreeSet<String> {
        &self.auditable
    }

    pub fn is_suppressed(&self, entity: &str, property: &str) -> bool {
        self.suppressed.get(entity).is_some_and(|set| set.contains(property))
    }

    pub fn suppressed_properties(&self, entity: &str) -> Option<&BTreeSet<String>> {
        self.suppressed.get(entity)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditDetail {
    pub detail_id: Uuid,
    pub property_name: String,
    pub old_value: Option<String>,
    pub new_value: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditLogEntry {
    pub audit_id: Uuid,
    pub session_id: Uuid,
    pub entity_name: String,
    pub entity_id: i64,
    pub event_type: EventKind,
    pub created_date: WireDate,
    pub user_id: i64,
    pub url: String,
    pub details: Vec<AuditDetail>,
}

/// Source of fresh entry and detail identifiers.
pub trait IdSource {
    fn next_id(&mut self) -> Uuid;
}

impl<T: IdSource + ?Sized> IdSource for &mut T {
    fn next_id(&mut self) -> Uuid {
        (**self).next_id()
    }
}

/// Version-4 UUIDs from the operating system's generator.
#[derive(Debug, Default, Clone, Copy)]
pub struct RandomIds;

impl IdSource for RandomIds {
    fn next_id(&mut self) -> Uuid {
        Uuid::new_v4()
    }
}

/// Reproducible version-4 UUIDs from a seeded stream.
#[derive(Debug, Clone)]
pub struct SeededIds(ChaCha8Rng);

impl SeededIds {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }
}

impl IdSource for SeededIds {
    fn next_id(&mut self) -> Uuid {
        uuid::Builder::from_random_bytes(self.0.random()).into_uuid()
    }
}

pub fn is_auditable(entity_name: &str, policy: &AuditPolicy) -> bool {
    !AUDIT_TABLES.contains(&entity_name) && policy.auditable.contains(entity_name)
}

fn new_entry(event: &EntityChangeEvent, kind: EventKind, ids: &mut impl IdSource) -> AuditLogEntry {
    AuditLogEntry {
        audit_id: ids.next_id(),
        session_id: event.session_id,
        entity_name: event.entity_name.clone(),
        entity_id: event.entity_id,
        event_type: kind,
        created_date: event.timestamp,
        user_id: event.user_id,
        url: event.url.clone(),
        details: Vec::new(),
    }
}

fn audited_properties<'a>(
    event: &'a EntityChangeEvent,
    policy: &'a AuditPolicy,
) -> impl Iterator<Item = &'a PropertyDelta> + 'a {
    let suppressed = policy.suppressed.get(&event.entity_name);
    event.properties.iter().filter(move |p| !suppressed.is_some_and(|s| s.contains(&p.property_name)))
}

fn finish(entry: AuditLogEntry) -> Option<AuditLogEntry> {
    (!entry.details.is_empty()).then_some(entry)
}

/// Post-insert listener: every audited property is recorded with its new value.
pub fn on_post_insert(
    event: &EntityChangeEvent,
    policy: &AuditPolicy,
    mut ids: impl IdSource,
) -> Option<AuditLogEntry> {
    if !is_auditable(&event.entity_name, policy) {
        return None;
    }
    let mut entry = new_entry(event, EventKind::Insert, &mut ids);
    for prop in audited_properties(event, policy) {
        entry.details.push(AuditDetail {
            detail_id: ids.next_id(),
            property_name: prop.property_name.clone(),
            old_value: None,
            new_value: prop.new_value.clone(),
        });
    }
    finish(entry)
}

/// Post-update listener: only properties whose value changed are recorded.
/// A null on exactly one side counts as a change.
pub fn on_post_update(
    event: &EntityChangeEvent,
    policy: &AuditPolicy,
    mut ids: impl IdSource,
) -> Option<AuditLogEntry> {
    if !is_auditable(&event.entity_name, policy) {
        return None;
    }
    let mut entry = new_entry(event, EventKind::Update, &mut ids);
    for prop in audited_properties(event, policy) {
        if prop.old_value != prop.new_value {
            entry.details.push(AuditDetail {
                detail_id: ids.next_id(),
                property_name: prop.property_name.clone(),
                old_value: prop.old_value.clone(),
                new_value: prop.new_value.clone(),
            });
        }
    }
    finish(entry)
}

/// Post-delete listener: every audited property is recorded with its last value.
pub fn on_post_delete(
    event: &EntityChangeEvent,
    policy: &AuditPolicy,
    mut ids: impl IdSource,
) -> Option<AuditLogEntry> {
    if !is_auditable(&event.entity_name, policy) {
        return None;
    }
    let mut entry = new_entry(event, EventKind::Delete, &mut ids);
    for prop in audited_properties(event, policy) {
        entry.details.push(AuditDetail {
            detail_id: ids.next_id(),
            property_name: prop.property_name.clone(),
            old_value: prop.old_value.clone(),
            new_value: None,
        });
    }
    finish(entry)
}

/// Dispatches to the listener matching `event.kind`.
pub fn capture(event: &EntityChangeEvent, policy: &AuditPolicy, ids: impl IdSource) -> Option<AuditLogEntry> {
    match event.kind {
        EventKind::Insert => on_post_insert(event, policy, ids),
        EventKind::Update => on_post_update(event, policy, ids),
        EventKind::Delete => on_post_delete(event, policy, ids),
    }
}
