//! JSON wire format for audit transactions.
//!
//! Wire documents use PascalCase keys in the order
//! `ClassName, CreatedDate, EntityId, EventType, Id, SessionId, Url, UserId, Details`
//! and, in [`DateMode::Legacy`], the escaped `\/Date(<ms><±HHMM>)\/` date form
//! with every `/` escaped. Transaction identity is the SHA-256 of the
//! canonical encoding (sorted keys, legacy dates, no whitespace).

use std::fmt;
use std::sync::Arc;

use chrono::{DateTime, FixedOffset};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use uuid::Uuid;

use crate::canonical::{escape_slashes, to_canonical_bytes};
use crate::capture::{AuditDetail, AuditLogEntry, EventKind};
use crate::digest::{Digest, TxnDigest};

/// Largest accepted UTC offset, in minutes (UTC+14:00).
pub const MAX_OFFSET_MINUTES: i32 = 14 * 60;

#[derive(Debug, thiserror::Error)]
pub enum CodecError {
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("transaction has no details")]
    EmptyDetails,
    #[error("detail has an empty property name")]
    EmptyPropertyName,
    #[error("unparseable date `{0}`")]
    InvalidDate(String),
    #[error("unknown event type code {0}")]
    UnknownEventType(i64),
}

impl CodecError {
    /// Stable machine-readable reason, used in HTTP error bodies.
    pub fn reason(&self) -> &'static str {
        match self {
            CodecError::Json(err) => {
                let msg = err.to_string();
                if msg.starts_with("missing field") {
                    "missing_field"
                } else if msg.starts_with("unknown field") {
                    "unknown_field"
                } else if err.is_data() {
                    "invalid_field"
                } else {
                    "malformed_json"
                }
            }
            CodecError::EmptyDetails => "empty_details",
            CodecError::EmptyPropertyName => "empty_property_name",
            CodecError::InvalidDate(_) => "invalid_date",
            CodecError::UnknownEventType(_) => "unknown_event_type",
        }
    }
}

/// A point in time with the UTC offset it was recorded in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WireDate {
    pub epoch_ms: i64,
    pub offset_minutes: i32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DateMode {
    /// `\/Date(1532366360155-0400)\/`
    #[default]
    Legacy,
    /// `2018-07-23T13:19:20.155-04:00`
    Iso8601,
}

impl WireDate {
    pub const fn new(epoch_ms: i64, offset_minutes: i32) -> Self {
        Self { epoch_ms, offset_minutes }
    }

    /// Unescaped legacy form, e.g. `/Date(1532366360155-0400)/`.
    pub fn to_legacy(&self) -> String {
        let sign = if self.offset_minutes < 0 { '-' } else { '+' };
        let abs = self.offset_minutes.unsigned_abs();
        format!("/Date({}{}{:02}{:02})/", self.epoch_ms, sign, abs / 60, abs % 60)
    }

    pub fn to_iso8601(&self) -> Result<String, CodecError> {
        let offset = FixedOffset::east_opt(self.offset_minutes * 60)
            .ok_or_else(|| CodecError::InvalidDate(format!("offset {}", self.offset_minutes)))?;
        let utc = DateTime::from_timestamp_millis(self.epoch_ms)
            .ok_or_else(|| CodecError::InvalidDate(format!("epoch {}", self.epoch_ms)))?;
        Ok(utc.with_timezone(&offset).format("%Y-%m-%dT%H:%M:%S%.3f%:z").to_string())
    }

    pub fn render(&self, mode: DateMode) -> Result<String, CodecError> {
        match mode {
            DateMode::Legacy => Ok(self.to_legacy()),
            DateMode::Iso8601 => self.to_iso8601(),
        }
    }

    /// Parses either form. The legacy form may omit the offset (UTC).
    pub fn parse(text: &str) -> Result<Self, CodecError> {
        let bad = || CodecError::InvalidDate(text.to_string());
        if let Some(inner) = text.strip_prefix("/Date(").and_then(|s| s.strip_suffix(")/")) {
            let (millis, offset) = match inner.len().checked_sub(5) {
                Some(split) if split > 0 && matches!(inner.as_bytes()[split], b'+' | b'-') => {
                    (&inner[..split], Some(&inner[split..]))
                }
                _ => (inner, None),
            };
            let digits = millis.strip_prefix('-').unwrap_or(millis);
            if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            let epoch_ms: i64 = millis.parse().map_err(|_| bad())?;
            let offset_minutes = match offset {
                None => 0,
                Some(off) => {
                    let (sign, hhmm) = off.split_at(1);
                    if !hhmm.bytes().all(|b| b.is_ascii_digit()) {
                        return Err(bad());
                    }
                    let hours: i32 = hhmm[..2].parse().map_err(|_| bad())?;
                    let minutes: i32 = hhmm[2..].parse().map_err(|_| bad())?;
                    if minutes >= 60 {
                        return Err(bad());
                    }
                    let total = hours * 60 + minutes;
                    if sign == "-" {
                        -total
                    } else {
                        total
                    }
                }
            };
            if offset_minutes.abs() > MAX_OFFSET_MINUTES {
                return Err(bad());
            }
            return Ok(Self { epoch_ms, offset_minutes });
        }
        let parsed = DateTime::parse_from_rfc3339(text).map_err(|_| bad())?;
        let offset_seconds = parsed.offset().local_minus_utc();
        if offset_seconds % 60 != 0 || (offset_seconds / 60).abs() > MAX_OFFSET_MINUTES {
            return Err(bad());
        }
        Ok(Self { epoch_ms: parsed.timestamp_millis(), offset_minutes: offset_seconds / 60 })
    }
}

impl fmt::Display for WireDate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_legacy())
    }
}

impl Serialize for WireDate {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_legacy())
    }
}

impl<'de> Deserialize<'de> for WireDate {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        WireDate::parse(&text).map_err(serde::de::Error::custom)
    }
}

pub fn event_type_code(kind: EventKind) -> u8 {
    match kind {
        EventKind::Insert => 0,
        EventKind::Update => 1,
        EventKind::Delete => 2,
    }
}

pub fn event_kind_from_code(code: i64) -> Result<EventKind, CodecError> {
    match code {
        0 => Ok(EventKind::Insert),
        1 => Ok(EventKind::Update),
        2 => Ok(EventKind::Delete),
        other => Err(CodecError::UnknownEventType(other)),
    }
}

fn serialize_event_code<S: Serializer>(kind: &EventKind, serializer: S) -> Result<S::Ok, S::Error> {
    serializer.serialize_u8(event_type_code(*kind))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "PascalCase", deny_unknown_fields)]
pub struct TxnDetail {
    pub id: Uuid,
    #[serde(default)]
    pub new_value: Option<String>,
    #[serde(default)]
    pub old_value: Option<String>,
    pub property_name: String,
}

/// The unit broadcast between peers. Field order matches the wire order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "PascalCase", deny_unknown_fields, try_from = "RawTransaction")]
pub struct AuditTransaction {
    pub class_name: String,
    pub created_date: WireDate,
    pub entity_id: i64,
    #[serde(serialize_with = "serialize_event_code")]
    pub event_type: EventKind,
    pub id: Uuid,
    pub session_id: Uuid,
    pub url: String,
    pub user_id: i64,
    pub details: Vec<TxnDetail>,
}

/// Shape-only parse target; semantic checks happen in `TryFrom`.
#[derive(Deserialize)]
#[serde(rename_all = "PascalCase", deny_unknown_fields)]
struct RawTransaction {
    class_name: String,
    created_date: String,
    entity_id: i64,
    event_type: i64,
    id: Uuid,
    session_id: Uuid,
    url: String,
    user_id: i64,
    details: Vec<TxnDetail>,
}

impl TryFrom<RawTransaction> for AuditTransaction {
    type Error = CodecError;

    fn try_from(raw: RawTransaction) -> Result<Self, Self::Error> {
        let txn = AuditTransaction {
            class_name: raw.class_name,
            created_date: WireDate::parse(&raw.created_date)?,
            entity_id: raw.entity_id,
            event_type: event_kind_from_code(raw.event_type)?,
            id: raw.id,
            session_id: raw.session_id,
            url: raw.url,
            user_id: raw.user_id,
            details: raw.details,
        };
        txn.validate()?;
        Ok(txn)
    }
}

#[derive(Serialize)]
#[serde(rename_all = "PascalCase")]
struct WireView<'a> {
    class_name: &'a str,
    created_date: String,
    entity_id: i64,
    event_type: u8,
    id: &'a Uuid,
    session_id: &'a Uuid,
    url: &'a str,
    user_id: i64,
    details: &'a [TxnDetail],
}

impl AuditTransaction {
    pub fn validate(&self) -> Result<(), CodecError> {
        if self.details.is_empty() {
            return Err(CodecError::EmptyDetails);
        }
        if self.details.iter().any(|d| d.property_name.is_empty()) {
            return Err(CodecError::EmptyPropertyName);
        }
        Ok(())
    }

    /// Wire encoding in document order, without whitespace.
    pub fn encode(&self, mode: DateMode) -> Result<Vec<u8>, CodecError> {
        self.validate()?;
        let view = WireView {
            class_name: &self.class_name,
            created_date: self.created_date.render(mode)?,
            entity_id: self.entity_id,
            event_type: event_type_code(self.event_type),
            id: &self.id,
            session_id: &self.session_id,
            url: &self.url,
            user_id: self.user_id,
            details: &self.details,
        };
        let json = serde_json::to_vec(&view)?;
        Ok(match mode {
            DateMode::Legacy => escape_slashes(&json),
            DateMode::Iso8601 => json,
        })
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        to_canonical_bytes(self).expect("transaction serialization is infallible")
    }

    pub fn digest(&self) -> TxnDigest {
        Digest::of(&self.canonical_bytes())
    }
}

impl TryFrom<&AuditLogEntry> for AuditTransaction {
    type Error = CodecError;

    fn try_from(entry: &AuditLogEntry) -> Result<Self, Self::Error> {
        let txn = AuditTransaction {
            class_name: entry.entity_name.clone(),
            created_date: entry.created_date,
            entity_id: entry.entity_id,
            event_type: entry.event_type,
            id: entry.audit_id,
            session_id: entry.session_id,
            url: entry.url.clone(),
            user_id: entry.user_id,
            details: entry
                .details
                .iter()
                .map(|d| TxnDetail {
                    id: d.detail_id,
                    new_value: d.new_value.clone(),
                    old_value: d.old_value.clone(),
                    property_name: d.property_name.clone(),
                })
                .collect(),
        };
        txn.validate()?;
        Ok(txn)
    }
}

impl From<&AuditTransaction> for AuditLogEntry {
    fn from(txn: &AuditTransaction) -> Self {
        AuditLogEntry {
            audit_id: txn.id,
            session_id: txn.session_id,
            entity_name: txn.class_name.clone(),
            entity_id: txn.entity_id,
            event_type: txn.event_type,
            created_date: txn.created_date,
            user_id: txn.user_id,
            url: txn.url.clone(),
            details: txn
                .details
                .iter()
                .map(|d| AuditDetail {
                    detail_id: d.id,
                    property_name: d.property_name.clone(),
                    old_value: d.old_value.clone(),
                    new_value: d.new_value.clone(),
                })
                .collect(),
        }
    }
}

pub fn encode_transaction(entry: &AuditLogEntry, mode: DateMode) -> Result<Vec<u8>, CodecError> {
    AuditTransaction::try_from(entry)?.encode(mode)
}

/// Parses a wire document. Accepts both date forms; rejects unknown fields,
/// missing fields and empty `Details`.
pub fn decode_transaction(bytes: &[u8]) -> Result<AuditTransaction, CodecError> {
    let raw: RawTransaction = serde_json::from_slice(bytes)?;
    AuditTransaction::try_from(raw)
}

pub fn txn_digest(txn: &AuditTransaction) -> TxnDigest {
    txn.digest()
}

/// A validated transaction bundled with its digest and canonical size.
/// Immutable, so the cached digest always matches the content.
#[derive(Debug, PartialEq, Eq)]
pub struct SealedTxn {
    txn: AuditTransaction,
    digest: TxnDigest,
    encoded_len: usize,
}

impl SealedTxn {
    pub fn new(txn: AuditTransaction) -> Result<Arc<Self>, CodecError> {
        txn.validate()?;
        let bytes = txn.canonical_bytes();
        Ok(Arc::new(Self { digest: Digest::of(&bytes), encoded_len: bytes.len(), txn }))
    }

    pub fn txn(&self) -> &AuditTransaction {
        &self.txn
    }

    pub fn digest(&self) -> TxnDigest {
        self.digest
    }

    pub fn id(&self) -> Uuid {
        self.txn.id
    }

    /// Length in bytes of the canonical encoding.
    pub fn encoded_len(&self) -> usize {
        self.encoded_len
    }
}

impl std::hash::Hash for SealedTxn {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.digest.hash(state);
    }
}
