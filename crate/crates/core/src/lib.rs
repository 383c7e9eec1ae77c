//! Tamper-evident, replicated audit log.
//!
//! Entity changes captured from the persistence layer ([`capture`]) become
//! JSON audit transactions ([`codec`]) that peers order with a three-phase
//! BFT protocol ([`consensus`]) into per-node hash-chained ledgers
//! ([`ledger`]). [`sim`] runs whole networks deterministically, including
//! fault injection, and [`gateway`] is the application-facing submission and
//! query surface of one node.

pub mod canonical;
pub mod capture;
pub mod codec;
pub mod consensus;
pub mod digest;
pub mod gateway;
pub mod ledger;
pub mod sim;

pub use capture::{
    AuditDetail, AuditLogEntry, AuditPolicy, EntityChangeEvent, EventKind, IdSource, PropertyDelta, RandomIds,
    SeededIds,
};
pub use codec::{decode_transaction, AuditTransaction, CodecError, DateMode, SealedTxn, TxnDetail, WireDate};
pub use digest::{Digest, TxnDigest};
pub use gateway::{Gateway, SubmitReceipt, SubmitStatus};
pub use ledger::{Block, BlockHeader, BlockPolicy, Ledger, NodeId, VerificationCause, VerificationReport};
pub use sim::{FaultBehavior, FaultSpec, SimConfig, SimNetwork, SimReport};
