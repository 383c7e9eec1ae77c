//! Application-facing surface of one node: submit audit transactions, read
//! committed history, verify the local chain.
//!
//! The gateway only reads the ledger. Writes go through
//! [`SimNetwork::submit_transaction`], so committed state changes only by
//! consensus.

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::codec::{decode_transaction, AuditTransaction};
use crate::digest::TxnDigest;
use crate::ledger::{query_history, verify_chain, NodeId, VerificationReport};
use crate::sim::{SimError, SimNetwork, SubmitOutcome};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason")]
pub enum SubmitStatus {
    Accepted,
    Duplicate,
    Rejected(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitReceipt {
    /// Absent when the body did not decode far enough to carry an id.
    pub txn_id: Option<Uuid>,
    pub digest: Option<TxnDigest>,
    #[serde(flatten)]
    pub status: SubmitStatus,
}

impl SubmitReceipt {
    /// HTTP status for this receipt.
    pub fn http_status(&self) -> u16 {
        match self.status {
            SubmitStatus::Accepted => 200,
            SubmitStatus::Duplicate => 409,
            SubmitStatus::Rejected(_) => 400,
        }
    }

    fn rejected(reason: &str) -> Self {
        Self { txn_id: None, digest: None, status: SubmitStatus::Rejected(reason.to_string()) }
    }
}

/// Binds request handling to one node of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gateway {
    node: NodeId,
}

impl Gateway {
    pub fn new(network: &SimNetwork, node: NodeId) -> Result<Self, SimError> {
        network.ledger(node)?;
        Ok(Self { node })
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn create_audit(&self, network: &mut SimNetwork, body: &[u8]) -> SubmitReceipt {
        let txn = match decode_transaction(body) {
            Ok(txn) => txn,
            Err(e) => return SubmitReceipt::rejected(e.reason()),
        };
        let (txn_id, digest) = (Some(txn.id), Some(txn.digest()));
        let status = match network.submit_transaction(self.node, txn) {
            Ok(SubmitOutcome::Accepted) => SubmitStatus::Accepted,
            Ok(SubmitOutcome::Duplicate) => SubmitStatus::Duplicate,
            Err(SimError::InvalidTxn(e)) => SubmitStatus::Rejected(e.reason().to_string()),
            Err(e) => SubmitStatus::Rejected(e.to_string()),
        };
        SubmitReceipt { txn_id, digest, status }
    }

    /// Committed history for one entity, in chain order.
    pub fn get_history(&self, network: &SimNetwork, entity_name: &str, entity_id: i64) -> Vec<AuditTransaction> {
        query_history(network.ledger(self.node).expect("node checked at construction"), entity_name, entity_id)
    }

    pub fn get_verification(&self, network: &SimNetwork) -> VerificationReport {
        verify_chain(network.ledger(self.node).expect("node checked at construction"))
    }
}
