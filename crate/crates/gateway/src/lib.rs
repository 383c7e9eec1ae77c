//! HTTP routes for one node:
//!
//! - `POST /createAudit` takes a wire-format transaction and returns a
//!   receipt (200 accepted, 409 duplicate, 400 rejected with a reason code).
//! - `GET /audit/{className}/{entityId}` returns the committed history.
//! - `GET /chain/verify` returns the node's verification report.
//!
//! Requests are serialized through one lock around the network. A submission
//! runs the simulation until it settles, so a 200 response means the
//! transaction has gone through consensus.

use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;

use auditchain_core::sim::{SimError, SimNetwork};
use auditchain_core::{Gateway, NodeId};

/// Simulated time a single request may advance the network by.
pub const SETTLE_DEADLINE_MS: u64 = 3_600_000;

#[derive(Clone)]
pub struct AppState {
    network: Arc<Mutex<SimNetwork>>,
    gateway: Gateway,
}

impl AppState {
    pub fn new(network: SimNetwork, node: NodeId) -> Result<Self, SimError> {
        let gateway = Gateway::new(&network, node)?;
        Ok(Self { network: Arc::new(Mutex::new(network)), gateway })
    }

    pub fn network(&self) -> MutexGuard<'_, SimNetwork> {
        // A panic while holding the lock leaves the simulation usable.
        self.network.lock().unwrap_or_else(|e| e.into_inner())
    }
}

#[derive(Serialize)]
struct ErrorBody {
    reason: &'static str,
    message: String,
}

fn error(status: StatusCode, reason: &'static str, message: impl Into<String>) -> Response {
    (status, Json(ErrorBody { reason, message: message.into() })).into_response()
}

async fn create_audit(State(state): State<AppState>, body: Bytes) -> Response {
    let mut net = state.network();
    let receipt = state.gateway.create_audit(&mut net, &body);
    let deadline = net.now() + SETTLE_DEADLINE_MS;
    let settled = receipt.http_status() != 200 || net.run_until_quiescent(deadline).quiescent;
    if !settled {
        return error(StatusCode::SERVICE_UNAVAILABLE, "not_settled", "network did not settle");
    }
    let status = StatusCode::from_u16(receipt.http_status()).expect("receipt status is a valid code");
    (status, Json(receipt)).into_response()
}

async fn history(State(state): State<AppState>, Path((class_name, entity_id)): Path<(String, String)>) -> Response {
    let Ok(entity_id) = entity_id.parse::<i64>() else {
        return error(StatusCode::BAD_REQUEST, "invalid_entity_id", format!("`{entity_id}` is not an integer id"));
    };
    let net = state.network();
    Json(state.gateway.get_history(&net, &class_name, entity_id)).into_response()
}

async fn verify(State(state): State<AppState>) -> Response {
    let net = state.network();
    Json(state.gateway.get_verification(&net)).into_response()
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/createAudit", post(create_audit))
        .route("/audit/{class_name}/{entity_id}", get(history))
        .route("/chain/verify", get(verify))
        .with_state(state)
}
