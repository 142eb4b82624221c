//! Regulator endpoint: receives pushed window summaries and verifies on demand.

use crate::client::{connect, request_and_verify, UtilityClient};
use crate::compliance::{findings_jsonl, ComplianceSession, WindowVerdict};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use std::sync::{Arc, Mutex};
use zkstar_core::wire::{ErrorBody, WindowSummary};

pub struct VerifierState {
    client: Option<UtilityClient>,
    session_id: Option<String>,
    audit: bool,
    /// Verify each pushed summary as it arrives.
    auto_verify: bool,
    compliance: Mutex<Option<ComplianceSession>>,
    received: Mutex<Vec<WindowSummary>>,
}

impl VerifierState {
    pub fn new(client: Option<UtilityClient>, session_id: Option<String>, audit: bool, auto_verify: bool) -> Arc<Self> {
        Arc::new(Self { client, session_id, audit, auto_verify, compliance: Mutex::new(None), received: Mutex::new(Vec::new()) })
    }

    fn verify(&self, window: u64, audit: bool) -> Result<WindowVerdict, String> {
        let client = self.client.as_ref().ok_or("no utility configured")?;
        let mut guard = self.compliance.lock().unwrap_or_else(|p| p.into_inner());
        if guard.is_none() {
            *guard = Some(connect(client, self.session_id.as_deref()).map_err(|e| e.to_string())?);
        }
        Ok(request_and_verify(guard.as_mut().expect("connected"), client, window, audit))
    }
}

fn err(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: msg.into() })).into_response()
}

async fn push(State(st): State<Arc<VerifierState>>, Json(summary): Json<WindowSummary>) -> Response {
    let window = summary.window;
    st.received.lock().unwrap_or_else(|p| p.into_inner()).push(summary);
    if st.auto_verify && st.client.is_some() {
        let st2 = st.clone();
        tokio::task::spawn_blocking(move || {
            if let Err(e) = st2.verify(window, st2.audit) {
                eprintln!("verify window {window}: {e}");
            }
        });
    }
    StatusCode::ACCEPTED.into_response()
}

async fn received(State(st): State<Arc<VerifierState>>) -> Json<Vec<WindowSummary>> {
    Json(st.received.lock().unwrap_or_else(|p| p.into_inner()).clone())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyRequest {
    pub window: u64,
    #[serde(default)]
    pub audit: Option<bool>,
}

async fn verify(State(st): State<Arc<VerifierState>>, Json(req): Json<VerifyRequest>) -> Response {
    let st2 = st.clone();
    let audit = req.audit.unwrap_or(st.audit);
    match tokio::task::spawn_blocking(move || st2.verify(req.window, audit)).await {
        Ok(Ok(v)) => Json(v).into_response(),
        Ok(Err(e)) => err(StatusCode::BAD_GATEWAY, e),
        Err(e) => err(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn verdicts(State(st): State<Arc<VerifierState>>) -> Json<Vec<WindowVerdict>> {
    let guard = st.compliance.lock().unwrap_or_else(|p| p.into_inner());
    Json(guard.as_ref().map(|c| c.verdicts().cloned().collect()).unwrap_or_default())
}

async fn findings(State(st): State<Arc<VerifierState>>) -> Response {
    let guard = st.compliance.lock().unwrap_or_else(|p| p.into_inner());
    let body = guard.as_ref().map(|c| findings_jsonl(&c.detect_suppression(0..=u64::MAX))).unwrap_or_default();
    ([("content-type", "application/x-ndjson")], body).into_response()
}

pub fn router(state: Arc<VerifierState>) -> Router {
    Router::new()
        .route("/v1/summaries", post(push).get(received))
        .route("/v1/verify", post(verify))
        .route("/v1/verdicts", get(verdicts))
        .route("/v1/findings", get(findings))
        .route("/healthz", get(|| async { "ok" }))
        .with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, state: Arc<VerifierState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}
