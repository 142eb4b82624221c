//! Blocking REST client for a utility's prover service.

use crate::compliance::{ComplianceSession, WindowVerdict};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::time::{Duration, Instant};
use thiserror::Error;
use zkstar_core::wire::{AuditGrant, ErrorBody, KeysResponse, ProofKind, ProofRequest, ProofResponse, SessionList, WindowSummary};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClientError {
    #[error("HTTP {status}: {message}")]
    Status { status: u16, message: String },
    #[error("transport: {0}")]
    Transport(String),
    #[error("bad response body: {0}")]
    Body(String),
}

impl ClientError {
    fn retryable(&self) -> bool {
        match self {
            ClientError::Transport(_) => true,
            ClientError::Status { status, .. } => *status >= 500,
            ClientError::Body(_) => false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct UtilityClient {
    base: String,
    token: Option<String>,
    agent: ureq::Agent,
    pub retries: u32,
    pub backoff: Duration,
}

impl UtilityClient {
    pub fn new(base: impl Into<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(30)))
            .build()
            .into();
        Self { base: base.into().trim_end_matches('/').to_string(), token: None, agent, retries: 3, backoff: Duration::from_millis(100) }
    }

    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token;
        self
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn once<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: Option<&B>) -> Result<T, ClientError> {
        let url = format!("{}{path}", self.base);
        let auth = self.token.as_ref().map(|t| format!("Bearer {t}"));
        let resp = match body {
            Some(b) => {
                let mut req = self.agent.post(&url);
                if let Some(a) = &auth {
                    req = req.header("Authorization", a);
                }
                req.send_json(b)
            }
            None => {
                let mut req = self.agent.get(&url);
                if let Some(a) = &auth {
                    req = req.header("Authorization", a);
                }
                req.call()
            }
        };
        let mut resp = resp.map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().with_config().limit(1 << 30).read_to_string().map_err(|e| ClientError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            let message = serde_json::from_str::<ErrorBody>(&text).map(|e| e.error).unwrap_or(text);
            return Err(ClientError::Status { status, message });
        }
        serde_json::from_str(&text).map_err(|e| ClientError::Body(e.to_string()))
    }

    /// Retry transport failures and 5xx responses with exponential backoff.
    fn call<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: Option<&B>) -> Result<T, ClientError> {
        let mut delay = self.backoff;
        let mut attempt = 0;
        loop {
            match self.once(path, body) {
                Err(e) if e.retryable() && attempt < self.retries => {
                    attempt += 1;
                    std::thread::sleep(delay);
                    delay *= 2;
                }
                r => return r,
            }
        }
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        self.call::<(), T>(path, None)
    }

    pub fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        self.call(path, Some(body))
    }

    pub fn sessions(&self) -> Result<Vec<String>, ClientError> {
        Ok(self.get::<SessionList>("/v1/sessions")?.sessions)
    }

    /// The named session, or the only one the utility serves.
    pub fn resolve_session(&self, session: Option<&str>) -> Result<String, ClientError> {
        if let Some(s) = session {
            return Ok(s.to_string());
        }
        let all = self.sessions()?;
        match all.as_slice() {
            [one] => Ok(one.clone()),
            _ => Err(ClientError::Body(format!("utility serves {} sessions; pick one", all.len()))),
        }
    }

    pub fn keys(&self, session: &str) -> Result<KeysResponse, ClientError> {
        self.get(&format!("/v1/sessions/{session}/keys"))
    }

    pub fn summary(&self, session: &str, window: u64) -> Result<WindowSummary, ClientError> {
        self.get(&format!("/v1/sessions/{session}/windows/{window}/summary"))
    }

    pub fn proofs(&self, session: &str, window: u64, kind: ProofKind) -> Result<ProofResponse, ClientError> {
        let req = ProofRequest { kind, requested_by: "regulator".into(), timestamp: None };
        self.post(&format!("/v1/sessions/{session}/windows/{window}/proofs"), &req)
    }

    pub fn witness(&self, session: &str, window: u64) -> Result<AuditGrant, ClientError> {
        self.get(&format!("/v1/sessions/{session}/windows/{window}/witness"))
    }
}

/// Pull a window's summary, request its artifacts and verify them.
/// Failures to fetch yield an incomplete verdict rather than an error.
pub fn request_and_verify(session: &mut ComplianceSession, client: &UtilityClient, window: u64, audit: bool) -> WindowVerdict {
    let started = Instant::now();
    let stream = session.stream_id().to_string();
    let mut verdict = (|| {
        let keys = client.keys(&stream).map_err(|e| format!("keys: {e}"))?;
        let summary = client.summary(&stream, window).map_err(|e| format!("summary: {e}"))?;
        if summary.window != window {
            return Err(format!("asked for window {window}, utility answered with window {}", summary.window));
        }
        if window > 0 && !session.knows_outputs(window - 1) {
            if let Ok(prev) = client.summary(&stream, window - 1) {
                session.record_summary(&prev);
            }
        }
        let artifacts = client.proofs(&stream, window, ProofKind::FullWindow).map_err(|e| format!("proofs: {e}"))?;
        let grant = if audit { Some(client.witness(&stream, window).map_err(|e| format!("witness: {e}"))?) } else { None };
        let v = session.verify_window(&summary, &artifacts.artifacts, grant.as_ref(), Some(&keys));
        session.record_summary(&summary);
        Ok::<_, String>(v)
    })()
    .unwrap_or_else(|e| WindowVerdict::incomplete(window, e));
    verdict.latency_ms = Some(started.elapsed().as_secs_f64() * 1e3);
    session.store(verdict.clone());
    verdict
}

/// Pin the keys a utility currently publishes.
pub fn connect(client: &UtilityClient, session: Option<&str>) -> Result<ComplianceSession, ClientError> {
    let id = client.resolve_session(session)?;
    let keys = client.keys(&id)?;
    ComplianceSession::new(client.base(), keys).map_err(ClientError::Body)
}
