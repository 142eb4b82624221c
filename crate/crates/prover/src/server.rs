//! REST front end over [`ProverSession`].

use crate::session::{ProverError, ProverSession};
use axum::extract::{Path, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, RwLock};
use zkstar_core::wire::{ErrorBody, IngestRequest, ProofRequest, ProofResponse, SessionConfig, SessionList, WindowSummary};

pub struct AppState {
    sessions: RwLock<HashMap<String, Arc<Mutex<ProverSession>>>>,
    token: Option<String>,
}

impl AppState {
    pub fn new(token: Option<String>) -> Arc<Self> {
        Arc::new(Self { sessions: RwLock::new(HashMap::new()), token })
    }

    /// Register an already opened session.
    pub fn insert(&self, session: ProverSession) -> Result<(), ApiError> {
        let mut map = self.sessions.write().expect("session map");
        let id = session.id().to_string();
        if map.contains_key(&id) {
            return Err(ApiError(StatusCode::CONFLICT, format!("session {id} already exists")));
        }
        map.insert(id, Arc::new(Mutex::new(session)));
        Ok(())
    }

    pub fn session(&self, id: &str) -> Result<Arc<Mutex<ProverSession>>, ApiError> {
        self.sessions
            .read()
            .expect("session map")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown session {id}")))
    }
}

#[derive(Debug)]
pub struct ApiError(pub StatusCode, pub String);

impl From<ProverError> for ApiError {
    fn from(e: ProverError) -> Self {
        let status = match &e {
            ProverError::Config(_) | ProverError::Model(_) => StatusCode::BAD_REQUEST,
            ProverError::Sample(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ProverError::Halted(_) | ProverError::WindowOpen(_) => StatusCode::CONFLICT,
            ProverError::UnknownWindow(_) | ProverError::UnknownInterval { .. } => StatusCode::NOT_FOUND,
            ProverError::Expired(_) => StatusCode::GONE,
            ProverError::Proof(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(ErrorBody { error: self.1 })).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

fn lock(s: &Mutex<ProverSession>) -> std::sync::MutexGuard<'_, ProverSession> {
    s.lock().unwrap_or_else(|p| p.into_inner())
}

async fn list(State(st): State<Arc<AppState>>) -> Json<SessionList> {
    let mut sessions: Vec<String> = st.sessions.read().expect("session map").keys().cloned().collect();
    sessions.sort();
    Json(SessionList { sessions })
}

async fn open(State(st): State<Arc<AppState>>, Json(cfg): Json<SessionConfig>) -> Result<(StatusCode, Json<serde_json::Value>), ApiError> {
    let st2 = st.clone();
    let opened = blocking(move || {
        let session = ProverSession::open(cfg)?;
        let opened = session.opened();
        st2.insert(session)?;
        Ok(opened)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(serde_json::to_value(opened).expect("serializable"))))
}

/// POST summaries of newly closed windows to the session webhook; failures are reported, not fatal.
fn push_summaries(url: &str, summaries: &[WindowSummary]) {
    for s in summaries {
        if let Err(e) = ureq::post(url).send_json(s) {
            eprintln!("webhook {url}: window {}: {e}", s.window);
        }
    }
}

async fn ingest(State(st): State<Arc<AppState>>, Path(id): Path<String>, Json(req): Json<IngestRequest>) -> ApiResult<zkstar_core::wire::IngestAck> {
    let session = st.session(&id)?;
    let ack = blocking(move || {
        let mut s = lock(&session);
        let ack = s.ingest(&req.samples)?;
        if let Some(url) = s.config().webhook.clone() {
            let summaries: Vec<WindowSummary> = ack.closed_windows.iter().filter_map(|w| s.summary(*w).ok()).collect();
            drop(s);
            push_summaries(&url, &summaries);
        }
        Ok(ack)
    })
    .await?;
    Ok(Json(ack))
}

async fn keys(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<zkstar_core::wire::KeysResponse> {
    let session = st.session(&id)?;
    let k = lock(&session).keys();
    Ok(Json(k))
}

async fn summary(State(st): State<Arc<AppState>>, Path((id, w)): Path<(String, u64)>) -> ApiResult<WindowSummary> {
    let session = st.session(&id)?;
    let s = lock(&session).summary(w)?;
    Ok(Json(s))
}

async fn proofs(State(st): State<Arc<AppState>>, Path((id, w)): Path<(String, u64)>, Json(req): Json<ProofRequest>) -> ApiResult<ProofResponse> {
    let session = st.session(&id)?;
    let record = lock(&session).window(w)?;
    let artifacts = blocking(move || Ok(record.artifacts(req.kind)?)).await?;
    Ok(Json(ProofResponse { window: w, artifacts }))
}

async fn witness(State(st): State<Arc<AppState>>, Path((id, w)): Path<(String, u64)>) -> ApiResult<zkstar_core::wire::AuditGrant> {
    let session = st.session(&id)?;
    let record = lock(&session).window(w)?;
    Ok(Json(record.audit_grant()))
}

async fn metrics(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<zkstar_core::wire::MetricsReport> {
    let session = st.session(&id)?;
    let m = lock(&session).metrics();
    Ok(Json(m))
}

async fn ledger(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<serde_json::Value> {
    let session = st.session(&id)?;
    let d = lock(&session).ledger_dump();
    Ok(Json(d))
}

async fn auth(State(st): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    if let Some(token) = &st.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|v| v == token);
        if !ok {
            return ApiError(StatusCode::UNAUTHORIZED, "missing or wrong bearer token".into()).into_response();
        }
    }
    next.run(req).await
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/sessions", get(list).post(open))
        .route("/v1/sessions/{id}/ingest", post(ingest))
        .route("/v1/sessions/{id}/keys", get(keys))
        .route("/v1/sessions/{id}/windows/{w}/summary", get(summary))
        .route("/v1/sessions/{id}/windows/{w}/proofs", post(proofs))
        .route("/v1/sessions/{id}/windows/{w}/witness", get(witness))
        .route("/v1/sessions/{id}/metrics", get(metrics))
        .route("/v1/sessions/{id}/ledger", get(ledger))
        .layer(middleware::from_fn_with_state(state.clone(), auth))
        .route("/healthz", get(|| async { "ok" }))
        .with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

/// A server on its own runtime thread; shuts down when dropped.
pub struct ServerHandle {
    pub addr: SocketAddr,
    pub state: Arc<AppState>,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

pub fn spawn(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<ServerHandle> {
    let std_listener = std::net::TcpListener::bind(addr)?;
    std_listener.set_nonblocking(true)?;
    let addr = std_listener.local_addr()?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let app = router(state.clone());
    let thread = std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().expect("tokio runtime");
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(std_listener).expect("listener");
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
    });
    Ok(ServerHandle { addr, state, shutdown: Some(tx), thread: Some(thread) })
}
