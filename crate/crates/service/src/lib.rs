//! HTTP/JSON service: batch runs, alpha sweeps, and a human-answered
//! session whose duels are served one at a time.

mod session;

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use tokio::net::TcpListener;

use brlhf_core::api::{AnswerAccepted, AnswerRequest, ErrorBody, Health, SessionStarted, Status};
use brlhf_core::harness::{alpha_sweep, run, RunConfig, SweepRequest, ENGINE_VERSION};
use brlhf_core::oracle::OracleMode;
use brlhf_core::Error;

pub use session::{AnswerError, HumanOracle, Session};

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::InvalidConfig(_) | Error::Parse(_) | Error::Json(_) | Error::DimensionMismatch { .. } | Error::OracleUnavailable(_) => {
                StatusCode::BAD_REQUEST
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Default)]
struct AppState {
    session: Mutex<Option<Arc<Session>>>,
}

impl AppState {
    fn current(&self) -> Option<Arc<Session>> {
        self.session.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed request body: {e}")))
}

fn parse_config(body: &Bytes) -> ApiResult<RunConfig> {
    Ok(RunConfig::from_value(parse(body)?)?)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> brlhf_core::Result<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")))?
        .map_err(ApiError::from)
}

async fn health() -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        engine: ENGINE_VERSION.into(),
    })
}

async fn post_run(body: Bytes) -> ApiResult<Response> {
    let cfg = parse_config(&body)?;
    if cfg.oracle.mode == OracleMode::Human {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "human-oracle runs are started with POST /session",
        ));
    }
    let result = blocking(move || run(&cfg)).await?;
    Ok(Json(result).into_response())
}

async fn post_sweep(body: Bytes) -> ApiResult<Response> {
    let req: SweepRequest = parse(&body)?;
    let summary = blocking(move || alpha_sweep(&req)).await?;
    Ok(Json(summary).into_response())
}

async fn post_session(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let mut cfg = parse_config(&body)?;
    cfg.oracle.mode = OracleMode::Human;
    let mut slot = state.session.lock().unwrap_or_else(|e| e.into_inner());
    if slot.as_ref().is_some_and(|s| s.is_running()) {
        return Err(ApiError::new(StatusCode::CONFLICT, "a session is already running"));
    }
    let started = SessionStarted {
        method: cfg.method,
        budget: cfg.budget(),
        seed: cfg.seed,
    };
    let session = Session::new(cfg);
    let worker = session.clone();
    std::thread::Builder::new()
        .name("human-session".into())
        .spawn(move || session::drive(worker))
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    *slot = Some(session);
    Ok((StatusCode::CREATED, Json(started)).into_response())
}

async fn next_duel(State(state): State<Arc<AppState>>) -> Response {
    match state.current().and_then(|s| s.pending()) {
        Some(duel) => Json(duel).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn answer(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<AnswerAccepted>> {
    let req: AnswerRequest = parse(&body)?;
    let session = state
        .current()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("duel {} was never issued", req.duel_id)))?;
    match session.submit(req.duel_id, req.winner) {
        Ok(()) => Ok(Json(AnswerAccepted {
            duel_id: req.duel_id,
            winner: req.winner,
        })),
        Err(AnswerError::Stale) => Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("duel {} is not awaiting an answer", req.duel_id),
        )),
        Err(AnswerError::Unknown) => Err(ApiError::new(
            StatusCode::NOT_FOUND,
            format!("duel {} was never issued", req.duel_id),
        )),
    }
}

async fn status(State(state): State<Arc<AppState>>) -> Json<Status> {
    Json(match state.current() {
        Some(s) => s.status(),
        None => Status {
            running: false,
            method: None,
            queries: 0,
            budget: None,
            best_latent: None,
            best_abs_error: None,
            alpha: None,
            temperature: None,
            mode: None,
            pending_duel: None,
            terminal: None,
            message: None,
            rows: Vec::new(),
        },
    })
}

async fn audit(State(state): State<Arc<AppState>>) -> Response {
    Json(state.current().map(|s| s.audit()).unwrap_or_default()).into_response()
}

async fn dataset(State(state): State<Arc<AppState>>) -> Response {
    Json(state.current().map(|s| s.dataset()).unwrap_or_default()).into_response()
}

pub fn router() -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/runs", post(post_run))
        .route("/sweeps", post(post_sweep))
        .route("/session", post(post_session))
        .route("/duel/next", get(next_duel))
        .route("/duel/answer", post(answer))
        .route("/status", get(status))
        .route("/audit", get(audit))
        .route("/dataset", get(dataset))
        .with_state(Arc::new(AppState::default()))
}

pub async fn serve(listener: TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router()).await
}

/// Binds `addr` and serves in a background task; returns the bound address.
pub async fn spawn(addr: SocketAddr) -> std::io::Result<SocketAddr> {
    let listener = TcpListener::bind(addr).await?;
    let bound = listener.local_addr()?;
    tokio::spawn(serve(listener));
    Ok(bound)
}
