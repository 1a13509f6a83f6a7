//! Typed async client for the brlhf HTTP service.

use brlhf_core::acquisition::DuelQuery;
use brlhf_core::api::{AnswerAccepted, AnswerRequest, Dataset, ErrorBody, Health, SessionStarted, Status};
use brlhf_core::harness::{AuditEntry, RunConfig, RunResult, SweepRequest, SweepSummary};
use brlhf_core::oracle::Preference;
use reqwest::{Response, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    /// The service answered with a non-success status.
    #[error("service returned {status}: {message}")]
    Api { status: StatusCode, message: String },
}

impl ClientError {
    pub fn status(&self) -> Option<StatusCode> {
        match self {
            Self::Api { status, .. } => Some(*status),
            Self::Http(e) => e.status(),
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

async fn decode<T: DeserializeOwned>(resp: Response) -> Result<T> {
    let status = resp.status();
    if status.is_success() {
        return Ok(resp.json().await?);
    }
    let text = resp.text().await.unwrap_or_default();
    let message = serde_json::from_str::<ErrorBody>(&text).map_or(text, |b| b.error);
    Err(ClientError::Api { status, message })
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        decode(self.http.get(format!("{}{path}", self.base)).send().await?).await
    }

    async fn post<B: Serialize + ?Sized, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        decode(self.http.post(format!("{}{path}", self.base)).json(body).send().await?).await
    }

    pub async fn health(&self) -> Result<Health> {
        self.get("/health").await
    }

    /// Runs a synthetic-oracle experiment to completion on the service.
    pub async fn run(&self, cfg: &RunConfig) -> Result<RunResult> {
        self.post("/runs", cfg).await
    }

    pub async fn sweep(&self, req: &SweepRequest) -> Result<SweepSummary> {
        self.post("/sweeps", req).await
    }

    /// Starts a human-answered session; the oracle mode is forced to human.
    pub async fn start_session(&self, cfg: &RunConfig) -> Result<SessionStarted> {
        self.post("/session", cfg).await
    }

    /// The duel awaiting an answer, if any.
    pub async fn next_duel(&self) -> Result<Option<DuelQuery>> {
        let resp = self.http.get(format!("{}/duel/next", self.base)).send().await?;
        if resp.status() == StatusCode::NO_CONTENT {
            return Ok(None);
        }
        decode(resp).await.map(Some)
    }

    pub async fn answer(&self, duel_id: u64, winner: Preference) -> Result<AnswerAccepted> {
        self.post("/duel/answer", &AnswerRequest { duel_id, winner }).await
    }

    pub async fn status(&self) -> Result<Status> {
        self.get("/status").await
    }

    pub async fn audit(&self) -> Result<Vec<AuditEntry>> {
        self.get("/audit").await
    }

    pub async fn dataset(&self) -> Result<Dataset> {
        self.get("/dataset").await
    }
}
