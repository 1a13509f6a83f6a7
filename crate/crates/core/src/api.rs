//! JSON bodies of the HTTP protocol shared by the service and its clients.

use serde::{Deserialize, Serialize};

use crate::acquisition::AcqMode;
use crate::harness::{Method, TerminalStatus, TrajectoryRow};
use crate::oracle::Preference;
use crate::reward::PreferenceRecord;

/// Rows kept in a status snapshot.
pub const STATUS_ROWS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub engine: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerRequest {
    pub duel_id: u64,
    pub winner: Preference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerAccepted {
    pub duel_id: u64,
    pub winner: Preference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStarted {
    pub method: Method,
    pub budget: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Status {
    /// True while a human-oracle session is running.
    pub running: bool,
    pub method: Option<Method>,
    pub queries: u64,
    pub budget: Option<usize>,
    pub best_latent: Option<f64>,
    pub best_abs_error: Option<f64>,
    pub alpha: Option<f64>,
    pub temperature: Option<f64>,
    pub mode: Option<AcqMode>,
    pub pending_duel: Option<u64>,
    pub terminal: Option<TerminalStatus>,
    pub message: Option<String>,
    /// The most recent trajectory rows, oldest first.
    pub rows: Vec<TrajectoryRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

/// Human-answered records of the current session, in answer order.
pub type Dataset = Vec<PreferenceRecord>;
