//! A running optimizer whose oracle is whoever answers over HTTP.

use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use brlhf_core::acquisition::DuelQuery;
use brlhf_core::api::{Status, STATUS_ROWS};
use brlhf_core::harness::{AuditEntry, JsonlAuditWriter, Method, RunConfig, RunObserver, RunResult, TerminalStatus, TrajectoryRow};
use brlhf_core::oracle::{Preference, PreferenceOracle};
use brlhf_core::reward::{PreferenceRecord, Source};
use brlhf_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnswerError {
    /// The id was issued earlier but is no longer awaiting an answer.
    Stale,
    /// The id was never issued.
    Unknown,
}

#[derive(Debug)]
struct State {
    config: RunConfig,
    pending: Option<DuelQuery>,
    answer: Option<(u64, Preference)>,
    /// Highest duel id ever shown.
    issued: u64,
    rows: Vec<TrajectoryRow>,
    dataset: Vec<PreferenceRecord>,
    audit: Vec<AuditEntry>,
    result: Option<std::result::Result<RunResult, String>>,
}

/// Shared between the optimizer thread and the HTTP handlers. All mutation
/// goes through the mutex; handlers only copy data out.
#[derive(Debug)]
pub struct Session {
    state: Mutex<State>,
    answered: Condvar,
}

impl Session {
    pub fn new(config: RunConfig) -> Arc<Self> {
        Arc::new(Self {
            state: Mutex::new(State {
                config,
                pending: None,
                answer: None,
                issued: 0,
                rows: Vec::new(),
                dataset: Vec::new(),
                audit: Vec::new(),
                result: None,
            }),
            answered: Condvar::new(),
        })
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn pending(&self) -> Option<DuelQuery> {
        self.lock().pending.clone()
    }

    pub fn is_running(&self) -> bool {
        self.lock().result.is_none()
    }

    pub fn submit(&self, duel_id: u64, winner: Preference) -> std::result::Result<(), AnswerError> {
        let mut st = self.lock();
        match &st.pending {
            Some(d) if d.id == duel_id => {
                st.pending = None;
                st.answer = Some((duel_id, winner));
                self.answered.notify_all();
                Ok(())
            }
            _ if duel_id >= 1 && duel_id <= st.issued => Err(AnswerError::Stale),
            _ => Err(AnswerError::Unknown),
        }
    }

    pub fn dataset(&self) -> Vec<PreferenceRecord> {
        self.lock().dataset.clone()
    }

    pub fn audit(&self) -> Vec<AuditEntry> {
        self.lock().audit.clone()
    }

    pub fn result(&self) -> Option<std::result::Result<RunResult, String>> {
        self.lock().result.clone()
    }

    pub fn status(&self) -> Status {
        let st = self.lock();
        let cfg = &st.config;
        let last = st.rows.last();
        let (terminal, message) = match &st.result {
            Some(Ok(r)) => (Some(r.status), r.message.clone()),
            Some(Err(e)) => (None, Some(e.clone())),
            None => (None, None),
        };
        Status {
            running: st.result.is_none(),
            method: Some(cfg.method),
            queries: last.map_or(0, |r| r.queries),
            budget: Some(cfg.budget()),
            best_latent: last.map(|r| r.best_latent),
            best_abs_error: last.map(|r| r.abs_error),
            alpha: Some(cfg.acquisition.alpha),
            temperature: Some(cfg.acquisition.temperature),
            mode: Some(cfg.acquisition.mode),
            pending_duel: st.pending.as_ref().map(|d| d.id),
            terminal,
            message,
            rows: st.rows[st.rows.len().saturating_sub(STATUS_ROWS)..].to_vec(),
        }
    }

    /// Terminal status once the optimizer has stopped.
    pub fn terminal(&self) -> Option<TerminalStatus> {
        match &self.lock().result {
            Some(Ok(r)) => Some(r.status),
            _ => None,
        }
    }

    fn finish(&self, result: std::result::Result<RunResult, String>) {
        let mut st = self.lock();
        st.pending = None;
        st.result = Some(result);
    }
}

/// Oracle that publishes each duel to the session and blocks until it is
/// answered or the timeout elapses.
pub struct HumanOracle {
    session: Arc<Session>,
    timeout: Duration,
}

impl HumanOracle {
    pub fn new(session: Arc<Session>, timeout: Duration) -> Self {
        Self { session, timeout }
    }
}

impl PreferenceOracle for HumanOracle {
    fn answer(&mut self, duel: &DuelQuery) -> Result<Preference> {
        let deadline = Instant::now() + self.timeout;
        let mut st = self.session.lock();
        st.issued = st.issued.max(duel.id);
        if st.answer.is_none_or(|(id, _)| id != duel.id) {
            st.pending = Some(duel.clone());
        }
        loop {
            if let Some((id, winner)) = st.answer {
                if id == duel.id {
                    st.answer = None;
                    return Ok(winner);
                }
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(Error::OracleTimeout(self.timeout.as_secs_f64()));
            }
            st = self
                .session
                .answered
                .wait_timeout(st, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    fn source(&self) -> Source {
        Source::Human
    }
}

struct SessionObserver {
    session: Arc<Session>,
    file: Option<JsonlAuditWriter<std::io::BufWriter<std::fs::File>>>,
}

impl RunObserver for SessionObserver {
    fn on_duel(&mut self, entry: &AuditEntry) {
        {
            let mut st = self.session.lock();
            st.dataset.push(entry.record.clone());
            st.audit.push(entry.clone());
        }
        if let Some(f) = &mut self.file {
            f.on_duel(entry);
        }
    }

    fn on_row(&mut self, row: &TrajectoryRow) {
        self.session.lock().rows.push(*row);
    }
}

/// Runs the configured optimizer against human answers on the calling
/// thread until a stopping rule fires.
pub fn drive(session: Arc<Session>) {
    let cfg = session.lock().config.clone();
    let outcome = (|| -> Result<RunResult> {
        let file = match &cfg.audit_log {
            Some(p) => Some(JsonlAuditWriter::create(std::path::Path::new(p))?),
            None => None,
        };
        let mut observer = SessionObserver {
            session: session.clone(),
            file,
        };
        let timeout = Duration::from_secs_f64(cfg.oracle.human_timeout_secs);
        let mut oracle = HumanOracle::new(session.clone(), timeout);
        let result = match cfg.method {
            Method::Brlhf => brlhf_core::harness::run_brlhf_with(&cfg, &mut oracle, &mut observer),
            Method::Pbo => brlhf_core::harness::run_pbo_with(&cfg, &mut oracle, &mut observer),
        }?;
        if let Some(f) = observer.file.take() {
            f.finish()?;
        }
        Ok(result)
    })();
    session.finish(outcome.map_err(|e| e.to_string()));
}
