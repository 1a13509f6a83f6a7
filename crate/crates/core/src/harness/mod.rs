//! Experiment orchestration for the neural (B-RLHF) loop and the GP baseline.

mod config;
mod io;
mod sweep;

pub use config::{apply_overrides, load_config, GpConfig, Method, RunConfig};
pub use io::{emit_csv, format_sig9, parse_csv, write_csv, JsonlAuditWriter, CSV_HEADER};
pub use sweep::{alpha_sweep, queries_to_target, summarize_sweep, write_sweep_csv, SweepRequest, SweepRow, SweepRun, SweepSummary};

use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acquisition::{select_duel, DuelQuery};
use crate::error::{Error, Result};
use crate::gp::{pbo_propose, pbo_update, PboState, PboStep};
use crate::laplace::{add_pair_curvature, build_posterior, last_layer_hessian, LaplacePosterior};
use crate::oracle::{latent_utility, Preference, PreferenceOracle, ProblemSpec, SyntheticOracle};
use crate::policy::GaussianPolicy;
use crate::reward::{InputScaler, PreferenceRecord, RewardModel};

pub const ENGINE_VERSION: &str = concat!("brlhf-core ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub iter: u64,
    pub queries: u64,
    pub best_latent: f64,
    pub abs_error: f64,
    pub wall_ms: f64,
    pub refit_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TerminalStatus {
    Budget,
    Time,
    Memory,
    Numerical,
}

/// One audited duel: what was offered, how it was scored, and the answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub iteration: u64,
    pub duel_id: u64,
    pub pool_hashes: Vec<String>,
    pub best: usize,
    pub rival: usize,
    pub s_spar: Vec<f64>,
    pub s_var: Vec<f64>,
    pub j_alpha: Vec<f64>,
    pub answer: Preference,
    pub record: PreferenceRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub rows: Vec<TrajectoryRow>,
    pub status: TerminalStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    pub config: RunConfig,
    pub engine: String,
    #[serde(default)]
    pub audit: Vec<AuditEntry>,
}

impl RunResult {
    pub fn final_abs_error(&self) -> Option<f64> {
        self.rows.last().map(|r| r.abs_error)
    }
}

/// Progress hooks for a running experiment.
pub trait RunObserver {
    fn on_duel(&mut self, _entry: &AuditEntry) {}

    fn on_row(&mut self, _row: &TrajectoryRow) {}
}

pub struct NoopObserver;

impl RunObserver for NoopObserver {}

/// First 16 hex digits of the SHA-256 of a point's little-endian bytes.
pub fn point_hash(x: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in x {
        h.update(v.to_le_bytes());
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

struct Recorder<'a> {
    cfg: &'a RunConfig,
    started: Instant,
    rows: Vec<TrajectoryRow>,
    audit: Vec<AuditEntry>,
    best: f64,
    observer: &'a mut dyn RunObserver,
}

impl<'a> Recorder<'a> {
    fn new(cfg: &'a RunConfig, observer: &'a mut dyn RunObserver) -> Self {
        Self {
            cfg,
            started: Instant::now(),
            rows: Vec::new(),
            audit: Vec::new(),
            best: f64::NEG_INFINITY,
            observer,
        }
    }

    fn out_of_time(&self) -> bool {
        self.started.elapsed().as_secs_f64() >= self.cfg.wall_clock_secs
    }

    fn record_duel(&mut self, duel: &DuelQuery, pool: &[Vec<f64>], answer: Preference, record: &PreferenceRecord) -> Result<()> {
        for x in [&duel.first, &duel.second] {
            self.best = self.best.max(latent_utility(&self.cfg.problem, x)?);
        }
        let entry = AuditEntry {
            iteration: record.iteration,
            duel_id: duel.id,
            pool_hashes: pool.iter().map(|x| point_hash(x)).collect(),
            best: duel.best,
            rival: duel.rival,
            s_spar: duel.s_spar.clone(),
            s_var: duel.s_var.clone(),
            j_alpha: duel.j_alpha.clone(),
            answer,
            record: record.clone(),
        };
        self.observer.on_duel(&entry);
        self.audit.push(entry);
        Ok(())
    }

    fn push_row(&mut self, queries: u64, refit_ms: f64) {
        let abs_error = match self.cfg.problem.optimum_value() {
            Some(f_star) => (-self.best - f_star).abs(),
            None => f64::NAN,
        };
        let row = TrajectoryRow {
            iter: self.rows.len() as u64 + 1,
            queries,
            best_latent: self.best,
            abs_error,
            wall_ms: self.started.elapsed().as_secs_f64() * 1e3,
            refit_ms,
        };
        self.observer.on_row(&row);
        self.rows.push(row);
    }

    fn finish(self, status: TerminalStatus, message: Option<String>) -> RunResult {
        RunResult {
            rows: self.rows,
            status,
            message,
            config: self.cfg.clone(),
            engine: ENGINE_VERSION.to_string(),
            audit: self.audit,
        }
    }
}

fn make_record(duel: &DuelQuery, answer: Preference, source: crate::reward::Source, iteration: u64) -> Result<PreferenceRecord> {
    let (w, l) = match answer {
        Preference::First => (&duel.first, &duel.second),
        Preference::Second => (&duel.second, &duel.first),
    };
    PreferenceRecord::new(w.clone(), l.clone(), source, iteration)
}

/// Drops repeated points, which arise when samples clamp to the same box
/// corner, and tops up with uniform points so at least two remain.
fn distinct_pool(candidates: Vec<Vec<f64>>, problem: &ProblemSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut pool: Vec<Vec<f64>> = Vec::with_capacity(candidates.len());
    for x in candidates {
        if !pool.contains(&x) {
            pool.push(x);
        }
    }
    while pool.len() < 2 {
        let x = problem.uniform_point(rng);
        if !pool.contains(&x) {
            pool.push(x);
        }
    }
    pool
}

/// Asks the oracle, retrying after timeouts until the wall-clock limit.
/// `Ok(None)` means time ran out while waiting.
fn ask(oracle: &mut dyn PreferenceOracle, duel: &DuelQuery, rec: &Recorder) -> Result<Option<Preference>> {
    loop {
        match oracle.answer(duel) {
            Ok(a) => return Ok(Some(a)),
            Err(Error::OracleTimeout(_)) => {
                if rec.out_of_time() {
                    return Ok(None);
                }
            }
            Err(e) => return Err(e),
        }
    }
}

/// The neural loop: policy proposes a pool, the Laplace reward posterior
/// picks a duel, the oracle answers, and the model, posterior and policy are
/// updated.
pub fn run_brlhf_with(cfg: &RunConfig, oracle: &mut dyn PreferenceOracle, observer: &mut dyn RunObserver) -> Result<RunResult> {
    cfg.validate()?;
    let mut rec = Recorder::new(cfg, observer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let problem = &cfg.problem;
    let (lower, upper) = (problem.lower_bounds(), problem.upper_bounds());
    let mut policy = GaussianPolicy::new(lower.clone(), upper.clone(), &cfg.policy)?;
    let scaler = InputScaler::from_box(&lower, &upper);
    let cold_start = cfg.acquisition.pool_size.div_ceil(2) as u64;

    let mut records: Vec<PreferenceRecord> = Vec::new();
    let mut model: Option<RewardModel> = None;
    let mut hessian: Option<DMatrix<f64>> = None;
    let mut posterior: Option<LaplacePosterior> = None;
    let mut last_fit = 0u64;

    for q in 1..=cfg.budget() as u64 {
        if rec.out_of_time() {
            return Ok(rec.finish(TerminalStatus::Time, None));
        }
        let (mut duel, pool) = match (&model, &posterior) {
            (Some(m), Some(post)) if q > cold_start => {
                let samples = policy.sample_candidates(cfg.acquisition.pool_size, cfg.policy.explore_fraction, &mut rng)?;
                let pool = distinct_pool(samples.into_iter().map(|s| s.x).collect(), problem, &mut rng);
                (select_duel(post, m, &pool, &cfg.acquisition, &mut rng)?, pool)
            }
            _ => {
                let pair = vec![problem.uniform_point(&mut rng), problem.uniform_point(&mut rng)];
                (DuelQuery::unscored(pair[0].clone(), pair[1].clone(), &cfg.acquisition), pair)
            }
        };
        duel.id = q;
        let Some(answer) = ask(oracle, &duel, &rec)? else {
            return Ok(rec.finish(TerminalStatus::Time, None));
        };
        let record = make_record(&duel, answer, oracle.source(), q)?;
        rec.record_duel(&duel, &pool, answer, &record)?;
        records.push(record);

        let mut refit_ms = 0.0;
        let due = match model {
            None => q >= cold_start,
            Some(_) => q - last_fit >= cfg.retrain_every as u64,
        };
        let step: Result<()> = (|| {
            if due {
                let t0 = Instant::now();
                let m = match model.take() {
                    Some(m) => m,
                    None => RewardModel::new(problem.dim, &cfg.reward, cfg.train.weight_decay, scaler.clone(), &mut init_rng)?,
                };
                let m = model.insert(m);
                m.train(&records, &cfg.train)?;
                let h = last_layer_hessian(m, &records)?;
                posterior = Some(build_posterior(&m.head, h.clone())?);
                hessian = Some(h);
                refit_ms = t0.elapsed().as_secs_f64() * 1e3;
                last_fit = q;
            } else if let (Some(m), Some(h)) = (&model, hessian.as_mut()) {
                let r = records.last().unwrap();
                let delta: Vec<f64> = m
                    .features(&r.winner)?
                    .iter()
                    .zip(m.features(&r.loser)?)
                    .map(|(a, b)| a - b)
                    .collect();
                add_pair_curvature(h, &m.head, &delta);
                posterior = Some(build_posterior(&m.head, h.clone())?);
            }
            if let Some(m) = &model {
                for _ in 0..cfg.policy.updates_per_query {
                    let batch = policy.sample_candidates(cfg.policy.batch_size, 0.0, &mut rng)?;
                    let rewards = batch.iter().map(|s| m.score(&s.x)).collect::<Result<Vec<_>>>()?;
                    policy.reinforce_update(&batch, &rewards)?;
                }
            }
            Ok(())
        })();
        match step {
            Ok(()) => rec.push_row(q, refit_ms),
            Err(Error::NonFinite(msg)) => {
                rec.push_row(q, refit_ms);
                return Ok(rec.finish(TerminalStatus::Numerical, Some(msg)));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(rec.finish(TerminalStatus::Budget, None))
}

/// The preferential GP baseline under the same stopping rules.
pub fn run_pbo_with(cfg: &RunConfig, oracle: &mut dyn PreferenceOracle, observer: &mut dyn RunObserver) -> Result<RunResult> {
    cfg.validate()?;
    let mut rec = Recorder::new(cfg, observer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = PboState::new(
        cfg.problem.clone(),
        cfg.gp.hyper(&cfg.problem),
        cfg.acquisition.clone(),
        cfg.budget(),
        cfg.gp.memory_limit_bytes,
    )?;
    loop {
        if rec.out_of_time() {
            return Ok(rec.finish(TerminalStatus::Time, None));
        }
        let duel = match pbo_propose(&state, &mut rng) {
            Ok(Ok(d)) => d,
            Ok(Err(PboStep::MemoryExhausted)) => {
                let bytes = PboState::kernel_bytes(state.fit.points.len() + 2);
                return Ok(rec.finish(
                    TerminalStatus::Memory,
                    Some(format!("kernel matrix would need {bytes} bytes after {} queries", state.queries)),
                ));
            }
            Ok(Err(_)) => return Ok(rec.finish(TerminalStatus::Budget, None)),
            Err(Error::NonFinite(msg)) => return Ok(rec.finish(TerminalStatus::Numerical, Some(msg))),
            Err(e) => return Err(e),
        };
        let Some(answer) = ask(oracle, &duel, &rec)? else {
            return Ok(rec.finish(TerminalStatus::Time, None));
        };
        let record = make_record(&duel, answer, oracle.source(), state.queries as u64 + 1)?;
        rec.record_duel(&duel, &[duel.first.clone(), duel.second.clone()], answer, &record)?;
        match pbo_update(&mut state, duel, answer) {
            Ok(()) => rec.push_row(state.queries as u64, state.last_refit_ms),
            Err(Error::NonFinite(msg)) => {
                rec.push_row(state.queries as u64 + 1, 0.0);
                return Ok(rec.finish(TerminalStatus::Numerical, Some(msg)));
            }
            Err(e) => return Err(e),
        }
    }
}

/// Runs `cfg` against its synthetic oracle.
pub fn run(cfg: &RunConfig) -> Result<RunResult> {
    run_observed(cfg, &mut NoopObserver)
}

pub fn run_observed(cfg: &RunConfig, observer: &mut dyn RunObserver) -> Result<RunResult> {
    if cfg.oracle.mode == crate::oracle::OracleMode::Human {
        return Err(Error::OracleUnavailable(
            "human oracle runs must go through the duel service".into(),
        ));
    }
    let mut oracle = SyntheticOracle::new(
        cfg.problem.clone(),
        cfg.oracle.clone(),
        cfg.seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(1),
    );
    match cfg.method {
        Method::Brlhf => run_brlhf_with(cfg, &mut oracle, observer),
        Method::Pbo => run_pbo_with(cfg, &mut oracle, observer),
    }
}

pub fn run_brlhf(cfg: &RunConfig) -> Result<RunResult> {
    let cfg = RunConfig {
        method: Method::Brlhf,
        ..cfg.clone()
    };
    run(&cfg)
}

pub fn run_pbo(cfg: &RunConfig) -> Result<RunResult> {
    let cfg = RunConfig {
        method: Method::Pbo,
        ..cfg.clone()
    };
    run(&cfg)
}
