use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run, RunConfig, RunResult};
use crate::error::{Error, Result};
use crate::math::lower_quantile;

fn default_target() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRequest {
    pub base: RunConfig,
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Absolute-error threshold defining queries-to-target.
    #[serde(default = "default_target")]
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub alpha: f64,
    pub seed: u64,
    pub queries_to_target: u64,
    pub censored: bool,
    pub final_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub runs: usize,
    pub median: u64,
    pub q1: u64,
    pub q3: u64,
    pub iqr: u64,
    pub censored: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub target: f64,
    pub budget: u64,
    pub rows: Vec<SweepRow>,
    pub runs: Vec<SweepRun>,
}

/// First query count whose best-so-far error is below `target`, or the
/// budget with a censored flag.
pub fn queries_to_target(result: &RunResult, target: f64) -> (u64, bool) {
    match result.rows.iter().find(|r| r.abs_error < target) {
        Some(r) => (r.queries, false),
        None => (result.config.budget() as u64, true),
    }
}

/// Per-alpha lower median and quartiles of queries-to-target, in the order
/// of `alphas`.
pub fn summarize_sweep(runs: &[SweepRun], alphas: &[f64]) -> Vec<SweepRow> {
    alphas
        .iter()
        .map(|&alpha| {
            let mine: Vec<&SweepRun> = runs.iter().filter(|r| r.alpha == alpha).collect();
            let q: Vec<f64> = mine.iter().map(|r| r.queries_to_target as f64).collect();
            let at = |p: f64| if q.is_empty() { 0 } else { lower_quantile(&q, p) as u64 };
            let (q1, median, q3) = (at(0.25), at(0.5), at(0.75));
            SweepRow {
                alpha,
                runs: mine.len(),
                median,
                q1,
                q3,
                iqr: q3 - q1,
                censored: mine.iter().filter(|r| r.censored).count(),
            }
        })
        .collect()
}

/// Runs every alpha × seed combination in parallel and summarizes.
pub fn alpha_sweep(req: &SweepRequest) -> Result<SweepSummary> {
    if req.alphas.is_empty() || req.seeds.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one alpha and one seed".into()));
    }
    if !(req.target > 0.0) {
        return Err(Error::InvalidConfig("sweep target must be positive".into()));
    }
    let jobs: Vec<(f64, u64)> = req.alphas.iter().flat_map(|&a| req.seeds.iter().map(move |&s| (a, s))).collect();
    let runs = jobs
        .par_iter()
        .map(|&(alpha, seed)| {
            let mut cfg = req.base.clone();
            cfg.acquisition.alpha = alpha;
            cfg.seed = seed;
            let result = run(&cfg)?;
            let (q, censored) = queries_to_target(&result, req.target);
            Ok(SweepRun {
                alpha,
                seed,
                queries_to_target: q,
                censored,
                final_abs_error: result.final_abs_error().unwrap_or(f64::NAN),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepSummary {
        target: req.target,
        budget: req.base.budget() as u64,
        rows: summarize_sweep(&runs, &req.alphas),
        runs,
    })
}

/// Summary table: `alpha,runs,median,q1,q3,iqr,censored`.
pub fn write_sweep_csv<W: Write>(summary: &SweepSummary, mut out: W) -> Result<()> {
    writeln!(out, "alpha,runs,median,q1,q3,iqr,censored")?;
    for r in &summary.rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.alpha, r.runs, r.median, r.q1, r.q3, r.iqr, r.censored
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{Method, TerminalStatus, TrajectoryRow};
    use crate::oracle::ProblemSpec;

    fn result_with(errors: &[f64], budget: usize) -> RunResult {
        let mut cfg = RunConfig::new(Method::Pbo, ProblemSpec::rosenbrock(2), 0);
        cfg.budget = Some(budget);
        RunResult {
            rows: errors
                .iter()
                .enumerate()
                .map(|(i, &e)| TrajectoryRow {
                    iter: i as u64 + 1,
                    queries: i as u64 + 1,
                    best_latent: -e,
                    abs_error: e,
                    wall_ms: 0.0,
                    refit_ms: 0.0,
                })
                .collect(),
            status: TerminalStatus::Budget,
            message: None,
            config: cfg,
            engine: String::new(),
            audit: vec![],
        }
    }

    fn run_of(alpha: f64, q: u64, censored: bool) -> SweepRun {
        SweepRun {
            alpha,
            seed: 0,
            queries_to_target: q,
            censored,
            final_abs_error: 0.0,
        }
    }

    #[test]
    fn target_hit_and_censoring() {
        assert_eq!(queries_to_target(&result_with(&[3.0, 0.5, 0.05, 0.01], 4), 0.1), (3, false));
        assert_eq!(queries_to_target(&result_with(&[3.0, 0.5], 2), 0.1), (2, true));
        assert_eq!(queries_to_target(&result_with(&[], 7), 0.1), (7, true));
    }

    #[test]
    fn single_run_summary_equals_run() {
        let rows = summarize_sweep(&[run_of(0.5, 42, false)], &[0.5]);
        assert_eq!(rows.len(), 1);
        assert_eq!((rows[0].median, rows[0].q1, rows[0].q3, rows[0].censored), (42, 42, 42, 0));
    }

    #[test]
    fn lower_median_rule() {
        let runs: Vec<SweepRun> = [10, 40, 20, 30]
            .iter()
            .map(|&q| run_of(0.0, q, false))
            .chain([run_of(1.0, 5, true)])
            .collect();
        let rows = summarize_sweep(&runs, &[0.0, 1.0]);
        assert_eq!(rows[0].median, 20);
        assert_eq!(rows[0].runs, 4);
        assert_eq!(rows[1].censored, 1);
    }

    #[test]
    fn sweep_csv_has_one_row_per_alpha() {
        let summary = SweepSummary {
            target: 0.1,
            budget: 10,
            rows: summarize_sweep(&[run_of(0.0, 3, false), run_of(0.5, 4, false)], &[0.0, 0.5]),
            runs: vec![],
        };
        let mut buf = Vec::new();
        write_sweep_csv(&summary, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
    }
}
