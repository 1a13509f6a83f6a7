//! Benchmark objectives and the preference oracles that answer duels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::SQRT_2;

use crate::acquisition::DuelQuery;
use crate::error::{check_dim, Error, Result};
use crate::math::normal_cdf;
use crate::reward::Source;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    Rosenbrock,
    Sphere,
}

/// A minimization benchmark over the box `[lower, upper]^dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub name: ProblemKind,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<f64>,
}

impl ProblemSpec {
    pub fn rosenbrock(dim: usize) -> Self {
        Self {
            name: ProblemKind::Rosenbrock,
            dim,
            lower: None,
            upper: None,
        }
    }

    pub fn sphere(dim: usize) -> Self {
        Self {
            name: ProblemKind::Sphere,
            dim,
            lower: None,
            upper: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let min_dim = match self.name {
            ProblemKind::Rosenbrock => 2,
            ProblemKind::Sphere => 1,
        };
        if self.dim < min_dim {
            return Err(Error::InvalidConfig(format!(
                "{:?} needs dimension >= {min_dim}, got {}",
                self.name, self.dim
            )));
        }
        let (lo, hi) = self.bounds();
        if !(lo < hi) {
            return Err(Error::InvalidConfig(format!("degenerate domain box [{lo}, {hi}]")));
        }
        if let Some(opt) = self.optimum_location() {
            if opt.iter().any(|&v| v < lo || v > hi) {
                return Err(Error::InvalidConfig("declared optimum lies outside the domain box".into()));
            }
        }
        Ok(())
    }

    /// Per-dimension bounds, identical for every coordinate.
    pub fn bounds(&self) -> (f64, f64) {
        let (lo, hi) = match self.name {
            ProblemKind::Rosenbrock => (-2.048, 2.048),
            ProblemKind::Sphere => (-5.12, 5.12),
        };
        (self.lower.unwrap_or(lo), self.upper.unwrap_or(hi))
    }

    pub fn lower_bounds(&self) -> Vec<f64> {
        vec![self.bounds().0; self.dim]
    }

    pub fn upper_bounds(&self) -> Vec<f64> {
        vec![self.bounds().1; self.dim]
    }

    pub fn diagonal(&self) -> f64 {
        let (lo, hi) = self.bounds();
        (hi - lo) * (self.dim as f64).sqrt()
    }

    pub fn objective(&self, x: &[f64]) -> Result<f64> {
        check_dim("problem point", self.dim, x.len())?;
        match self.name {
            ProblemKind::Rosenbrock => rosenbrock(x),
            ProblemKind::Sphere => Ok(x.iter().map(|v| v * v).sum()),
        }
    }

    pub fn optimum_location(&self) -> Option<Vec<f64>> {
        match self.name {
            ProblemKind::Rosenbrock => Some(vec![1.0; self.dim]),
            ProblemKind::Sphere => Some(vec![0.0; self.dim]),
        }
    }

    pub fn optimum_value(&self) -> Option<f64> {
        Some(0.0)
    }

    pub fn uniform_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let (lo, hi) = self.bounds();
        (0..self.dim).map(|_| rng.random_range(lo..hi)).collect()
    }
}

/// `sum_i 100 (x_{i+1} - x_i^2)^2 + (1 - x_i)^2`.
pub fn rosenbrock(x: &[f64]) -> Result<f64> {
    if x.len() < 2 {
        return Err(Error::InvalidConfig(format!("rosenbrock needs d >= 2, got {}", x.len())));
    }
    Ok(x.windows(2)
        .map(|w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (1.0 - w[0]).powi(2))
        .sum())
}

/// Utility is the negated objective: larger is better.
pub fn latent_utility(problem: &ProblemSpec, x: &[f64]) -> Result<f64> {
    Ok(-problem.objective(x)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preference {
    First,
    Second,
}

impl Preference {
    pub fn flipped(self) -> Self {
        match self {
            Preference::First => Preference::Second,
            Preference::Second => Preference::First,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleMode {
    Deterministic,
    Probit,
    Human,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub mode: OracleMode,
    /// Probit noise scale `sigma_n`.
    pub noise: f64,
    /// Oracle randomness; derived from the run seed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// How long a human oracle waits for an answer before timing out.
    pub human_timeout_secs: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            mode: OracleMode::Deterministic,
            noise: 0.1,
            seed: None,
            human_timeout_secs: 300.0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode == OracleMode::Probit && !(self.noise > 0.0) {
            return Err(Error::InvalidConfig(format!("probit noise must be positive, got {}", self.noise)));
        }
        if !(self.human_timeout_secs > 0.0) {
            return Err(Error::InvalidConfig("human timeout must be positive".into()));
        }
        Ok(())
    }
}

/// Probability that the first candidate wins under the probit model.
pub fn probit_first_prob(u1: f64, u2: f64, noise: f64) -> f64 {
    normal_cdf((u1 - u2) / (SQRT_2 * noise))
}

/// Answers one duel between utilities `u1` (first) and `u2` (second).
pub fn answer_duel<R: Rng + ?Sized>(cfg: &OracleConfig, u1: f64, u2: f64, rng: &mut R) -> Result<Preference> {
    if !u1.is_finite() || !u2.is_finite() {
        return Err(Error::NonFinite(format!("utilities ({u1}, {u2})")));
    }
    match cfg.mode {
        OracleMode::Deterministic => Ok(if u1 >= u2 { Preference::First } else { Preference::Second }),
        OracleMode::Probit => {
            let p = probit_first_prob(u1, u2, cfg.noise);
            Ok(if rng.random::<f64>() < p {
                Preference::First
            } else {
                Preference::Second
            })
        }
        OracleMode::Human => Err(Error::OracleUnavailable("no duel service is connected".into())),
    }
}

/// Anything that can resolve a duel.
pub trait PreferenceOracle {
    fn answer(&mut self, duel: &DuelQuery) -> Result<Preference>;

    fn source(&self) -> Source;
}

/// Oracle backed by a benchmark's latent utility.
pub struct SyntheticOracle {
    problem: ProblemSpec,
    cfg: OracleConfig,
    rng: ChaCha8Rng,
}

impl SyntheticOracle {
    pub fn new(problem: ProblemSpec, cfg: OracleConfig, seed: u64) -> Self {
        let seed = cfg.seed.unwrap_or(seed);
        Self {
            problem,
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl PreferenceOracle for SyntheticOracle {
    fn answer(&mut self, duel: &DuelQuery) -> Result<Preference> {
        let u1 = latent_utility(&self.problem, &duel.first)?;
        let u2 = latent_utility(&self.problem, &duel.second)?;
        answer_duel(&self.cfg, u1, u2, &mut self.rng)
    }

    fn source(&self) -> Source {
        Source::Synthetic
    }
}
