//! Diagonal-Gaussian candidate generator trained with score-function
//! (REINFORCE) policy gradients.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::math::mean;
use crate::nn::{Adam, AdamConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub learning_rate: f64,
    pub entropy_weight: f64,
    /// Floor on every log standard deviation.
    pub min_log_std: f64,
    /// Initial standard deviation as a fraction of the box half-width.
    pub init_std_fraction: f64,
    /// Fraction of each candidate pool drawn uniformly from the box.
    pub explore_fraction: f64,
    pub baseline_decay: f64,
    /// Policy updates per oracle query, each on a fresh batch scored by the
    /// reward model.
    pub updates_per_query: usize,
    pub batch_size: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            entropy_weight: 1e-3,
            min_log_std: 1e-3f64.ln(),
            init_std_fraction: 0.5,
            explore_fraction: 0.1,
            baseline_decay: 0.9,
            updates_per_query: 10,
            batch_size: 32,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.explore_fraction) {
            return Err(Error::InvalidConfig(
                "policy learning rate must be positive and explore fraction in [0, 1)".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) || self.batch_size < 2 {
            return Err(Error::InvalidConfig(
                "baseline decay must lie in [0, 1) and batch size be >= 2".into(),
            ));
        }
        if !(self.init_std_fraction > 0.0) || !self.min_log_std.is_finite() {
            return Err(Error::InvalidConfig("policy spread settings must be positive and finite".into()));
        }
        Ok(())
    }
}

/// A candidate and whether it came from the Gaussian (as opposed to the
/// uniform exploration mixture).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySample {
    pub x: Vec<f64>,
    pub on_policy: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Running reward baseline; unset until the first update.
    pub baseline: Option<f64>,
    pub entropy_weight: f64,
    pub min_log_std: f64,
    baseline_decay: f64,
    optimizer: Adam,
}

impl GaussianPolicy {
    /// Centered in the box with a spread set by `cfg.init_std_fraction`.
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, cfg: &PolicyConfig) -> Result<Self> {
        check_dim("policy box", lower.len(), upper.len())?;
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u)) {
            return Err(Error::InvalidConfig("degenerate policy box".into()));
        }
        cfg.validate()?;
        let d = lower.len();
        let mean = lower.iter().zip(&upper).map(|(l, u)| 0.5 * (l + u)).collect();
        let log_std = lower
            .iter()
            .zip(&upper)
            .map(|(l, u)| (0.5 * (u - l) * cfg.init_std_fraction).ln().max(cfg.min_log_std))
            .collect();
        Ok(Self {
            mean,
            log_std,
            lower,
            upper,
            baseline: None,
            entropy_weight: cfg.entropy_weight,
            min_log_std: cfg.min_log_std,
            baseline_decay: cfg.baseline_decay,
            optimizer: Adam::new(AdamConfig::with_learning_rate(cfg.learning_rate), 2 * d),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn clamp(&self, x: &mut [f64]) {
        for ((v, l), u) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*l, *u);
        }
    }

    /// Draws `m` candidates: `round(explore_fraction * m)` uniform over the box
    /// (placed last), the rest from the clamped Gaussian.
    pub fn sample_candidates<R: Rng + ?Sized>(&self, m: usize, explore_fraction: f64, rng: &mut R) -> Result<Vec<PolicySample>> {
        if m < 2 {
            return Err(Error::InvalidConfig(format!("candidate pool must hold at least 2 points, got {m}")));
        }
        let n_uniform = ((explore_fraction * m as f64).round() as usize).min(m);
        let mut out = Vec::with_capacity(m);
        for _ in 0..m - n_uniform {
            let mut x: Vec<f64> = self
                .mean
                .iter()
                .zip(&self.log_std)
                .map(|(mu, ls)| mu + ls.exp() * rng.sample::<f64, _>(StandardNormal))
                .collect();
            self.clamp(&mut x);
            out.push(PolicySample { x, on_policy: true });
        }
        for _ in 0..n_uniform {
            let x = self.lower.iter().zip(&self.upper).map(|(l, u)| rng.random_range(*l..*u)).collect();
            out.push(PolicySample { x, on_policy: false });
        }
        Ok(out)
    }

    /// One REINFORCE ascent step on the on-policy samples, with an entropy
    /// bonus and an exponentially averaged baseline.
    pub fn reinforce_update(&mut self, samples: &[PolicySample], rewards: &[f64]) -> Result<()> {
        check_dim("policy rewards", samples.len(), rewards.len())?;
        if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
            return Err(Error::NonFinite(format!("policy reward {r}")));
        }
        let used: Vec<(&PolicySample, f64)> = samples.iter().zip(rewards.iter().copied()).filter(|(s, _)| s.on_policy).collect();
        if used.is_empty() {
            return Ok(());
        }
        let batch_mean = mean(&used.iter().map(|(_, r)| *r).collect::<Vec<_>>());
        let baseline = *self.baseline.get_or_insert(batch_mean);

        let d = self.dim();
        let k = used.len() as f64;
        // Descent gradient of the negated objective: means first, then log-stds.
        let mut grad = vec![0.0; 2 * d];
        for (s, r) in &used {
            check_dim("policy sample", d, s.x.len())?;
            let adv = r - baseline;
            for j in 0..d {
                let var = (2.0 * self.log_std[j]).exp();
                let diff = s.x[j] - self.mean[j];
                grad[j] -= adv * diff / var / k;
                grad[d + j] -= adv * (diff * diff / var - 1.0) / k;
            }
        }
        for g in &mut grad[d..] {
            *g -= self.entropy_weight;
        }
        let mut params: Vec<f64> = self.mean.iter().chain(&self.log_std).copied().collect();
        self.optimizer.step(&mut params, &grad)?;
        self.mean.copy_from_slice(&params[..d]);
        self.log_std.copy_from_slice(&params[d..]);
        let mut mu = std::mem::take(&mut self.mean);
        self.clamp(&mut mu);
        self.mean = mu;
        let max_log_std: Vec<f64> = self.lower.iter().zip(&self.upper).map(|(l, u)| (u - l).ln()).collect();
        for (ls, cap) in self.log_std.iter_mut().zip(max_log_std) {
            *ls = ls.clamp(self.min_log_std, cap.max(self.min_log_std));
        }
        self.baseline = Some(self.baseline_decay * baseline + (1.0 - self.baseline_decay) * batch_mean);
        Ok(())
    }
}
