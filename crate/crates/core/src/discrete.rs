//! Active versus random pair selection on a discrete candidate set with a
//! linear ground-truth utility.
//!
//! Candidates are standard-normal vectors. The reward model keeps a frozen
//! identity backbone, so its trainable part is the linear head that the
//! Laplace posterior covers. Accuracy is measured on random pairs drawn from
//! a separate held-out candidate bank.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::acquisition::{select_duel, AcqConfig, AcqMode};
use crate::error::{Error, Result};
use crate::laplace::LaplacePosterior;
use crate::math::{lower_median, normal_cdf};
use crate::nn::Activation;
use crate::reward::{InputScaler, PreferenceRecord, RewardArch, RewardModel, Source, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    Active,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscreteConfig {
    pub dim: usize,
    pub train_candidates: usize,
    pub test_candidates: usize,
    pub test_pairs: usize,
    /// Random pairs labeled before selection starts.
    pub initial_pairs: usize,
    pub max_pairs: usize,
    pub target_accuracy: f64,
    /// Probit noise on the oracle; zero gives deterministic answers.
    pub noise: f64,
    pub acquisition: AcqConfig,
    pub reward: RewardArch,
    pub train: TrainConfig,
}

impl Default for DiscreteConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            train_candidates: 1000,
            test_candidates: 500,
            test_pairs: 2000,
            initial_pairs: 2,
            max_pairs: 1000,
            target_accuracy: 0.75,
            noise: 1.0,
            acquisition: AcqConfig {
                alpha: 0.5,
                pool_size: 128,
                mode: AcqMode::Mixed,
                ..AcqConfig::default()
            },
            reward: RewardArch {
                hidden: vec![],
                activation: Activation::Identity,
                head_bias: true,
            },
            train: TrainConfig::default(),
        }
    }
}

impl DiscreteConfig {
    pub fn validate(&self) -> Result<()> {
        self.acquisition.validate()?;
        if self.dim == 0 || self.test_pairs == 0 || self.initial_pairs == 0 || self.max_pairs < self.initial_pairs {
            return Err(Error::InvalidConfig(
                "discrete task sizes must be positive and max_pairs >= initial_pairs".into(),
            ));
        }
        if self.train_candidates < self.acquisition.pool_size || self.test_candidates < 2 {
            return Err(Error::InvalidConfig("candidate banks are smaller than the pool".into()));
        }
        if !(self.noise >= 0.0) || !(0.5..1.0).contains(&self.target_accuracy) {
            return Err(Error::InvalidConfig("noise must be >= 0 and target accuracy in [0.5, 1)".into()));
        }
        Ok(())
    }
}

/// A sampled task instance: utility direction, candidate banks, and held-out
/// evaluation pairs.
#[derive(Debug, Clone)]
pub struct DiscreteTask {
    pub theta: Vec<f64>,
    pub train: Vec<Vec<f64>>,
    pub test: Vec<Vec<f64>>,
    pub test_pairs: Vec<(usize, usize)>,
}

fn gaussian_vec<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

impl DiscreteTask {
    pub fn sample<R: Rng + ?Sized>(cfg: &DiscreteConfig, rng: &mut R) -> Self {
        let mut theta = gaussian_vec(cfg.dim, rng);
        let norm = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
        theta.iter_mut().for_each(|v| *v /= norm);
        let train = (0..cfg.train_candidates).map(|_| gaussian_vec(cfg.dim, rng)).collect();
        let test = (0..cfg.test_candidates).map(|_| gaussian_vec(cfg.dim, rng)).collect();
        let test_pairs = (0..cfg.test_pairs)
            .map(|_| {
                let v = sample(rng, cfg.test_candidates, 2);
                (v.index(0), v.index(1))
            })
            .collect();
        Self {
            theta,
            train,
            test,
            test_pairs,
        }
    }

    pub fn utility(&self, x: &[f64]) -> f64 {
        self.theta.iter().zip(x).map(|(a, b)| a * b).sum()
    }

    /// Fraction of held-out pairs the model orders like the true utility.
    pub fn accuracy(&self, model: &RewardModel) -> Result<f64> {
        let scores = self.test.iter().map(|x| model.score(x)).collect::<Result<Vec<_>>>()?;
        let agree = self
            .test_pairs
            .iter()
            .filter(|&&(a, b)| {
                let truth = self.utility(&self.test[a]) - self.utility(&self.test[b]);
                (scores[a] - scores[b]) * truth > 0.0
            })
            .count();
        Ok(agree as f64 / self.test_pairs.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteRun {
    pub selection: Selection,
    pub seed: u64,
    /// Held-out accuracy after each labeled pair, starting at `initial_pairs`.
    pub accuracies: Vec<f64>,
    /// Pairs labeled when accuracy first reached the target.
    pub pairs_to_target: Option<usize>,
}

/// Labels pairs one at a time until the target accuracy or `max_pairs`.
/// The task instance depends only on `seed`, so both selection rules see the
/// same candidates and evaluation pairs.
pub fn run_discrete(cfg: &DiscreteConfig, selection: Selection, seed: u64) -> Result<DiscreteRun> {
    cfg.validate()?;
    let task = DiscreteTask::sample(cfg, &mut ChaCha8Rng::seed_from_u64(seed));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_5e1ec7);
    let mut oracle_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0_7ac1e);
    let mut model = RewardModel::new(
        cfg.dim,
        &cfg.reward,
        cfg.train.weight_decay,
        InputScaler::identity(cfg.dim),
        &mut rng,
    )?;
    let mut data: Vec<PreferenceRecord> = Vec::new();
    let mut accuracies = Vec::new();
    let mut posterior: Option<LaplacePosterior> = None;

    while data.len() < cfg.max_pairs {
        let (a, b) = match (&posterior, selection) {
            (Some(post), Selection::Active) if data.len() >= cfg.initial_pairs => {
                let idx = sample(&mut rng, cfg.train_candidates, cfg.acquisition.pool_size);
                let pool: Vec<Vec<f64>> = idx.iter().map(|i| task.train[i].clone()).collect();
                let duel = select_duel(post, &model, &pool, &cfg.acquisition, &mut rng)?;
                (duel.first, duel.second)
            }
            _ => {
                let v = sample(&mut rng, cfg.train_candidates, 2);
                (task.train[v.index(0)].clone(), task.train[v.index(1)].clone())
            }
        };
        let gap = task.utility(&a) - task.utility(&b);
        let first_wins = if cfg.noise > 0.0 {
            oracle_rng.random::<f64>() < normal_cdf(gap / (std::f64::consts::SQRT_2 * cfg.noise))
        } else {
            gap > 0.0
        };
        let (w, l) = if first_wins { (a, b) } else { (b, a) };
        data.push(PreferenceRecord::new(w, l, Source::Synthetic, data.len() as u64 + 1)?);
        model.train(&data, &cfg.train)?;
        posterior = Some(LaplacePosterior::from_model(&model, &data)?);
        if data.len() >= cfg.initial_pairs {
            let acc = task.accuracy(&model)?;
            accuracies.push(acc);
            if acc >= cfg.target_accuracy {
                return Ok(DiscreteRun {
                    selection,
                    seed,
                    accuracies,
                    pairs_to_target: Some(data.len()),
                });
            }
        }
    }
    Ok(DiscreteRun {
        selection,
        seed,
        accuracies,
        pairs_to_target: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionComparison {
    pub active: Vec<DiscreteRun>,
    pub random: Vec<DiscreteRun>,
    /// Lower medians of pairs-to-target; runs that never reach the target
    /// count as `max_pairs + 1`.
    pub median_active: usize,
    pub median_random: usize,
}

impl SelectionComparison {
    pub fn ratio(&self) -> f64 {
        self.median_active as f64 / self.median_random as f64
    }
}

pub fn compare_selection(cfg: &DiscreteConfig, seeds: &[u64]) -> Result<SelectionComparison> {
    use rayon::prelude::*;
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("comparison needs at least one seed".into()));
    }
    let runs = |sel| seeds.par_iter().map(|&s| run_discrete(cfg, sel, s)).collect::<Result<Vec<_>>>();
    let active = runs(Selection::Active)?;
    let random = runs(Selection::Random)?;
    let med = |rs: &[DiscreteRun]| {
        let v: Vec<f64> = rs.iter().map(|r| r.pairs_to_target.unwrap_or(cfg.max_pairs + 1) as f64).collect();
        lower_median(&v) as usize
    };
    Ok(SelectionComparison {
        median_active: med(&active),
        median_random: med(&random),
        active,
        random,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DiscreteConfig {
        DiscreteConfig {
            dim: 4,
            train_candidates: 200,
            test_candidates: 100,
            test_pairs: 300,
            max_pairs: 60,
            noise: 0.0,
            acquisition: AcqConfig {
                pool_size: 16,
                mc_samples: 64,
                ..DiscreteConfig::default().acquisition
            },
            train: TrainConfig {
                epochs: 100,
                learning_rate: 0.05,
                ..TrainConfig::default()
            },
            ..DiscreteConfig::default()
        }
    }

    #[test]
    fn true_direction_scores_perfectly() {
        let cfg = small();
        let task = DiscreteTask::sample(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let mut model = RewardModel::new(4, &cfg.reward, 0.01, InputScaler::identity(4), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        model.head[..4].copy_from_slice(&task.theta);
        assert_eq!(task.accuracy(&model).unwrap(), 1.0);
        model.head[..4].iter_mut().for_each(|v| *v = -*v);
        assert_eq!(task.accuracy(&model).unwrap(), 0.0);
    }

    #[test]
    fn both_selections_learn_a_linear_utility() {
        let cfg = small();
        for sel in [Selection::Active, Selection::Random] {
            let r = run_discrete(&cfg, sel, 3).unwrap();
            assert!(
                r.pairs_to_target.is_some(),
                "{sel:?} never reached target: {:?}",
                r.accuracies.last()
            );
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = small();
        assert_eq!(
            run_discrete(&cfg, Selection::Active, 5).unwrap(),
            run_discrete(&cfg, Selection::Active, 5).unwrap()
        );
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = small();
        cfg.target_accuracy = 1.0;
        assert!(run_discrete(&cfg, Selection::Random, 0).is_err());
    }
}
