//! Neural reward model trained on pairwise preferences with the
//! Bradley-Terry logistic loss.
//!
//! The model is a [`DenseNet`] backbone followed by a linear head. The head
//! bias is folded in as a constant trailing feature equal to one, so every
//! downstream consumer (Laplace posterior, acquisition) sees a single weight
//! vector `w` and a feature map `phi(x)` with `score(x) = w . phi(x)`.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::math::{sigmoid, softplus};
use crate::nn::{Activation, Adam, AdamConfig, DenseNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Synthetic,
    Human,
}

/// One resolved duel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub winner: Vec<f64>,
    pub loser: Vec<f64>,
    pub source: Source,
    pub iteration: u64,
}

impl PreferenceRecord {
    pub fn new(winner: Vec<f64>, loser: Vec<f64>, source: Source, iteration: u64) -> Result<Self> {
        check_dim("preference record", winner.len(), loser.len())?;
        if winner == loser {
            return Err(Error::InvalidConfig("winner and loser are the same point".into()));
        }
        Ok(Self {
            winner,
            loser,
            source,
            iteration,
        })
    }
}

/// Writes records as JSON lines, one per record.
pub fn write_jsonl<W: Write>(records: &[PreferenceRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<PreferenceRecord>> {
    let mut records: Vec<PreferenceRecord> = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PreferenceRecord = serde_json::from_str(&line)?;
        if let Some(prev) = records.last() {
            if rec.iteration < prev.iteration {
                return Err(Error::Parse(format!(
                    "iteration {} follows {}: records must be ordered",
                    rec.iteration, prev.iteration
                )));
            }
        }
        records.push(rec);
    }
    Ok(records)
}

/// A point in the search domain with its backbone features cached once scored.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePoint {
    pub x: Vec<f64>,
    features: Option<Vec<f64>>,
}

impl CandidatePoint {
    pub fn new(x: Vec<f64>) -> Self {
        Self { x, features: None }
    }

    pub fn features(&mut self, model: &RewardModel) -> Result<&[f64]> {
        if self.features.is_none() {
            self.features = Some(model.features(&self.x)?);
        }
        Ok(self.features.as_deref().unwrap())
    }

    pub fn cached_features(&self) -> Option<&[f64]> {
        self.features.as_deref()
    }
}

/// Bradley-Terry loss `-ln sigma(r_w - r_l)` and its two partial derivatives.
pub fn bt_pair_loss(r_winner: f64, r_loser: f64) -> Result<(f64, f64, f64)> {
    if !r_winner.is_finite() || !r_loser.is_finite() {
        return Err(Error::NonFinite(format!("scores ({r_winner}, {r_loser})")));
    }
    let margin = r_winner - r_loser;
    let loss = softplus(-margin);
    let miss = sigmoid(-margin);
    Ok((loss, -miss, miss))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardArch {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub head_bias: bool,
}

impl Default for RewardArch {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 64],
            activation: Activation::Tanh,
            head_bias: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight decay, reused as the Laplace prior precision.
    pub weight_decay: f64,
    /// Full-batch epochs per fit.
    pub epochs: usize,
    pub learning_rate: f64,
    /// Stop early once the objective improves by less than this (relative)
    /// across a 10-epoch window. Zero disables early stopping.
    pub tolerance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weight_decay: 1e-2,
            epochs: 200,
            learning_rate: 1e-2,
            tolerance: 0.0,
        }
    }
}

/// Affine map from the search box onto `[-1, 1]^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaler {
    pub center: Vec<f64>,
    pub half_width: Vec<f64>,
}

impl InputScaler {
    pub fn identity(dim: usize) -> Self {
        Self {
            center: vec![0.0; dim],
            half_width: vec![1.0; dim],
        }
    }

    pub fn from_box(lower: &[f64], upper: &[f64]) -> Self {
        Self {
            center: lower.iter().zip(upper).map(|(l, u)| 0.5 * (l + u)).collect(),
            half_width: lower.iter().zip(upper).map(|(l, u)| 0.5 * (u - l)).collect(),
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.center)
            .zip(&self.half_width)
            .map(|((v, c), h)| (v - c) / h)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    pub backbone: DenseNet,
    /// Head weights; the last entry is the bias when `head_bias` is set.
    pub head: Vec<f64>,
    pub head_bias: bool,
    /// Prior precision (training weight decay).
    pub lambda: f64,
    pub scaler: InputScaler,
}

impl RewardModel {
    pub fn new<R: rand::Rng + ?Sized>(dim: usize, arch: &RewardArch, lambda: f64, scaler: InputScaler, rng: &mut R) -> Result<Self> {
        if lambda <= 0.0 || !lambda.is_finite() {
            return Err(Error::InvalidConfig(format!("prior precision must be positive, got {lambda}")));
        }
        check_dim("input scaler", dim, scaler.center.len())?;
        let mut dims = vec![dim];
        dims.extend_from_slice(&arch.hidden);
        let acts = vec![arch.activation; arch.hidden.len()];
        let backbone = DenseNet::init(&dims, &acts, rng)?;
        let h = backbone.output_dim();
        let bound = 1.0 / (h as f64).sqrt();
        let mut head: Vec<f64> = (0..h).map(|_| rng.random_range(-bound..=bound)).collect();
        if arch.head_bias {
            head.push(rng.random_range(-bound..=bound));
        }
        Ok(Self {
            backbone,
            head,
            head_bias: arch.head_bias,
            lambda,
            scaler,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.backbone.input_dim()
    }

    /// Length of `phi(x)`, constant feature included.
    pub fn feature_dim(&self) -> usize {
        self.head.len()
    }

    /// `phi(x)`: backbone output, with a trailing one when the head has a bias.
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("candidate", self.input_dim(), x.len())?;
        let mut phi = self.backbone.forward(&self.scaler.apply(x))?.output;
        if self.head_bias {
            phi.push(1.0);
        }
        Ok(phi)
    }

    pub fn score_features(&self, phi: &[f64]) -> f64 {
        self.head.iter().zip(phi).map(|(w, f)| w * f).sum()
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        Ok(self.score_features(&self.features(x)?))
    }

    fn n_params(&self) -> usize {
        self.backbone.param_count() + self.head.len()
    }

    fn squared_norm(&self) -> f64 {
        self.backbone.params().iter().chain(&self.head).map(|p| p * p).sum()
    }

    /// Mean Bradley-Terry loss plus `lambda / 2 * ||params||^2`.
    pub fn objective(&self, data: &[PreferenceRecord]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyDataset("objective needs at least one preference"));
        }
        let mut total = 0.0;
        for r in data {
            let (loss, _, _) = bt_pair_loss(self.score(&r.winner)?, self.score(&r.loser)?)?;
            total += loss;
        }
        Ok(total / data.len() as f64 + 0.5 * self.lambda * self.squared_norm())
    }

    /// Scaled inputs as one batch: winners in rows `0..n`, losers in `n..2n`.
    fn stack_inputs(&self, data: &[PreferenceRecord]) -> DMatrix<f64> {
        let n = data.len();
        let mut x = DMatrix::zeros(2 * n, self.input_dim());
        for (i, r) in data.iter().enumerate() {
            for (j, v) in self.scaler.apply(&r.winner).into_iter().enumerate() {
                x[(i, j)] = v;
            }
            for (j, v) in self.scaler.apply(&r.loser).into_iter().enumerate() {
                x[(n + i, j)] = v;
            }
        }
        x
    }

    /// Objective value and its gradient (backbone parameters first, then
    /// head) for inputs stacked by `stack_inputs`.
    fn objective_and_gradient(&self, stacked: &DMatrix<f64>, grad: &mut [f64]) -> Result<f64> {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let n = stacked.nrows() / 2;
        let nb = self.backbone.param_count();
        let h = self.backbone.output_dim();
        let (g_backbone, g_head) = grad.split_at_mut(nb);
        let trace = self.backbone.trace_batch(stacked.clone())?;
        let feats = trace.output();
        let w = DVector::from_column_slice(&self.head[..h]);
        let scores = feats * &w;
        let mut total = 0.0;
        // Per-row derivative of the mean loss with respect to the score.
        let mut coef = DVector::zeros(2 * n);
        for i in 0..n {
            let (loss, dw, dl) = bt_pair_loss(scores[i], scores[n + i])?;
            total += loss;
            coef[i] = dw / n as f64;
            coef[n + i] = dl / n as f64;
        }
        // Bias gradient cancels: dw + dl = 0.
        let gh = feats.tr_mul(&coef);
        g_head[..h].copy_from_slice(gh.as_slice());
        self.backbone.backward_batch(&trace, &coef * w.transpose(), g_backbone)?;
        let lambda = self.lambda;
        for (g, p) in grad.iter_mut().zip(self.backbone.params().iter().chain(&self.head)) {
            *g += lambda * p;
        }
        Ok(total / n as f64 + 0.5 * lambda * self.squared_norm())
    }

    fn flat_params(&self) -> Vec<f64> {
        let mut p = self.backbone.params().to_vec();
        p.extend_from_slice(&self.head);
        p
    }

    fn set_flat_params(&mut self, p: &[f64]) {
        let nb = self.backbone.param_count();
        self.backbone.params_mut().copy_from_slice(&p[..nb]);
        self.head.copy_from_slice(&p[nb..]);
    }

    /// Continues training from the current parameters. Returns the final
    /// objective, which never exceeds the objective at entry.
    pub fn train(&mut self, data: &[PreferenceRecord], cfg: &TrainConfig) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyDataset("reward model training needs at least one preference"));
        }
        for r in data {
            check_dim("preference winner", self.input_dim(), r.winner.len())?;
            check_dim("preference loser", self.input_dim(), r.loser.len())?;
        }
        let n = self.n_params();
        let mut opt = Adam::new(AdamConfig::with_learning_rate(cfg.learning_rate), n);
        let mut grad = vec![0.0; n];
        let mut params = self.flat_params();
        let mut best = (f64::INFINITY, params.clone());
        let mut history: Vec<f64> = Vec::with_capacity(cfg.epochs + 1);
        let stacked = self.stack_inputs(data);
        for _ in 0..cfg.epochs {
            let obj = self.objective_and_gradient(&stacked, &mut grad)?;
            if !obj.is_finite() {
                return Err(Error::NonFinite(format!("training objective {obj}")));
            }
            if obj < best.0 {
                best = (obj, params.clone());
            }
            history.push(obj);
            if cfg.tolerance > 0.0 && history.len() > 10 {
                let old = history[history.len() - 11];
                if old - obj <= cfg.tolerance * old.abs() {
                    break;
                }
            }
            opt.step(&mut params, &grad)?;
            self.set_flat_params(&params);
        }
        let last = self.objective(data)?;
        if last <= best.0 {
            Ok(last)
        } else {
            self.set_flat_params(&best.1);
            Ok(best.0)
        }
    }
}

/// Fits a fresh reward model by MAP training from a seeded initialization.
pub fn fit_reward_map(
    data: &[PreferenceRecord],
    arch: &RewardArch,
    train: &TrainConfig,
    scaler: InputScaler,
    seed: u64,
) -> Result<RewardModel> {
    let first = data
        .first()
        .ok_or(Error::EmptyDataset("reward model training needs at least one preference"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = RewardModel::new(first.winner.len(), arch, train.weight_decay, scaler, &mut rng)?;
    model.train(data, train)?;
    Ok(model)
}
