//! Last-layer Laplace posterior over the reward head.
//!
//! For the Bradley-Terry loss the head Hessian has a closed form: with
//! `delta = phi(winner) - phi(loser)` and `p = sigma(w . delta)`,
//!
//! ```text
//! H = sum_pairs p (1 - p) delta delta^T + lambda I
//! ```
//!
//! which is positive definite for any `lambda > 0`. The posterior keeps the
//! Cholesky factor of `H`; no inverse is ever formed.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::math::{mean, sample_variance, sigmoid};
use crate::reward::{PreferenceRecord, RewardModel};

const CHOLESKY_JITTER: f64 = 1e-8;

/// Adds the curvature of one preference pair, `p (1 - p) delta delta^T`.
pub fn add_pair_curvature(hessian: &mut DMatrix<f64>, head: &[f64], delta: &[f64]) {
    let margin: f64 = head.iter().zip(delta).map(|(w, d)| w * d).sum();
    let p = sigmoid(margin);
    let c = p * (1.0 - p);
    let d = DVector::from_column_slice(delta);
    hessian.ger(c, &d, &d, 1.0);
}

/// Exact Hessian of the summed Bradley-Terry loss plus `lambda / 2 ||w||^2`
/// with respect to the head weights, at the model's current head.
pub fn last_layer_hessian(model: &RewardModel, data: &[PreferenceRecord]) -> Result<DMatrix<f64>> {
    let h = model.feature_dim();
    let mut hess = DMatrix::identity(h, h) * model.lambda;
    for r in data {
        let fw = model.features(&r.winner)?;
        let fl = model.features(&r.loser)?;
        let delta: Vec<f64> = fw.iter().zip(&fl).map(|(a, b)| a - b).collect();
        add_pair_curvature(&mut hess, &model.head, &delta);
    }
    Ok(hess)
}

#[derive(Debug, Clone)]
pub struct LaplacePosterior {
    pub w_map: DVector<f64>,
    pub precision: DMatrix<f64>,
    /// Lower-triangular `L` with `precision = L L^T`.
    pub chol: DMatrix<f64>,
}

/// Builds `N(w_map, H^-1)`. A failed factorization is retried once with
/// `1e-8 I` added before giving up.
pub fn build_posterior(w_map: &[f64], precision: DMatrix<f64>) -> Result<LaplacePosterior> {
    let h = w_map.len();
    if precision.nrows() != h || precision.ncols() != h {
        return Err(Error::DimensionMismatch {
            context: "posterior precision",
            expected: h,
            got: precision.nrows(),
        });
    }
    let scale = precision.amax().max(1.0);
    let asym = (&precision - precision.transpose()).amax();
    if asym > 1e-10 * scale {
        return Err(Error::Factorization(format!("precision is not symmetric (max asymmetry {asym:e})")));
    }
    let chol = match precision.clone().cholesky() {
        Some(c) => c.l(),
        None => {
            let jittered = &precision + DMatrix::identity(h, h) * CHOLESKY_JITTER;
            jittered
                .cholesky()
                .ok_or_else(|| Error::Factorization("precision is not positive definite".into()))?
                .l()
        }
    };
    Ok(LaplacePosterior {
        w_map: DVector::from_column_slice(w_map),
        precision,
        chol,
    })
}

impl LaplacePosterior {
    pub fn dim(&self) -> usize {
        self.w_map.len()
    }

    /// Fits the posterior for a trained model over its full dataset.
    pub fn from_model(model: &RewardModel, data: &[PreferenceRecord]) -> Result<Self> {
        build_posterior(&model.head, last_layer_hessian(model, data)?)
    }

    /// `L^-1 v` by forward substitution.
    pub fn whiten(&self, v: &[f64]) -> Result<DVector<f64>> {
        check_dim("feature vector", self.dim(), v.len())?;
        let b = DVector::from_column_slice(v);
        Ok(self
            .chol
            .solve_lower_triangular(&b)
            .expect("Cholesky factor has a positive diagonal"))
    }

    /// Predictive mean `w_map . phi` and variance `phi^T H^-1 phi`.
    pub fn predictive(&self, phi: &[f64]) -> Result<(f64, f64)> {
        let u = self.whiten(phi)?;
        let m = self.w_map.iter().zip(phi).map(|(w, f)| w * f).sum();
        Ok((m, u.norm_squared()))
    }

    /// Draws `w_map + L^-T z` with `z` standard normal.
    pub fn sample_head<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z = DVector::from_iterator(self.dim(), (0..self.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let v = self
            .chol
            .tr_solve_lower_triangular(&z)
            .expect("Cholesky factor has a positive diagonal");
        (&self.w_map + v).iter().copied().collect()
    }

    /// Monte Carlo mean and unbiased variance of `sigma(w . (phi_a - phi_b))`
    /// under the posterior.
    pub fn win_prob_stats<R: Rng + ?Sized>(&self, phi_a: &[f64], phi_b: &[f64], n_samples: usize, rng: &mut R) -> Result<(f64, f64)> {
        check_dim("feature vector", phi_a.len(), phi_b.len())?;
        if n_samples < 2 {
            return Err(Error::InvalidConfig(format!("need at least two samples, got {n_samples}")));
        }
        let delta: Vec<f64> = phi_a.iter().zip(phi_b).map(|(a, b)| a - b).collect();
        // w . delta = w_map . delta + z . (L^-1 delta) for w = w_map + L^-T z.
        let (m, _) = self.predictive(&delta)?;
        let u = self.whiten(&delta)?;
        let probs: Vec<f64> = (0..n_samples)
            .map(|_| {
                let s: f64 = u.iter().map(|ui| ui * rng.sample::<f64, _>(StandardNormal)).sum();
                sigmoid(m + s)
            })
            .collect();
        Ok((mean(&probs), sample_variance(&probs)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::reward::{InputScaler, RewardArch, Source};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(dim: usize, hidden: usize, seed: u64) -> RewardModel {
        let arch = RewardArch {
            hidden: vec![hidden],
            activation: Activation::Tanh,
            head_bias: false,
        };
        RewardModel::new(dim, &arch, 0.1, InputScaler::identity(dim), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn prior_only_hessian() {
        let m = model(2, 4, 0);
        let h = last_layer_hessian(&m, &[]).unwrap();
        assert_eq!(h, DMatrix::identity(4, 4) * 0.1);
    }

    #[test]
    fn balanced_pair_has_quarter_curvature() {
        let mut m = model(2, 3, 1);
        let rec = PreferenceRecord::new(vec![0.4, -0.2], vec![-0.5, 0.3], Source::Synthetic, 0).unwrap();
        let delta: Vec<f64> = m
            .features(&rec.winner)
            .unwrap()
            .iter()
            .zip(&m.features(&rec.loser).unwrap())
            .map(|(a, b)| a - b)
            .collect();
        // Project the head so that w . delta = 0.
        let dd: f64 = delta.iter().map(|d| d * d).sum();
        let wd: f64 = m.head.iter().zip(&delta).map(|(w, d)| w * d).sum();
        for (w, d) in m.head.iter_mut().zip(&delta) {
            *w -= wd / dd * d;
        }
        let h = last_layer_hessian(&m, &[rec]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = 0.25 * delta[i] * delta[j] + if i == j { 0.1 } else { 0.0 };
                assert!((h[(i, j)] - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn diagonal_precision_gives_expected_marginals() {
        let post = build_posterior(&[0.0, 0.0], DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]))).unwrap();
        let (_, v0) = post.predictive(&[1.0, 0.0]).unwrap();
        let (_, v1) = post.predictive(&[0.0, 1.0]).unwrap();
        assert!((v0.sqrt() - 0.5).abs() < 1e-15 && (v1.sqrt() - 1.0).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws: Vec<Vec<f64>> = (0..20_000).map(|_| post.sample_head(&mut rng)).collect();
        let sd0 = sample_variance(&draws.iter().map(|w| w[0]).collect::<Vec<_>>()).sqrt();
        let sd1 = sample_variance(&draws.iter().map(|w| w[1]).collect::<Vec<_>>()).sqrt();
        assert!((sd0 - 0.5).abs() < 0.02 && (sd1 - 1.0).abs() < 0.03, "{sd0} {sd1}");
    }

    #[test]
    fn isotropic_predictive_variance() {
        let post = build_posterior(&[1.0, 2.0, 3.0], DMatrix::identity(3, 3) * 0.5).unwrap();
        let phi = [1.0, -2.0, 0.5];
        let (m, v) = post.predictive(&phi).unwrap();
        assert!((m - (1.0 - 4.0 + 1.5)).abs() < 1e-15);
        assert!((v - 5.25 / 0.5).abs() < 1e-12);
        assert_eq!(post.predictive(&[0.0; 3]).unwrap(), (0.0, 0.0));
        assert!(post.predictive(&[1.0]).is_err());
    }

    #[test]
    fn asymmetric_or_indefinite_precision_rejected() {
        let mut a = DMatrix::identity(2, 2);
        a[(0, 1)] = 0.5;
        assert!(build_posterior(&[0.0, 0.0], a).is_err());
        let neg = DMatrix::identity(2, 2) * -1.0;
        assert!(matches!(build_posterior(&[0.0, 0.0], neg), Err(Error::Factorization(_))));
    }

    #[test]
    fn singular_precision_recovers_with_jitter() {
        let mut a = DMatrix::zeros(2, 2);
        a[(0, 0)] = 1.0;
        let post = build_posterior(&[0.0, 0.0], a).unwrap();
        assert!(post.chol[(1, 1)] > 0.0);
    }

    #[test]
    fn samples_are_reproducible_and_shrink_with_precision() {
        let w = [0.3, -0.7];
        let post = build_posterior(&w, DMatrix::identity(2, 2)).unwrap();
        let a = post.sample_head(&mut ChaCha8Rng::seed_from_u64(9));
        let b = post.sample_head(&mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        let dist = |lambda: f64| {
            let p = build_posterior(&w, DMatrix::identity(2, 2) * lambda).unwrap();
            let s = p.sample_head(&mut ChaCha8Rng::seed_from_u64(4));
            ((s[0] - w[0]).powi(2) + (s[1] - w[1]).powi(2)).sqrt()
        };
        let (d1, d100) = (dist(1.0), dist(100.0));
        assert!((d1 / d100 - 10.0).abs() < 1e-9);
    }

    #[test]
    fn win_prob_identical_candidates() {
        let post = build_posterior(&[0.3, -0.7], DMatrix::identity(2, 2)).unwrap();
        let phi = [0.5, 0.5];
        let (p, v) = post.win_prob_stats(&phi, &phi, 64, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p, 0.5);
        assert_eq!(v, 0.0);
        assert!(post.win_prob_stats(&phi, &phi, 1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn win_prob_point_mass() {
        let w = [0.3, -0.7];
        let post = build_posterior(&w, DMatrix::identity(2, 2) * 1e24).unwrap();
        let (p, v) = post
            .win_prob_stats(&[1.0, 0.0], &[0.0, 1.0], 128, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        assert!((p - sigmoid(1.0)).abs() < 1e-10);
        assert!(v < 1e-20);
    }

    #[test]
    fn win_prob_is_antisymmetric_with_shared_stream() {
        let post = build_posterior(&[0.3, -0.7, 0.1], DMatrix::identity(3, 3) * 0.7).unwrap();
        let (a, b) = ([0.2, 0.9, -0.4], [-0.3, 0.1, 0.8]);
        let (pab, vab) = post.win_prob_stats(&a, &b, 300, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let (pba, vba) = post.win_prob_stats(&b, &a, 300, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!((pab + pba - 1.0).abs() < 1e-12);
        assert!((vab - vba).abs() < 1e-12);
    }
}
