//! Preferential Gaussian-process baseline.
//!
//! A latent utility `f ~ GP(0, k)` with a Matérn-5/2 kernel is observed only
//! through duels, `P(w > l) = Phi((f_w - f_l) / (sqrt 2 sigma_n))`. The
//! posterior mode is found by Newton iterations and the curvature there gives
//! a Laplace posterior.
//!
//! The likelihood curvature is `W = D D^T` where `D` has one column per pair,
//! `sqrt(c_p) (e_w - e_l)`. `W` is singular in general, so every solve goes
//! through the pair-space matrix `B = I + D^T K D` instead of `W^-1`:
//!
//! ```text
//! (K^-1 + W)^-1 = K - K D B^-1 D^T K
//! (K + W^-1)^-1 = D B^-1 D^T
//! ```

use std::f64::consts::SQRT_2;
use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::acquisition::{select_from_pool, AcqConfig, DuelQuery, PoolPosterior};
use crate::error::{check_dim, Error, Result};
use crate::math::{inverse_mills, log_normal_cdf, normal_cdf};
use crate::oracle::{latent_utility, Preference, PreferenceOracle, ProblemSpec};

const MAX_NEWTON_ITERS: usize = 100;
const NEWTON_TOL: f64 = 1e-8;
const JITTER_START: f64 = 1e-8;
const JITTER_MAX: f64 = 1e-4;

/// `s2 (1 + sqrt5 r / l + 5 r^2 / (3 l^2)) exp(-sqrt5 r / l)` with `r = |x - y|`.
pub fn matern52(x: &[f64], y: &[f64], length_scale: f64, signal_var: f64) -> f64 {
    let r2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    let s = 5f64.sqrt() * r2.sqrt() / length_scale;
    signal_var * (1.0 + s + s * s / 3.0) * (-s).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub length_scale: f64,
    pub signal_var: f64,
    /// Preference noise `sigma_n`.
    pub noise: f64,
}

impl GpHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.length_scale > 0.0 && self.signal_var > 0.0 && self.noise > 0.0) {
            return Err(Error::InvalidConfig(format!("GP hyperparameters must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn kernel(&self, x: &[f64], y: &[f64]) -> f64 {
        matern52(x, y, self.length_scale, self.signal_var)
    }
}

pub fn kernel_matrix(points: &[Vec<f64>], hyper: &GpHyper) -> DMatrix<f64> {
    let n = points.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = hyper.signal_var;
        for j in 0..i {
            let v = hyper.kernel(&points[i], &points[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Laplace state of the preferential GP at its posterior mode.
#[derive(Debug, Clone)]
pub struct GpFit {
    pub points: Vec<Vec<f64>>,
    /// `(winner, loser)` indices into `points`.
    pub pairs: Vec<(usize, usize)>,
    pub hyper: GpHyper,
    pub f_map: DVector<f64>,
    /// `K^-1 f_map`, equal to the log-likelihood gradient at the mode.
    pub alpha: DVector<f64>,
    /// Kernel matrix with `jitter` on the diagonal.
    pub kernel: DMatrix<f64>,
    /// Per-pair curvature `c_p`, so that `W = sum_p c_p (e_w - e_l)(e_w - e_l)^T`.
    pub pair_curvature: Vec<f64>,
    b_chol: Option<Cholesky<f64, Dyn>>,
    pub jitter: f64,
    pub iterations: usize,
    /// `max |grad log-lik - K^-1 f|` at return.
    pub residual: f64,
}

struct PairTerms {
    log_lik: f64,
    grad: DVector<f64>,
    curvature: Vec<f64>,
}

fn pair_terms(f: &DVector<f64>, pairs: &[(usize, usize)], noise: f64) -> PairTerms {
    let scale = SQRT_2 * noise;
    let mut grad = DVector::zeros(f.len());
    let mut curvature = Vec::with_capacity(pairs.len());
    let mut log_lik = 0.0;
    for &(w, l) in pairs {
        let z = (f[w] - f[l]) / scale;
        log_lik += log_normal_cdf(z);
        let r = inverse_mills(z);
        grad[w] += r / scale;
        grad[l] -= r / scale;
        curvature.push((r * (z + r)).max(0.0) / (scale * scale));
    }
    PairTerms { log_lik, grad, curvature }
}

/// `D^T v` for the pair matrix with columns `sqrt(c_p) (e_w - e_l)`.
fn pair_project(v: &DVector<f64>, pairs: &[(usize, usize)], sqrt_c: &[f64]) -> DVector<f64> {
    DVector::from_iterator(pairs.len(), pairs.iter().zip(sqrt_c).map(|(&(w, l), s)| s * (v[w] - v[l])))
}

/// `D u` back in point space.
fn pair_expand(u: &DVector<f64>, pairs: &[(usize, usize)], sqrt_c: &[f64], n: usize) -> DVector<f64> {
    let mut out = DVector::zeros(n);
    for ((&(w, l), s), ui) in pairs.iter().zip(sqrt_c).zip(u.iter()) {
        out[w] += s * ui;
        out[l] -= s * ui;
    }
    out
}

/// `B = I + D^T K D`, factored.
fn pair_system(kernel: &DMatrix<f64>, pairs: &[(usize, usize)], sqrt_c: &[f64]) -> Option<Cholesky<f64, Dyn>> {
    let p = pairs.len();
    let n = kernel.nrows();
    // K D, column by column.
    let mut kd = DMatrix::zeros(n, p);
    for (q, (&(w, l), s)) in pairs.iter().zip(sqrt_c).enumerate() {
        let mut col = kd.column_mut(q);
        col += kernel.column(w) * *s;
        col -= kernel.column(l) * *s;
    }
    let mut b = DMatrix::identity(p, p);
    for q in 0..p {
        for (r, (&(w, l), s)) in pairs.iter().zip(sqrt_c).enumerate().take(q + 1) {
            let v = s * (kd[(w, q)] - kd[(l, q)]);
            b[(r, q)] += v;
            if r != q {
                b[(q, r)] += v;
            }
        }
    }
    b.cholesky()
}

fn objective(kernel: &DMatrix<f64>, a: &DVector<f64>, pairs: &[(usize, usize)], noise: f64) -> (f64, DVector<f64>) {
    let f = kernel * a;
    let terms = pair_terms(&f, pairs, noise);
    (terms.log_lik - 0.5 * a.dot(&f), f)
}

fn newton(
    kernel: &DMatrix<f64>,
    pairs: &[(usize, usize)],
    noise: f64,
    warm_start: Option<&DVector<f64>>,
) -> Result<(DVector<f64>, DVector<f64>, PairTerms, Option<Cholesky<f64, Dyn>>, usize)> {
    let n = kernel.nrows();
    let mut a = DVector::zeros(n);
    if let Some(f0) = warm_start {
        // Start from the previous mode projected through K.
        if let Some(chol) = kernel.clone().cholesky() {
            a = chol.solve(f0);
        }
    }
    let (mut psi, mut f) = objective(kernel, &a, pairs, noise);
    let mut iterations = 0;
    loop {
        let terms = pair_terms(&f, pairs, noise);
        let sqrt_c: Vec<f64> = terms.curvature.iter().map(|c| c.sqrt()).collect();
        let b_chol =
            pair_system(kernel, pairs, &sqrt_c).ok_or_else(|| Error::Factorization("pair-space system is not positive definite".into()))?;
        if iterations >= MAX_NEWTON_ITERS {
            return Ok((f, a, terms, Some(b_chol), iterations));
        }
        // b = W f + g;  a_new = b - D B^-1 D^T K b
        let wf = pair_expand(&pair_project(&f, pairs, &sqrt_c), pairs, &sqrt_c, n);
        let b = wf + &terms.grad;
        let kb = kernel * &b;
        let u = b_chol.solve(&pair_project(&kb, pairs, &sqrt_c));
        let a_new = &b - pair_expand(&u, pairs, &sqrt_c, n);

        let step = &a_new - &a;
        let mut t = 1.0;
        let (mut cand_psi, mut cand_f) = objective(kernel, &a_new, pairs, noise);
        while cand_psi < psi && t > 1e-6 {
            t *= 0.5;
            let trial = &a + &step * t;
            (cand_psi, cand_f) = objective(kernel, &trial, pairs, noise);
        }
        let moved = (&cand_f - &f).amax();
        a += &step * t;
        f = cand_f;
        psi = cand_psi;
        iterations += 1;
        if moved < NEWTON_TOL {
            let terms = pair_terms(&f, pairs, noise);
            let sqrt_c: Vec<f64> = terms.curvature.iter().map(|c| c.sqrt()).collect();
            let b_chol = pair_system(kernel, pairs, &sqrt_c)
                .ok_or_else(|| Error::Factorization("pair-space system is not positive definite".into()))?;
            return Ok((f, a, terms, Some(b_chol), iterations));
        }
    }
}

/// Fits the Laplace posterior given a precomputed jitter-free kernel matrix.
/// `warm_start` seeds Newton with latent values for every point.
pub fn gp_laplace_fit_with_kernel(
    points: Vec<Vec<f64>>,
    pairs: Vec<(usize, usize)>,
    hyper: GpHyper,
    kernel: &DMatrix<f64>,
    warm_start: Option<&DVector<f64>>,
) -> Result<GpFit> {
    hyper.validate()?;
    let n = points.len();
    check_dim("kernel matrix", n, kernel.nrows())?;
    if let Some(&(w, l)) = pairs.iter().find(|&&(w, l)| w >= n || l >= n || w == l) {
        return Err(Error::InvalidConfig(format!(
            "pair ({w}, {l}) does not reference two distinct points of {n}"
        )));
    }
    let mut jitter = JITTER_START;
    loop {
        let k = kernel + DMatrix::identity(n, n) * jitter;
        match newton(&k, &pairs, hyper.noise, warm_start) {
            Ok((f_map, alpha, terms, b_chol, iterations)) => {
                let residual = (&terms.grad - &alpha).amax();
                return Ok(GpFit {
                    points,
                    pairs,
                    hyper,
                    f_map,
                    alpha,
                    kernel: k,
                    pair_curvature: terms.curvature,
                    b_chol,
                    jitter,
                    iterations,
                    residual,
                });
            }
            Err(Error::Factorization(msg)) => {
                jitter *= 10.0;
                if jitter > JITTER_MAX * 1.000_001 {
                    return Err(Error::Factorization(format!("{msg} (jitter escalated to {JITTER_MAX:e})")));
                }
            }
            Err(e) => return Err(e),
        }
    }
}

/// Laplace fit of the preferential GP at fixed hyperparameters.
pub fn gp_laplace_fit(points: &[Vec<f64>], pairs: &[(usize, usize)], hyper: GpHyper) -> Result<GpFit> {
    if let Some(first) = points.first() {
        for p in points {
            check_dim("GP point", first.len(), p.len())?;
        }
    }
    let k = kernel_matrix(points, &hyper);
    gp_laplace_fit_with_kernel(points.to_vec(), pairs.to_vec(), hyper, &k, None)
}

impl GpFit {
    fn sqrt_curvature(&self) -> Vec<f64> {
        self.pair_curvature.iter().map(|c| c.sqrt()).collect()
    }

    /// Dense likelihood curvature `W`.
    pub fn curvature_matrix(&self) -> DMatrix<f64> {
        let n = self.points.len();
        let mut w = DMatrix::zeros(n, n);
        for (&(a, b), c) in self.pairs.iter().zip(&self.pair_curvature) {
            w[(a, a)] += c;
            w[(b, b)] += c;
            w[(a, b)] -= c;
            w[(b, a)] -= c;
        }
        w
    }

    fn cross_kernel(&self, xs: &[Vec<f64>]) -> DMatrix<f64> {
        DMatrix::from_fn(self.points.len(), xs.len(), |i, j| self.hyper.kernel(&self.points[i], &xs[j]))
    }

    /// `L_B^-1 D^T k_*` for each column of `k_star`.
    fn whitened(&self, k_star: &DMatrix<f64>) -> DMatrix<f64> {
        let p = self.pairs.len();
        let Some(chol) = &self.b_chol else {
            return DMatrix::zeros(0, k_star.ncols());
        };
        let sqrt_c = self.sqrt_curvature();
        let mut proj = DMatrix::zeros(p, k_star.ncols());
        for j in 0..k_star.ncols() {
            for (q, (&(w, l), s)) in self.pairs.iter().zip(&sqrt_c).enumerate() {
                proj[(q, j)] = s * (k_star[(w, j)] - k_star[(l, j)]);
            }
        }
        chol.l()
            .solve_lower_triangular(&proj)
            .expect("Cholesky factor has a positive diagonal")
    }

    /// Laplace predictive mean and variance of the latent utility at `x`.
    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        if let Some(p) = self.points.first() {
            check_dim("GP query point", p.len(), x.len())?;
        }
        let ks = self.cross_kernel(&[x.to_vec()]);
        let mean = ks.column(0).dot(&self.alpha);
        let v = self.whitened(&ks);
        let var = self.hyper.signal_var - v.column(0).norm_squared();
        Ok((mean, var.max(0.0)))
    }

    /// Joint Laplace posterior over a pool of points.
    pub fn pool_posterior(&self, xs: &[Vec<f64>]) -> Result<GpPool> {
        if let Some(p) = self.points.first() {
            for x in xs {
                check_dim("GP query point", p.len(), x.len())?;
            }
        }
        let ks = self.cross_kernel(xs);
        let mean: Vec<f64> = (0..xs.len()).map(|j| ks.column(j).dot(&self.alpha)).collect();
        let v = self.whitened(&ks);
        let prior = kernel_matrix(xs, &self.hyper);
        let cov = prior - v.transpose() * v;
        let variances = (0..xs.len()).map(|i| cov[(i, i)].max(0.0)).collect();
        let m = xs.len();
        let mut jitter = JITTER_START * self.hyper.signal_var;
        let chol = loop {
            if let Some(c) = (&cov + DMatrix::identity(m, m) * jitter).cholesky() {
                break c.l();
            }
            jitter *= 10.0;
            if jitter > JITTER_MAX * self.hyper.signal_var * 1.000_001 {
                return Err(Error::Factorization("pool covariance is not positive definite".into()));
            }
        };
        Ok(GpPool {
            mean,
            variances,
            chol,
            noise: self.hyper.noise,
        })
    }
}

/// Joint GP posterior on a candidate pool, for dueling Thompson selection.
#[derive(Debug, Clone)]
pub struct GpPool {
    mean: Vec<f64>,
    variances: Vec<f64>,
    chol: DMatrix<f64>,
    noise: f64,
}

impl PoolPosterior for GpPool {
    fn len(&self) -> usize {
        self.mean.len()
    }

    fn mean(&self, i: usize) -> f64 {
        self.mean[i]
    }

    fn variance(&self, i: usize) -> f64 {
        self.variances[i]
    }

    fn sample_utilities<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let m = self.mean.len();
        let z = DVector::from_iterator(m, (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let lz = &self.chol * z;
        self.mean.iter().zip(lz.iter()).map(|(a, b)| a + b).collect()
    }

    fn win_prob(&self, gap: f64) -> f64 {
        normal_cdf(gap / (SQRT_2 * self.noise))
    }
}

/// Outcome of one [`pbo_iterate`] call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PboStep {
    Queried,
    BudgetExhausted,
    MemoryExhausted,
}

/// Running state of a preferential BO loop.
#[derive(Debug, Clone)]
pub struct PboState {
    pub problem: ProblemSpec,
    pub hyper: GpHyper,
    pub acq: AcqConfig,
    pub fit: GpFit,
    pub budget_remaining: usize,
    pub queries: usize,
    pub best_utility: f64,
    pub best_point: Option<Vec<f64>>,
    /// Abort once the kernel matrix would exceed this many bytes.
    pub memory_limit_bytes: Option<usize>,
    pub last_refit_ms: f64,
    pub last_duel: Option<DuelQuery>,
    kernel: DMatrix<f64>,
}

impl PboState {
    pub fn new(problem: ProblemSpec, hyper: GpHyper, acq: AcqConfig, budget: usize, memory_limit_bytes: Option<usize>) -> Result<Self> {
        problem.validate()?;
        acq.validate()?;
        let kernel = DMatrix::zeros(0, 0);
        let fit = gp_laplace_fit_with_kernel(Vec::new(), Vec::new(), hyper, &kernel, None)?;
        Ok(Self {
            problem,
            hyper,
            acq,
            fit,
            budget_remaining: budget,
            queries: 0,
            best_utility: f64::NEG_INFINITY,
            best_point: None,
            memory_limit_bytes,
            last_refit_ms: 0.0,
            last_duel: None,
            kernel,
        })
    }

    pub fn kernel_bytes(points: usize) -> usize {
        points.saturating_mul(points).saturating_mul(std::mem::size_of::<f64>())
    }

    fn extend_kernel(&mut self, new_points: &[Vec<f64>]) {
        let old = self.kernel.nrows();
        let n = old + new_points.len();
        let mut k = self.kernel.clone().resize(n, n, 0.0);
        for (off, x) in new_points.iter().enumerate() {
            let i = old + off;
            k[(i, i)] = self.hyper.signal_var;
            for j in 0..i {
                let other = if j < old { &self.fit.points[j] } else { &new_points[j - old] };
                let v = self.hyper.kernel(x, other);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        self.kernel = k;
    }
}

/// Draws a uniform pool and selects a duel by dueling Thompson sampling on
/// the GP posterior. An inner `Err` carries the step that stops the loop
/// (budget or memory guard).
pub fn pbo_propose<R: Rng + ?Sized>(state: &PboState, rng: &mut R) -> Result<std::result::Result<DuelQuery, PboStep>> {
    if state.budget_remaining == 0 {
        return Ok(Err(PboStep::BudgetExhausted));
    }
    let n_after = state.fit.points.len() + 2;
    if let Some(limit) = state.memory_limit_bytes {
        if PboState::kernel_bytes(n_after) > limit {
            return Ok(Err(PboStep::MemoryExhausted));
        }
    }
    let pool: Vec<Vec<f64>> = (0..state.acq.pool_size).map(|_| state.problem.uniform_point(rng)).collect();
    let posterior = state.fit.pool_posterior(&pool)?;
    let mut duel = select_from_pool(&posterior, &pool, &state.acq, rng)?;
    duel.id = state.queries as u64 + 1;
    Ok(Ok(duel))
}

/// Adds an answered duel to the data and refits the GP.
pub fn pbo_update(state: &mut PboState, duel: DuelQuery, answer: Preference) -> Result<()> {
    for x in [&duel.first, &duel.second] {
        let u = latent_utility(&state.problem, x)?;
        if u > state.best_utility {
            state.best_utility = u;
            state.best_point = Some(x.clone());
        }
    }

    let started = Instant::now();
    let base = state.fit.points.len();
    let new_points = vec![duel.first.clone(), duel.second.clone()];
    state.extend_kernel(&new_points);
    let mut points = state.fit.points.clone();
    points.extend(new_points);
    let mut pairs = state.fit.pairs.clone();
    pairs.push(match answer {
        Preference::First => (base, base + 1),
        Preference::Second => (base + 1, base),
    });
    let mut warm = state.fit.f_map.clone().resize_vertically(points.len(), 0.0);
    if !duel.means.is_empty() {
        warm[base] = duel.means[duel.best];
        warm[base + 1] = duel.means[duel.rival];
    }
    state.fit = gp_laplace_fit_with_kernel(points, pairs, state.hyper, &state.kernel, Some(&warm))?;
    state.last_refit_ms = started.elapsed().as_secs_f64() * 1e3;

    state.budget_remaining -= 1;
    state.queries += 1;
    state.last_duel = Some(duel);
    Ok(())
}

/// One PBO round: propose a duel, ask the oracle, and refit.
pub fn pbo_iterate<R: Rng + ?Sized>(state: &mut PboState, oracle: &mut dyn PreferenceOracle, rng: &mut R) -> Result<PboStep> {
    let duel = match pbo_propose(state, rng)? {
        Ok(d) => d,
        Err(step) => return Ok(step),
    };
    let answer = oracle.answer(&duel)?;
    pbo_update(state, duel, answer)?;
    Ok(PboStep::Queried)
}
