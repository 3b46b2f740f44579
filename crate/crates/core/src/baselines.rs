//! Comparison methods: rejection ABC and kernel density estimation with
//! importance weighting.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};

use crate::embeddings::{JointSample, Space, WeightedSample};
use crate::error::{KbrError, Result};
use crate::points::{sq_dist, PointSet};
use crate::rng::{substream, Rng};

/// Distance between observations used for acceptance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Distance {
    #[default]
    Euclidean,
}

impl Distance {
    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Distance::Euclidean => sq_dist(a, b).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbcConfig {
    pub tolerance: f64,
    pub distance: Distance,
    pub max_draws: usize,
    pub seed: u64,
}

impl AbcConfig {
    pub fn new(tolerance: f64, max_draws: usize, seed: u64) -> Result<Self> {
        if !(tolerance > 0.0) {
            return Err(KbrError::input(format!("tolerance must be positive, got {tolerance}")));
        }
        if max_draws == 0 {
            return Err(KbrError::input("max_draws must be at least 1"));
        }
        Ok(Self {
            tolerance,
            distance: Distance::Euclidean,
            max_draws,
            seed,
        })
    }
}

#[derive(Debug, Clone)]
pub struct AbcResult {
    /// Accepted prior draws in proposal order.
    pub accepted: Vec<Vec<f64>>,
    /// `D(y_obs, Y_t)` of each accepted draw.
    pub distances: Vec<f64>,
    pub acceptance_rate: f64,
    /// Likelihood-sampler calls made.
    pub draws: usize,
    pub elapsed: Duration,
}

impl AbcResult {
    pub fn is_empty(&self) -> bool {
        self.accepted.is_empty()
    }

    /// The result the same proposal stream gives under a smaller tolerance.
    pub fn restrict(&self, tolerance: f64) -> AbcResult {
        let (accepted, distances): (Vec<Vec<f64>>, Vec<f64>) = self
            .accepted
            .iter()
            .zip(&self.distances)
            .filter(|(_, d)| **d < tolerance)
            .map(|(a, d)| (a.clone(), *d))
            .unzip();
        AbcResult {
            acceptance_rate: accepted.len() as f64 / self.draws as f64,
            accepted,
            distances,
            draws: self.draws,
            elapsed: self.elapsed,
        }
    }

    /// Mean of the accepted points, `None` when nothing was accepted.
    pub fn mean(&self) -> Option<Vec<f64>> {
        let first = self.accepted.first()?;
        let mut m = vec![0.0; first.len()];
        for p in &self.accepted {
            for (a, b) in m.iter_mut().zip(p) {
                *a += b;
            }
        }
        let n = self.accepted.len() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        Some(m)
    }
}

/// Rejection ABC: propose `x` from the prior, simulate `y ~ P(Y | x)`, keep
/// `x` when `D(y_obs, y) < tau`, for exactly `max_draws` proposals. Both
/// samplers draw from the one seeded stream, so a fixed seed reproduces the
/// proposals exactly and larger tolerances accept supersets. An empty
/// acceptance set is a normal result with rate 0.
pub fn abc_rejection<P, L>(
    mut prior_sampler: P,
    mut likelihood_sampler: L,
    y_obs: &[f64],
    cfg: &AbcConfig,
) -> Result<AbcResult>
where
    P: FnMut(&mut Rng) -> Vec<f64>,
    L: FnMut(&[f64], &mut Rng) -> Vec<f64>,
{
    if !(cfg.tolerance > 0.0) || cfg.max_draws == 0 {
        return Err(KbrError::input("invalid ABC configuration"));
    }
    let start = Instant::now();
    let mut rng = substream(cfg.seed, "abc");
    let mut accepted = Vec::new();
    let mut distances = Vec::new();
    for _ in 0..cfg.max_draws {
        let x = prior_sampler(&mut rng);
        let y = likelihood_sampler(&x, &mut rng);
        if y.len() != y_obs.len() {
            return Err(KbrError::input("simulated observation has the wrong dimension"));
        }
        let dist = cfg.distance.eval(y_obs, &y);
        if dist < cfg.tolerance {
            accepted.push(x);
            distances.push(dist);
        }
    }
    Ok(AbcResult {
        acceptance_rate: accepted.len() as f64 / cfg.max_draws as f64,
        accepted,
        distances,
        draws: cfg.max_draws,
        elapsed: start.elapsed(),
    })
}

/// Bandwidths of the Gaussian density kernels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdeConfig {
    pub h_x: f64,
    pub h_y: f64,
}

impl KdeConfig {
    pub fn new(h_x: f64, h_y: f64) -> Result<Self> {
        if !(h_x > 0.0 && h_y > 0.0 && h_x.is_finite() && h_y.is_finite()) {
            return Err(KbrError::input("KDE bandwidths must be positive and finite"));
        }
        Ok(Self { h_x, h_y })
    }

    pub fn equal(h: f64) -> Result<Self> {
        Self::new(h, h)
    }
}

fn gauss(sq: f64, h: f64) -> f64 {
    (-sq / (2.0 * h * h)).exp()
}

/// KDE conditional density `p(y | U_i)` evaluated at the prior points, with
/// the `U`-dependent parts precomputed for many `y`.
///
/// Density normalizers cancel in the importance weights and are dropped.
#[derive(Debug, Clone)]
pub struct KdeIw {
    prior: PointSet,
    y: PointSet,
    /// `K_hX(U_i - X_j) / sum_j K_hX(U_i - X_j)`, zero rows where the
    /// denominator underflows.
    cross: DMatrix<f64>,
    cfg: KdeConfig,
}

impl KdeIw {
    pub fn new(joint: &JointSample, prior_points: &PointSet, cfg: KdeConfig) -> Result<Self> {
        if prior_points.is_empty() {
            return Err(KbrError::input("no prior points"));
        }
        if prior_points.dim() != joint.x.dim() {
            return Err(KbrError::input("prior points and X sample differ in dimension"));
        }
        KdeConfig::new(cfg.h_x, cfg.h_y)?;
        let (l, n) = (prior_points.len(), joint.len());
        let mut cross = DMatrix::from_fn(l, n, |i, j| {
            gauss(sq_dist(prior_points.point(i), joint.x.point(j)), cfg.h_x)
        });
        let mut any = false;
        for mut row in cross.row_iter_mut() {
            let den: f64 = row.sum();
            if den > 0.0 {
                row /= den;
                any = true;
            }
        }
        if !any {
            return Err(KbrError::Degenerate(
                "KDE density of X vanishes at every prior point".into(),
            ));
        }
        Ok(Self {
            prior: prior_points.clone(),
            y: joint.y.clone(),
            cross,
            cfg,
        })
    }

    /// Normalized importance weights `zeta` over the prior points.
    pub fn weights(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.y.dim() {
            return Err(KbrError::input("conditioning point has the wrong dimension"));
        }
        let ky = DVector::from_iterator(
            self.y.len(),
            self.y.iter().map(|yj| gauss(sq_dist(yj, y), self.cfg.h_y)),
        );
        let lik = &self.cross * ky;
        let total: f64 = lik.sum();
        if !(total > 0.0) {
            return Err(KbrError::Degenerate(
                "KDE likelihood vanishes at every prior point".into(),
            ));
        }
        Ok(lik.iter().map(|v| v / total).collect())
    }

    pub fn posterior(&self, y: &[f64]) -> Result<WeightedSample> {
        WeightedSample::new(self.prior.clone(), self.weights(y)?, Space::X)
    }

    /// Posterior mean `sum_i zeta_i U_i`.
    pub fn posterior_mean(&self, y: &[f64]) -> Result<Vec<f64>> {
        Ok(self.prior.weighted_sum(&self.weights(y)?))
    }
}

/// Importance-weighted posterior over `prior_points` given `y`.
pub fn kde_iw_posterior(
    joint: &JointSample,
    prior_points: &PointSet,
    cfg: KdeConfig,
    y: &[f64],
) -> Result<WeightedSample> {
    KdeIw::new(joint, prior_points, cfg)?.posterior(y)
}

/// Leave-one-out log likelihood of the joint sample under the product
/// Gaussian KDE with `h_X = h_Y = h`.
pub fn kde_loo_score(joint: &JointSample, h: f64) -> Result<f64> {
    let n = joint.len();
    if n < 2 {
        return Err(KbrError::input("leave-one-out needs two points"));
    }
    if !(h > 0.0) {
        return Err(KbrError::input("bandwidth must be positive"));
    }
    let dim = (joint.x.dim() + joint.y.dim()) as f64;
    let log_norm = -0.5 * dim * (2.0 * std::f64::consts::PI * h * h).ln() - ((n - 1) as f64).ln();
    let mut total = 0.0;
    let mut logs = Vec::with_capacity(n - 1);
    for i in 0..n {
        logs.clear();
        for j in (0..n).filter(|&j| j != i) {
            let sq = sq_dist(joint.x.point(i), joint.x.point(j)) + sq_dist(joint.y.point(i), joint.y.point(j));
            logs.push(-sq / (2.0 * h * h));
        }
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = logs.iter().map(|l| (l - m).exp()).sum();
        total += log_norm + m + s.ln();
    }
    Ok(total)
}

/// Bandwidth from `grid` maximizing [`kde_loo_score`]; ties go to the
/// earlier entry.
pub fn kde_loo_bandwidth(joint: &JointSample, grid: &[f64]) -> Result<f64> {
    let mut best: Option<(f64, f64)> = None;
    for &h in grid {
        let s = kde_loo_score(joint, h)?;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((h, s));
        }
    }
    best.map(|(h, _)| h).ok_or_else(|| KbrError::input("bandwidth grid is empty"))
}

/// `{2, 4, ..., 20}`.
pub fn default_kde_grid() -> Vec<f64> {
    (1..=10).map(|i| 2.0 * i as f64).collect()
}
