//! Kernel Bayes' rule: posterior operator, posterior expectations and
//! preimage point estimates.
//!
//! Given a joint sample `(X_i, Y_i)` and prior weights `mu` on the `X_i`
//! (from [`kbr_prior_weights`]), the posterior embedding at `y` is carried by
//! the weights `rho = R k_Y(y)` with
//!
//! ```text
//! R = L G_Y ((L G_Y)^2 + delta I)^{-1} L,   L = diag(mu).
//! ```
//!
//! `R` is kept as a dense matrix up to [`DENSE_LIMIT`] points. Beyond that, or
//! when low-rank factors `G_Y ~ Gamma Gamma^T` are supplied, only the action
//! `y -> R k_Y(y)` is stored, as `(L Gamma) (M^2 + delta I)^{-1} (L Gamma)^T`
//! with `M = Gamma^T L Gamma`; this is the Woodbury form of the same operator
//! and needs only `r x r` factorizations.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::embeddings::{kbr_prior_weights, JointSample, Space, WeightedSample, DENSE_LIMIT};
use crate::error::{KbrError, Result};
use crate::exec::Exec;
use crate::kernels::{gram_symmetric, Kernel};
use crate::linalg::{condition_estimate, incomplete_cholesky_gram, LowRankFactor, RegularizationSchedule, JITTER};
use crate::points::{sq_dist, PointSet};

#[derive(Debug, Clone)]
enum Form {
    Dense(DMatrix<f64>),
    LowRank {
        /// `diag(mu) * Gamma`, n x r.
        lambda_gamma: DMatrix<f64>,
        /// Cholesky of `M^2 + delta I`.
        inner: Cholesky<f64, Dyn>,
    },
}

/// The posterior operator `R_{X|Y}` with its anchor points. Immutable once
/// built; queries are pure.
#[derive(Debug, Clone)]
pub struct PosteriorOperator {
    form: Form,
    x: PointSet,
    y: PointSet,
    ky: Kernel,
    delta: f64,
    prior_weights: DVector<f64>,
}

/// Optional incomplete Cholesky factors of `G_X` and `G_Y`.
#[derive(Debug, Clone, Copy)]
pub struct LowRankPair<'a> {
    pub gx: &'a LowRankFactor,
    pub gy: &'a LowRankFactor,
}

/// Runs the full algorithm: prior weights from the kernel sum rule, then the
/// posterior operator.
pub fn build_posterior_operator(
    joint: &JointSample,
    prior: &WeightedSample,
    kx: &Kernel,
    ky: &Kernel,
    schedule: RegularizationSchedule,
    lowrank: Option<LowRankPair<'_>>,
) -> Result<PosteriorOperator> {
    let n = joint.len();
    let auto;
    let pair = match lowrank {
        Some(p) => Some(p),
        None if n > DENSE_LIMIT => {
            auto = (
                incomplete_cholesky_gram(kx, &joint.x, None, None)?,
                incomplete_cholesky_gram(ky, &joint.y, None, None)?,
            );
            Some(LowRankPair {
                gx: &auto.0,
                gy: &auto.1,
            })
        }
        None => None,
    };
    let mu = kbr_prior_weights(joint, prior, kx, schedule.eps(), pair.map(|p| p.gx))?;
    PosteriorOperator::from_prior_weights(joint, mu, ky, schedule.delta(), pair.map(|p| p.gy))
}

impl PosteriorOperator {
    /// Builds `R` from given prior weights `mu` (the last step of the
    /// algorithm). The filter update is exactly this call.
    pub fn from_prior_weights(
        joint: &JointSample,
        mu: DVector<f64>,
        ky: &Kernel,
        delta: f64,
        gy: Option<&LowRankFactor>,
    ) -> Result<Self> {
        let n = joint.len();
        if mu.len() != n {
            return Err(KbrError::input(format!(
                "{} prior weights for a sample of {n}",
                mu.len()
            )));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(KbrError::input(format!("delta must be positive, got {delta}")));
        }
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(KbrError::numeric("prior weights are not finite", delta, f64::INFINITY));
        }
        ky.check_dim(joint.y.dim())?;
        let auto;
        let gy = match gy {
            Some(f) => Some(f),
            None if n > DENSE_LIMIT => {
                auto = incomplete_cholesky_gram(ky, &joint.y, None, None)?;
                Some(&auto)
            }
            None => None,
        };
        let form = match gy {
            Some(f) => {
                if f.n() != n {
                    return Err(KbrError::input("low-rank factor size does not match sample"));
                }
                low_rank_form(&mu, &f.gamma, delta)?
            }
            None => {
                let g = gram_symmetric(ky, &joint.y)?;
                Form::Dense(dense_r(&mu, &g, delta)?)
            }
        };
        Ok(Self {
            form,
            x: joint.x.clone(),
            y: joint.y.clone(),
            ky: ky.clone(),
            delta,
            prior_weights: mu,
        })
    }

    /// Variant taking a precomputed `G_Y` (dense path only).
    pub fn from_prior_weights_with_gram(
        joint: &JointSample,
        mu: DVector<f64>,
        ky: &Kernel,
        gy: &DMatrix<f64>,
        delta: f64,
    ) -> Result<Self> {
        let n = joint.len();
        if mu.len() != n || gy.nrows() != n || gy.ncols() != n {
            return Err(KbrError::input("prior weights or gram matrix do not match the sample"));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(KbrError::input(format!("delta must be positive, got {delta}")));
        }
        Ok(Self {
            form: Form::Dense(dense_r(&mu, gy, delta)?),
            x: joint.x.clone(),
            y: joint.y.clone(),
            ky: ky.clone(),
            delta,
            prior_weights: mu,
        })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn x_points(&self) -> &PointSet {
        &self.x
    }

    pub fn y_points(&self) -> &PointSet {
        &self.y
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// The kernel sum rule weights `mu` the operator was built from.
    pub fn prior_weights(&self) -> &DVector<f64> {
        &self.prior_weights
    }

    /// Dense `R`, when materialized.
    pub fn matrix(&self) -> Option<&DMatrix<f64>> {
        match &self.form {
            Form::Dense(r) => Some(r),
            Form::LowRank { .. } => None,
        }
    }

    pub fn is_low_rank(&self) -> bool {
        matches!(self.form, Form::LowRank { .. })
    }

    /// `R k` for an arbitrary vector `k`.
    pub fn apply(&self, k: &DVector<f64>) -> Result<DVector<f64>> {
        if k.len() != self.len() {
            return Err(KbrError::input(format!(
                "vector of length {} for an operator of size {}",
                k.len(),
                self.len()
            )));
        }
        Ok(match &self.form {
            Form::Dense(r) => r * k,
            Form::LowRank {
                lambda_gamma,
                inner,
            } => {
                let t = inner.solve(&lambda_gamma.tr_mul(k));
                lambda_gamma * t
            }
        })
    }

    /// `rho = R k_Y(y)`, unnormalized.
    pub fn weight_vector(&self, y: &[f64]) -> Result<DVector<f64>> {
        let k = self.ky.column(&self.y, y)?;
        self.apply(&k)
    }

    pub fn posterior_weights(&self, y: &[f64]) -> Result<WeightedSample> {
        let rho = self.weight_vector(y)?;
        WeightedSample::new(self.x.clone(), rho.as_slice().to_vec(), Space::X)
    }

    /// Weights divided by their sum, for ratio statistics.
    pub fn posterior_weights_normalized(&self, y: &[f64]) -> Result<WeightedSample> {
        let mut ws = self.posterior_weights(y)?;
        let mass = ws.total_mass();
        if mass.abs() < 1e-12 {
            return Err(KbrError::Degenerate("posterior weights sum to zero".into()));
        }
        ws.weights.iter_mut().for_each(|w| *w /= mass);
        Ok(ws)
    }

    /// Posterior weight vectors for many conditioning values.
    pub fn weight_vectors(&self, ys: &PointSet, exec: Exec) -> Result<Vec<DVector<f64>>> {
        exec.map(ys.len(), |i| self.weight_vector(ys.point(i)))
            .into_iter()
            .collect()
    }

    /// `f_X^T R k_Y(y)`, evaluated as `(R^T f)^T k_Y(y)`.
    pub fn posterior_expectation(&self, f_values: &[f64], y: &[f64]) -> Result<f64> {
        if f_values.len() != self.len() {
            return Err(KbrError::input(format!(
                "{} function values for an operator of size {}",
                f_values.len(),
                self.len()
            )));
        }
        let f = DVector::from_column_slice(f_values);
        let k = self.ky.column(&self.y, y)?;
        Ok(match &self.form {
            Form::Dense(r) => r.tr_mul(&f).dot(&k),
            Form::LowRank {
                lambda_gamma,
                inner,
            } => {
                let left = inner.solve(&lambda_gamma.tr_mul(&f));
                left.dot(&lambda_gamma.tr_mul(&k))
            }
        })
    }
}

fn dense_r(mu: &DVector<f64>, gy: &DMatrix<f64>, delta: f64) -> Result<DMatrix<f64>> {
    let n = mu.len();
    // A = diag(mu) G_Y
    let mut a = gy.clone();
    for (i, m) in mu.iter().enumerate() {
        a.row_mut(i).scale_mut(*m);
    }
    let mut sys = &a * &a;
    for i in 0..n {
        sys[(i, i)] += delta;
    }
    let rhs = DMatrix::from_diagonal(mu);
    let lu = sys.clone().lu();
    let sol = lu.solve(&rhs).ok_or_else(|| {
        KbrError::numeric(
            "(L G_Y)^2 + delta I is singular",
            delta,
            condition_estimate(&sys),
        )
    })?;
    let r = a * sol;
    if r.iter().any(|v| !v.is_finite()) {
        return Err(KbrError::numeric(
            "posterior operator has non-finite entries",
            delta,
            condition_estimate(&sys),
        ));
    }
    Ok(r)
}

fn low_rank_form(mu: &DVector<f64>, gamma: &DMatrix<f64>, delta: f64) -> Result<Form> {
    let mut lambda_gamma = gamma.clone();
    for (i, m) in mu.iter().enumerate() {
        lambda_gamma.row_mut(i).scale_mut(*m);
    }
    let m = gamma.tr_mul(&lambda_gamma);
    let r = m.nrows();
    let mut inner = &m * &m;
    for i in 0..r {
        inner[(i, i)] += delta;
    }
    let chol = Cholesky::new(inner.clone()).or_else(|| {
        let mut j = inner.clone();
        for i in 0..r {
            j[(i, i)] += JITTER;
        }
        Cholesky::new(j)
    });
    match chol {
        Some(inner) => Ok(Form::LowRank {
            lambda_gamma,
            inner,
        }),
        None => Err(KbrError::numeric(
            "M^2 + delta I is not positive definite",
            delta,
            condition_estimate(&inner),
        )),
    }
}

/// Result of the preimage fixed-point iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Preimage {
    pub point: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, Default)]
pub struct PreimageOptions {
    /// Start point; defaults to the sample point with the largest weight.
    pub x0: Option<Vec<f64>>,
    /// Step-size tolerance; defaults to `1e-8 * sigma`.
    pub tol: Option<f64>,
    /// Defaults to 200.
    pub max_iter: Option<usize>,
}

/// Index of the largest weight, lowest index on ties.
pub fn argmax_weight(weights: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &w) in weights.iter().enumerate() {
        match best {
            Some(b) if weights[b] >= w => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Point whose feature map best matches the weighted embedding, found by the
/// Gaussian-kernel fixed-point iteration
/// `x <- sum_i rho_i k(X_i, x) X_i / sum_i rho_i k(X_i, x)`.
pub fn preimage(ws: &WeightedSample, kx: &Kernel, opts: &PreimageOptions) -> Result<Preimage> {
    let sigma = kx
        .bandwidth()
        .ok_or_else(|| KbrError::input("preimage iteration needs a Gaussian kernel"))?;
    let dim = ws.points.dim();
    let mut x = match &opts.x0 {
        Some(x0) => {
            if x0.len() != dim {
                return Err(KbrError::input("start point has the wrong dimension"));
            }
            if x0.iter().any(|v| !v.is_finite()) {
                return Err(KbrError::input("start point must be finite"));
            }
            x0.clone()
        }
        None => {
            let i = argmax_weight(&ws.weights).ok_or_else(|| KbrError::input("empty sample"))?;
            ws.points.point(i).to_vec()
        }
    };
    let tol = opts.tol.unwrap_or(1e-8 * sigma);
    let max_iter = opts.max_iter.unwrap_or(200);
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut next = vec![0.0; dim];
    for it in 1..=max_iter {
        next.iter_mut().for_each(|v| *v = 0.0);
        let mut den = 0.0;
        for (p, &w) in ws.points.iter().zip(&ws.weights) {
            let c = w * (-sq_dist(p, &x) * inv).exp();
            den += c;
            for (n, &pv) in next.iter_mut().zip(p) {
                *n += c * pv;
            }
        }
        if den.abs() < 1e-12 {
            return Err(KbrError::Degenerate(format!(
                "preimage denominator {den:e} at iteration {it}: posterior mass near the iterate vanishes"
            )));
        }
        next.iter_mut().for_each(|v| *v /= den);
        let step = sq_dist(&next, &x).sqrt();
        std::mem::swap(&mut x, &mut next);
        if step <= tol {
            return Ok(Preimage {
                point: x,
                converged: true,
                iterations: it,
            });
        }
    }
    Ok(Preimage {
        point: x,
        converged: false,
        iterations: max_iter,
    })
}

/// `|k(., x) - sum_i rho_i k(., X_i)|^2` up to the constant `rho^T G rho`.
pub fn preimage_objective(ws: &WeightedSample, kx: &Kernel, x: &[f64]) -> Result<f64> {
    Ok(kx.evaluate(x, x)? - 2.0 * ws.evaluate(kx, x)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::empirical_mean_embedding;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gauss(s: f64) -> Kernel {
        Kernel::gaussian(s).unwrap()
    }

    fn random_joint(n: usize, seed: u64) -> JointSample {
        let mut rng = crate::rng::seeded(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| 0.8 * v + 0.5 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        JointSample::new(
            PointSet::from_scalars(&x).unwrap(),
            PointSet::from_scalars(&y).unwrap(),
        )
        .unwrap()
    }

    /// Literal `L G ((L G)^2 + delta I)^{-1} L` with an explicit inverse.
    fn literal_r(mu: &DVector<f64>, g: &DMatrix<f64>, delta: f64) -> DMatrix<f64> {
        let l = DMatrix::from_diagonal(mu);
        let lg = &l * g;
        let inv = (&lg * &lg + DMatrix::identity(mu.len(), mu.len()) * delta)
            .try_inverse()
            .unwrap();
        lg * inv * l
    }

    #[test]
    fn scalar_case() {
        let j = JointSample::new(
            PointSet::from_scalars(&[0.0]).unwrap(),
            PointSet::from_scalars(&[1.0]).unwrap(),
        )
        .unwrap();
        let mu = 0.8;
        let delta = 1e-3;
        let op = PosteriorOperator::from_prior_weights(&j, DVector::from_element(1, mu), &gauss(1.0), delta, None)
            .unwrap();
        let r = op.matrix().unwrap()[(0, 0)];
        // R = mu g (mu^2 g^2 + delta)^{-1} mu with g = 1
        assert_abs_diff_eq!(r, mu * mu / (mu * mu + delta), epsilon = 1e-14);
        let tiny = PosteriorOperator::from_prior_weights(&j, DVector::from_element(1, mu), &gauss(1.0), 1e-14, None)
            .unwrap();
        assert_abs_diff_eq!(tiny.weight_vector(&[1.0]).unwrap()[0], 1.0, epsilon = 1e-10);
    }

    #[test]
    fn dense_matches_literal_formula() {
        for &n in &[2usize, 5, 10] {
            let j = random_joint(n, n as u64);
            let ky = gauss(0.7);
            let mu = DVector::from_fn(n, |i, _| 0.5 + (i as f64).sin());
            let op = PosteriorOperator::from_prior_weights(&j, mu.clone(), &ky, 0.05, None).unwrap();
            let g = gram_symmetric(&ky, &j.y).unwrap();
            let oracle = literal_r(&mu, &g, 0.05);
            assert!((op.matrix().unwrap() - oracle).amax() <= 1e-10);
        }
    }

    #[test]
    fn dense_r_is_symmetric() {
        let j = random_joint(12, 3);
        let mu = DVector::from_fn(12, |i, _| if i % 3 == 0 { -0.4 } else { 1.1 });
        let op = PosteriorOperator::from_prior_weights(&j, mu, &gauss(1.0), 0.01, None).unwrap();
        let r = op.matrix().unwrap();
        assert!((r - r.transpose()).amax() <= 1e-8 * r.amax());
    }

    #[test]
    fn scale_invariance() {
        let j = random_joint(15, 4);
        let ky = gauss(0.9);
        let mu = DVector::from_fn(15, |i, _| 0.3 + 0.1 * i as f64 - 0.05 * (i * i) as f64 / 5.0);
        let base = PosteriorOperator::from_prior_weights(&j, mu.clone(), &ky, 0.02, None).unwrap();
        for &c in &[0.1, 1.0, 7.0, 10.0] {
            let op = PosteriorOperator::from_prior_weights(&j, &mu * c, &ky, 0.02 * c * c, None).unwrap();
            let a = base.matrix().unwrap();
            let b = op.matrix().unwrap();
            let rel = (a - b).amax() / a.amax();
            assert!(rel <= 1e-8, "c={c} rel={rel}");
        }
    }

    #[test]
    fn weights_linear_in_kernel_vector() {
        let j = random_joint(8, 5);
        let op = PosteriorOperator::from_prior_weights(&j, DVector::from_element(8, 1.0), &gauss(1.0), 0.1, None)
            .unwrap();
        let a = DVector::from_fn(8, |i, _| i as f64);
        let b = DVector::from_fn(8, |i, _| (i as f64).cos());
        let lhs = op.apply(&(&a + &b)).unwrap();
        let rhs = op.apply(&a).unwrap() + op.apply(&b).unwrap();
        assert!((lhs - rhs).amax() <= 1e-12);
    }

    #[test]
    fn expectation_two_paths_agree() {
        let j = random_joint(30, 6);
        let kx = gauss(1.0);
        let ky = gauss(0.8);
        let prior = empirical_mean_embedding(&j.x, Space::X).unwrap();
        let op = build_posterior_operator(&j, &prior, &kx, &ky, RegularizationSchedule::for_sample_size(30), None)
            .unwrap();
        let f: Vec<f64> = j.x.iter().map(|x| x[0] * x[0] - 0.3).collect();
        let y = [0.4];
        let via_weights = op.posterior_weights(&y).unwrap().expectation(&f).unwrap();
        let direct = op.posterior_expectation(&f, &y).unwrap();
        assert_abs_diff_eq!(via_weights, direct, epsilon = 1e-12);
        assert_eq!(op.posterior_expectation(&vec![0.0; 30], &y).unwrap(), 0.0);
        let mass = op.posterior_expectation(&vec![1.0; 30], &y).unwrap();
        assert_abs_diff_eq!(mass, op.posterior_weights(&y).unwrap().total_mass(), epsilon = 1e-12);
        assert!(op.posterior_expectation(&[1.0], &y).is_err());
    }

    #[test]
    fn low_rank_full_rank_agrees_with_dense() {
        let j = random_joint(40, 7);
        let kx = gauss(1.0);
        let ky = gauss(0.6);
        let prior = empirical_mean_embedding(&j.x.slice(0..20), Space::X).unwrap();
        let s = RegularizationSchedule::new(0.01, 0.02).unwrap();
        let dense = build_posterior_operator(&j, &prior, &kx, &ky, s, None).unwrap();
        let fx = incomplete_cholesky_gram(&kx, &j.x, Some(0.0), Some(40)).unwrap();
        let fy = incomplete_cholesky_gram(&ky, &j.y, Some(0.0), Some(40)).unwrap();
        let low = build_posterior_operator(&j, &prior, &kx, &ky, s, Some(LowRankPair { gx: &fx, gy: &fy })).unwrap();
        assert!(low.is_low_rank());
        for y in [-1.0, 0.0, 0.7] {
            let a = dense.weight_vector(&[y]).unwrap();
            let b = low.weight_vector(&[y]).unwrap();
            assert!((a - b).amax() <= 1e-6);
        }
    }

    #[test]
    fn low_rank_action_matches_woodbury_route() {
        // the stored form equals L G_Y w with w = (delta I + U V)^{-1} L k,
        // U = L Gamma (Gamma^T L Gamma), V = Gamma^T
        let j = random_joint(30, 8);
        let ky = gauss(0.8);
        let f = incomplete_cholesky_gram(&ky, &j.y, Some(1e-8), Some(12)).unwrap();
        let mu = DVector::from_fn(30, |i, _| 1.0 + 0.5 * (i as f64 * 0.7).sin());
        let delta = 0.05;
        let op = PosteriorOperator::from_prior_weights(&j, mu.clone(), &ky, delta, Some(&f)).unwrap();
        let l = DMatrix::from_diagonal(&mu);
        let lg = &l * &f.gamma;
        let u = &lg * f.gamma.tr_mul(&lg);
        let v = f.gamma.transpose();
        let k = ky.column(&j.y, &[0.25]).unwrap();
        let b = DMatrix::from_column_slice(30, 1, (&l * &k).as_slice());
        let w = crate::linalg::solve_woodbury(delta, &u, None, &v, &b).unwrap();
        let via_woodbury = &lg * f.gamma.tr_mul(&w);
        let got = op.apply(&k).unwrap();
        assert!((got - via_woodbury.column(0)).amax() <= 1e-8);
    }

    #[test]
    fn errors() {
        let j = random_joint(4, 9);
        let ky = gauss(1.0);
        assert!(PosteriorOperator::from_prior_weights(&j, DVector::zeros(3), &ky, 0.1, None).is_err());
        assert!(PosteriorOperator::from_prior_weights(&j, DVector::zeros(4), &ky, 0.0, None).is_err());
        let op = PosteriorOperator::from_prior_weights(&j, DVector::from_element(4, 1.0), &ky, 0.1, None).unwrap();
        assert!(op.weight_vector(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn preimage_point_mass() {
        let pts = PointSet::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![3.0, -2.0], vec![5.0, 5.0]]).unwrap();
        let ws = WeightedSample::new(pts, vec![0.0, 0.0, 1.0, 0.0], Space::X).unwrap();
        let p = preimage(&ws, &gauss(1.0), &PreimageOptions { x0: Some(vec![0.5, 0.5]), ..Default::default() })
            .unwrap();
        assert!(p.converged);
        assert_eq!(p.point, vec![3.0, -2.0]);
        assert!(p.iterations <= 2);
    }

    #[test]
    fn preimage_symmetric_fixed_point() {
        let ws = WeightedSample::new(PointSet::from_scalars(&[-1.0, 1.0]).unwrap(), vec![0.5, 0.5], Space::X).unwrap();
        let p = preimage(&ws, &gauss(1.0), &PreimageOptions { x0: Some(vec![0.0]), ..Default::default() }).unwrap();
        assert!(p.converged);
        assert_eq!(p.point, vec![0.0]);
    }

    #[test]
    fn preimage_beats_grid_search() {
        let mut rng = crate::rng::seeded(17);
        let n = 25;
        let flat: Vec<f64> = (0..n * 2).map(|_| rng.random_range(0.0..1.0)).collect();
        let pts = PointSet::from_flat(flat, 2).unwrap();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let ws = WeightedSample::new(pts.clone(), w, Space::X).unwrap();
        let k = gauss(0.5);
        let p = preimage(&ws, &k, &PreimageOptions::default()).unwrap();
        assert!(p.converged);
        let at = preimage_objective(&ws, &k, &p.point).unwrap();
        let mut best = f64::INFINITY;
        for a in 0..=100 {
            for b in 0..=100 {
                let x = [a as f64 / 100.0, b as f64 / 100.0];
                best = best.min(preimage_objective(&ws, &k, &x).unwrap());
            }
        }
        assert!(at <= best + 1e-12, "fixed point {at} vs grid {best}");
    }

    #[test]
    fn preimage_defaults_and_errors() {
        assert_eq!(argmax_weight(&[0.1, 0.5, 0.5, -1.0]), Some(1));
        let ws = WeightedSample::new(PointSet::from_scalars(&[0.0, 0.0]).unwrap(), vec![1.0, -1.0], Space::X).unwrap();
        assert!(matches!(
            preimage(&ws, &gauss(1.0), &PreimageOptions::default()),
            Err(KbrError::Degenerate(_))
        ));
        let ok = WeightedSample::new(PointSet::from_scalars(&[0.0]).unwrap(), vec![1.0], Space::X).unwrap();
        assert!(preimage(&ok, &Kernel::trace(1, 1).unwrap(), &PreimageOptions::default()).is_err());
    }

    #[test]
    fn preimage_smoke_convergence_rate() {
        let mut converged = 0;
        for seed in 0..40u64 {
            let j = random_joint(60, 100 + seed);
            let prior = empirical_mean_embedding(&j.x, Space::X).unwrap();
            let kx = gauss(crate::modelsel::median_bandwidth(&j.x).unwrap());
            let ky = gauss(crate::modelsel::median_bandwidth(&j.y).unwrap());
            let op = build_posterior_operator(&j, &prior, &kx, &ky, RegularizationSchedule::for_sample_size(60), None)
                .unwrap();
            let ws = op.posterior_weights(&[0.3]).unwrap();
            if let Ok(p) = preimage(&ws, &kx, &PreimageOptions::default()) {
                converged += p.converged as usize;
            }
        }
        assert!(converged >= 38, "{converged}/40 converged");
    }
}
