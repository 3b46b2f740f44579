//! Closed-form references and synthetic data generators: the linear-Gaussian
//! model with its conjugate posterior, the rotation dynamics, and a plain
//! Kalman filter.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::embeddings::JointSample;
use crate::error::{KbrError, Result};
use crate::points::PointSet;
use crate::rng::substream;
use crate::statespace::{clean_covariance, DifferentiableModel, LinearDynamics, Trajectory};

fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Joint Gaussian `(X, Y) ~ N((0, 1_d), V)` on `R^d x R^d` with prior
/// `N(0, V_XX / 2)` for `X`.
#[derive(Debug, Clone)]
pub struct GaussianJointConfig {
    pub d: usize,
    pub mean: DVector<f64>,
    pub v: DMatrix<f64>,
    /// `V_YX V_XX^{-1}`.
    h: DMatrix<f64>,
    /// Cholesky factor of `V_{Y|X}`.
    noise_chol: DMatrix<f64>,
    /// Cholesky factor of `V`.
    joint_chol: DMatrix<f64>,
    /// Posterior mean `gain * (y - 1)`.
    gain: DMatrix<f64>,
}

impl GaussianJointConfig {
    /// Draws `A` (2d x 2d, standard normal entries) and sets `V = A^T A + 2 I`.
    pub fn sample(d: usize, seed: u64) -> Result<Self> {
        if d == 0 {
            return Err(KbrError::input("dimension must be positive"));
        }
        let mut rng = substream(seed, "model");
        let a = DMatrix::from_fn(2 * d, 2 * d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let v = a.transpose() * &a + DMatrix::identity(2 * d, 2 * d) * 2.0;
        Self::from_covariance(d, v)
    }

    /// Uses a given joint covariance (must be symmetric positive definite).
    pub fn from_covariance(d: usize, v: DMatrix<f64>) -> Result<Self> {
        if v.shape() != (2 * d, 2 * d) {
            return Err(KbrError::input("joint covariance must be 2d x 2d"));
        }
        if (&v - v.transpose()).amax() > 1e-12 * v.amax() {
            return Err(KbrError::input("joint covariance must be symmetric"));
        }
        let joint_chol = v
            .clone()
            .cholesky()
            .ok_or_else(|| KbrError::numeric("joint covariance is not positive definite", 0.0, f64::INFINITY))?
            .l();
        let vxx = v.view((0, 0), (d, d)).into_owned();
        let vyx = v.view((d, 0), (d, d)).into_owned();
        let vyy = v.view((d, d), (d, d)).into_owned();
        let vxx_inv = vxx
            .clone()
            .cholesky()
            .ok_or_else(|| KbrError::numeric("V_XX is singular", 0.0, f64::INFINITY))?
            .inverse();
        let h = &vyx * &vxx_inv;
        let s = &vyy - &h * vyx.transpose();
        let s = (&s + s.transpose()) * 0.5;
        let noise_chol = s
            .clone()
            .cholesky()
            .ok_or_else(|| KbrError::numeric("conditional covariance is singular", 0.0, f64::INFINITY))?
            .l();
        let p = &vxx * 0.5;
        let innov = &h * &p * h.transpose() + &s;
        let innov_inv = innov
            .cholesky()
            .ok_or_else(|| KbrError::numeric("marginal covariance of Y is singular", 0.0, f64::INFINITY))?
            .inverse();
        let gain = &p * h.transpose() * innov_inv;
        let mut mean = DVector::zeros(2 * d);
        mean.rows_mut(d, d).fill(1.0);
        Ok(Self {
            d,
            mean,
            v,
            h,
            noise_chol,
            joint_chol,
            gain,
        })
    }

    pub fn v_xx(&self) -> DMatrix<f64> {
        self.v.view((0, 0), (self.d, self.d)).into_owned()
    }

    pub fn v_yy(&self) -> DMatrix<f64> {
        self.v.view((self.d, self.d), (self.d, self.d)).into_owned()
    }

    pub fn prior_cov(&self) -> DMatrix<f64> {
        self.v_xx() * 0.5
    }

    /// `n` i.i.d. pairs from the joint `N((0, 1), V)`.
    pub fn sample_joint<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<JointSample> {
        let d = self.d;
        let (mut xs, mut ys) = (Vec::with_capacity(n * d), Vec::with_capacity(n * d));
        for _ in 0..n {
            let z = &self.mean + &self.joint_chol * standard_normal_vec(rng, 2 * d);
            xs.extend(z.rows(0, d).iter());
            ys.extend(z.rows(d, d).iter());
        }
        JointSample::new(PointSet::from_flat(xs, d)?, PointSet::from_flat(ys, d)?)
    }

    fn sample_gaussian<R: Rng + ?Sized>(&self, cov: DMatrix<f64>, n: usize, rng: &mut R) -> Result<PointSet> {
        let l = cov
            .cholesky()
            .ok_or_else(|| KbrError::numeric("covariance is not positive definite", 0.0, f64::INFINITY))?
            .l();
        let mut out = Vec::with_capacity(n * self.d);
        for _ in 0..n {
            out.extend((&l * standard_normal_vec(rng, self.d)).iter());
        }
        PointSet::from_flat(out, self.d)
    }

    /// `n` draws from the prior `N(0, V_XX / 2)`.
    pub fn sample_prior<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<PointSet> {
        self.sample_gaussian(self.prior_cov(), n, rng)
    }

    /// `n` conditioning points `y ~ N(0, V_YY)`.
    pub fn sample_test_points<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<PointSet> {
        self.sample_gaussian(self.v_yy(), n, rng)
    }

    /// One draw from `P(Y | X = x)`.
    pub fn sample_likelihood<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        let mu = self.mean.rows(self.d, self.d) + &self.h * DVector::from_column_slice(x);
        (mu + &self.noise_chol * standard_normal_vec(rng, self.d))
            .iter()
            .cloned()
            .collect()
    }
}

/// Exact posterior mean of `X` given `Y = y` under the prior `N(0, V_XX/2)`
/// and the likelihood `Y | X ~ N(1 + H x, V_{Y|X})`.
pub fn gaussian_conjugate_posterior_mean(cfg: &GaussianJointConfig, y: &[f64]) -> Result<Vec<f64>> {
    if y.len() != cfg.d {
        return Err(KbrError::input("conditioning point has the wrong dimension"));
    }
    let centered = DVector::from_column_slice(y) - cfg.mean.rows(cfg.d, cfg.d);
    Ok((&cfg.gain * centered).iter().cloned().collect())
}

/// Parameters of the noisy rotation
/// `X_{t+1} = (1 + b sin(M phi)) (cos phi, sin phi) + noise`,
/// `phi = angle(X_t) + eta`, observed as `Y_t = X_t + noise`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationDynamicsConfig {
    pub eta: f64,
    pub b: f64,
    pub m: f64,
    pub sigma_h: f64,
    pub sigma_o: f64,
}

impl RotationDynamicsConfig {
    /// Rotation with noisy observations.
    pub fn preset_a() -> Self {
        Self {
            eta: 0.3,
            b: 0.0,
            m: 0.0,
            sigma_h: 0.2,
            sigma_o: 0.2,
        }
    }

    /// Oscillatory rotation with noisy observations.
    pub fn preset_b() -> Self {
        Self {
            eta: 0.4,
            b: 0.4,
            m: 8.0,
            sigma_h: 0.2,
            sigma_o: 0.2,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "a" => Ok(Self::preset_a()),
            "b" => Ok(Self::preset_b()),
            other => Err(KbrError::Config(format!("unknown dataset {other:?} (expected a or b)"))),
        }
    }

    fn radius(&self, phi: f64) -> f64 {
        1.0 + self.b * (self.m * phi).sin()
    }

    /// Noise-free image of a state.
    pub fn advance(&self, x: &[f64]) -> [f64; 2] {
        let phi = (x[1].atan2(x[0]) + self.eta).rem_euclid(std::f64::consts::TAU);
        let r = self.radius(phi);
        [r * phi.cos(), r * phi.sin()]
    }
}

impl DifferentiableModel for RotationDynamicsConfig {
    fn state_dim(&self) -> usize {
        2
    }
    fn obs_dim(&self) -> usize {
        2
    }
    fn transition(&self, x: &DVector<f64>) -> DVector<f64> {
        let p = self.advance(x.as_slice());
        DVector::from_vec(p.to_vec())
    }
    fn transition_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let (u, v) = (x[0], x[1]);
        let r2 = (u * u + v * v).max(1e-12);
        let phi = v.atan2(u) + self.eta;
        let r = self.radius(phi);
        let dr = self.b * self.m * (self.m * phi).cos();
        let dfdphi = [dr * phi.cos() - r * phi.sin(), dr * phi.sin() + r * phi.cos()];
        let dphi = [-v / r2, u / r2];
        DMatrix::from_fn(2, 2, |i, j| dfdphi[i] * dphi[j])
    }
    fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }
    fn observation_jacobian(&self, _: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(2, 2)
    }
    fn process_noise(&self) -> DMatrix<f64> {
        DMatrix::identity(2, 2) * (self.sigma_h * self.sigma_h)
    }
    fn observation_noise(&self) -> DMatrix<f64> {
        DMatrix::identity(2, 2) * (self.sigma_o * self.sigma_o)
    }
}

/// `len` steps of the rotation dynamics. The initial angle is uniform and
/// the initial state lies on the noise-free curve.
pub fn simulate_rotation(cfg: &RotationDynamicsConfig, len: usize, seed: u64) -> Result<Trajectory> {
    if len < 2 {
        return Err(KbrError::input("simulation needs at least two steps"));
    }
    let mut rng = substream(seed, "rotation");
    let theta0 = rng.random::<f64>() * std::f64::consts::TAU;
    let r0 = cfg.radius(theta0);
    let mut x = [r0 * theta0.cos(), r0 * theta0.sin()];
    let (mut xs, mut ys) = (Vec::with_capacity(2 * len), Vec::with_capacity(2 * len));
    for t in 0..len {
        if t > 0 {
            let p = cfg.advance(&x);
            x = [
                p[0] + cfg.sigma_h * rng.sample::<f64, _>(StandardNormal),
                p[1] + cfg.sigma_h * rng.sample::<f64, _>(StandardNormal),
            ];
        }
        xs.extend_from_slice(&x);
        ys.push(x[0] + cfg.sigma_o * rng.sample::<f64, _>(StandardNormal));
        ys.push(x[1] + cfg.sigma_o * rng.sample::<f64, _>(StandardNormal));
    }
    Trajectory::new(Some(PointSet::from_flat(xs, 2)?), PointSet::from_flat(ys, 2)?)
}

/// One step of [`kalman_filter_oracle`].
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanStep {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub gain: DMatrix<f64>,
}

/// Textbook Kalman filter. `(mean0, cov0)` is the state belief before the
/// first observation; each observation is preceded by one prediction.
pub fn kalman_filter_oracle(
    model: &LinearDynamics,
    mean0: &DVector<f64>,
    cov0: &DMatrix<f64>,
    observations: &PointSet,
) -> Result<Vec<KalmanStep>> {
    let d = model.f.nrows();
    if mean0.len() != d || cov0.shape() != (d, d) || observations.dim() != model.h.nrows() {
        return Err(KbrError::input("Kalman filter inputs have inconsistent shapes"));
    }
    let (f, h, q, r) = (&model.f, &model.h, &model.q, &model.r);
    let mut m = mean0.clone();
    let mut p = cov0.clone();
    let mut out = Vec::with_capacity(observations.len());
    for y in observations.iter() {
        let m_pred = f * &m;
        let p_pred = f * &p * f.transpose() + q;
        let s = h * &p_pred * h.transpose() + r;
        let s_inv = s
            .try_inverse()
            .ok_or_else(|| KbrError::numeric("innovation covariance is singular", 0.0, f64::INFINITY))?;
        let k = &p_pred * h.transpose() * s_inv;
        m = &m_pred + &k * (DVector::from_column_slice(y) - h * &m_pred);
        p = clean_covariance((DMatrix::identity(d, d) - &k * h) * &p_pred)?;
        out.push(KalmanStep {
            mean: m.clone(),
            cov: p.clone(),
            gain: k,
        });
    }
    Ok(out)
}
