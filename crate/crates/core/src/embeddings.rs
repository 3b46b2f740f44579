//! Empirical kernel mean embeddings, the kernel sum rule and conditional
//! mean embeddings.

use nalgebra::{DMatrix, DVector};

use crate::error::{KbrError, Result};
use crate::kernels::{gram_matrix, gram_symmetric, Kernel};
use crate::linalg::{incomplete_cholesky_gram, LowRankFactor, RegularizedSolver, WoodburySolver};
use crate::points::PointSet;

/// Sample sizes above this use the low-rank path unless told otherwise.
pub const DENSE_LIMIT: usize = 500;

/// Which variable a weighted sample lives over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    X,
    Y,
}

/// Points with real weights. Weights may be negative and need not sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample {
    pub points: PointSet,
    pub weights: Vec<f64>,
    pub space: Space,
}

impl WeightedSample {
    pub fn new(points: PointSet, weights: Vec<f64>, space: Space) -> Result<Self> {
        if points.is_empty() {
            return Err(KbrError::input("weighted sample needs at least one point"));
        }
        if points.len() != weights.len() {
            return Err(KbrError::input(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(KbrError::input("weights must be finite"));
        }
        Ok(Self {
            points,
            weights,
            space,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// `sum_i w_i f(x_i)` for tabulated `f`.
    pub fn expectation(&self, f_values: &[f64]) -> Result<f64> {
        if f_values.len() != self.len() {
            return Err(KbrError::input(format!(
                "{} function values for {} points",
                f_values.len(),
                self.len()
            )));
        }
        Ok(f_values.iter().zip(&self.weights).map(|(f, w)| f * w).sum())
    }

    /// `sum_i w_i x_i`, the raw embedding estimate of the mean.
    pub fn mean(&self) -> Vec<f64> {
        self.points.weighted_sum(&self.weights)
    }

    /// `sum_i w_i x_i / sum_i w_i`.
    pub fn normalized_mean(&self) -> Result<Vec<f64>> {
        let mass = self.total_mass();
        if mass.abs() < 1e-12 {
            return Err(KbrError::Degenerate("weights sum to zero".into()));
        }
        Ok(self.mean().into_iter().map(|v| v / mass).collect())
    }

    /// The embedding evaluated at `x`: `sum_i w_i k(x_i, x)`.
    pub fn evaluate(&self, k: &Kernel, x: &[f64]) -> Result<f64> {
        let col = k.column(&self.points, x)?;
        Ok(col.iter().zip(&self.weights).map(|(a, w)| a * w).sum())
    }
}

/// Squared RKHS distance between two embeddings, expanded through Gram matrices.
pub fn rkhs_distance_sq(k: &Kernel, a: &WeightedSample, b: &WeightedSample) -> Result<f64> {
    let wa = DVector::from_column_slice(&a.weights);
    let wb = DVector::from_column_slice(&b.weights);
    let gaa = gram_symmetric(k, &a.points)?;
    let gbb = gram_symmetric(k, &b.points)?;
    let gab = gram_matrix(k, &a.points, &b.points)?;
    let d = wa.dot(&(&gaa * &wa)) - 2.0 * wa.dot(&(&gab * &wb)) + wb.dot(&(&gbb * &wb));
    Ok(d.max(0.0))
}

/// Paired sample `(X_i, Y_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSample {
    pub x: PointSet,
    pub y: PointSet,
}

impl JointSample {
    pub fn new(x: PointSet, y: PointSet) -> Result<Self> {
        if x.is_empty() {
            return Err(KbrError::input("joint sample is empty"));
        }
        if x.len() != y.len() {
            return Err(KbrError::input(format!(
                "{} x points but {} y points",
                x.len(),
                y.len()
            )));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> JointSample {
        JointSample {
            x: self.x.select(idx),
            y: self.y.select(idx),
        }
    }
}

/// Uniform weights `1/n` on `points`.
pub fn empirical_mean_embedding(points: &PointSet, space: Space) -> Result<WeightedSample> {
    let n = points.len();
    if n == 0 {
        return Err(KbrError::input("empirical embedding of an empty sample"));
    }
    WeightedSample::new(points.clone(), vec![1.0 / n as f64; n], space)
}

/// `(G + cI)^{-1}` for a Gram matrix, dense or through a low-rank factor.
#[derive(Debug, Clone)]
pub enum ShiftedGramSolver {
    Dense(RegularizedSolver),
    LowRank(WoodburySolver),
}

impl ShiftedGramSolver {
    /// Dense for `n <= DENSE_LIMIT` when no factor is given; otherwise low rank
    /// (factorizing with default parameters if needed).
    pub fn new(
        k: &Kernel,
        points: &PointSet,
        c: f64,
        lowrank: Option<&LowRankFactor>,
    ) -> Result<Self> {
        match lowrank {
            Some(f) => {
                if f.n() != points.len() {
                    return Err(KbrError::input("low-rank factor size does not match sample"));
                }
                Ok(ShiftedGramSolver::LowRank(f.shifted_solver(c)?))
            }
            None if points.len() <= DENSE_LIMIT => Ok(ShiftedGramSolver::Dense(
                RegularizedSolver::new(&gram_symmetric(k, points)?, c)?,
            )),
            None => {
                let f = incomplete_cholesky_gram(k, points, None, None)?;
                Ok(ShiftedGramSolver::LowRank(f.shifted_solver(c)?))
            }
        }
    }

    pub fn from_dense(g: &DMatrix<f64>, c: f64) -> Result<Self> {
        Ok(ShiftedGramSolver::Dense(RegularizedSolver::new(g, c)?))
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        match self {
            ShiftedGramSolver::Dense(s) => s.solve_vec(b),
            ShiftedGramSolver::LowRank(s) => s.solve_vec(b),
        }
    }
}

/// Kernel sum rule weights `mu = n (G_X + n eps I)^{-1} m_prior`, where
/// `m_prior_i = sum_j gamma_j k_X(X_i, U_j)`.
///
/// `({(X_i, Y_i)}, mu)` embeds the joint of prior and likelihood, and
/// `({Y_i}, mu)` its `Y` marginal.
pub fn kbr_prior_weights(
    joint: &JointSample,
    prior: &WeightedSample,
    kx: &Kernel,
    eps: f64,
    lowrank: Option<&LowRankFactor>,
) -> Result<DVector<f64>> {
    if prior.space != Space::X {
        return Err(KbrError::input("prior must be a weighted sample over X"));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(KbrError::input(format!("eps must be positive, got {eps}")));
    }
    if prior.points.dim() != joint.x.dim() {
        return Err(KbrError::input("prior points and X sample differ in dimension"));
    }
    let n = joint.len();
    let nf = n as f64;
    let cross = gram_matrix(kx, &joint.x, &prior.points)?;
    let m_prior = cross * DVector::from_column_slice(&prior.weights);
    let solver = ShiftedGramSolver::new(kx, &joint.x, nf * eps, lowrank)?;
    Ok(solver.solve_vec(&m_prior) * nf)
}

/// Multiplier applied to conditional-mean weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightScale {
    /// `(G_Y + n eps I)^{-1} k_Y(y)`.
    #[default]
    Unit,
    /// `n (G_Y + n eps I)^{-1} k_Y(y)`, the filter initialization convention.
    SampleSize,
}

/// Conditional mean embedding of `X` given `Y = y`, with the regularized
/// Gram inverse factorized once for many queries.
#[derive(Debug, Clone)]
pub struct ConditionalMean {
    x: PointSet,
    y: PointSet,
    ky: Kernel,
    solver: ShiftedGramSolver,
    scale: f64,
}

impl ConditionalMean {
    pub fn new(
        joint: &JointSample,
        ky: &Kernel,
        eps: f64,
        scale: WeightScale,
        lowrank: Option<&LowRankFactor>,
    ) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(KbrError::input(format!("eps must be positive, got {eps}")));
        }
        let n = joint.len() as f64;
        let solver = ShiftedGramSolver::new(ky, &joint.y, n * eps, lowrank)?;
        Ok(Self {
            x: joint.x.clone(),
            y: joint.y.clone(),
            ky: ky.clone(),
            solver,
            scale: match scale {
                WeightScale::Unit => 1.0,
                WeightScale::SampleSize => n,
            },
        })
    }

    pub fn weight_vector(&self, y: &[f64]) -> Result<DVector<f64>> {
        let ky = self.ky.column(&self.y, y)?;
        Ok(self.solver.solve_vec(&ky) * self.scale)
    }

    pub fn weights(&self, y: &[f64]) -> Result<WeightedSample> {
        let nu = self.weight_vector(y)?;
        WeightedSample::new(self.x.clone(), nu.as_slice().to_vec(), Space::X)
    }
}

/// `nu = (G_Y + n eps I)^{-1} k_Y(y)` attached to the `X` points.
pub fn conditional_mean_weights(
    joint: &JointSample,
    ky: &Kernel,
    eps: f64,
    y: &[f64],
) -> Result<WeightedSample> {
    ConditionalMean::new(joint, ky, eps, WeightScale::Unit, None)?.weights(y)
}
