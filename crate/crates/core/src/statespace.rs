//! Nonparametric state-space filtering with kernel Bayes' rule, and an
//! extended Kalman filter for comparison.
//!
//! Training uses a trajectory `(X_1, Y_1), ..., (X_T, Y_T)` plus the state
//! `X_{T+1}`. The filter state is a weight vector `alpha` over `X_1..X_T`.
//! One step is
//!
//! ```text
//! predict: mu    = (G_X + T eps I)^{-1} G_XX+ (G_X + T eps I)^{-1} G_X alpha
//! update:  alpha = L G_Y ((L G_Y)^2 + delta I)^{-1} L k_Y(y),  L = diag(mu)
//! ```
//!
//! where `(G_XX+)_ij = k_X(X_i, X_{j+1})`. The update is the posterior
//! operator of [`crate::kbr`] with prior weights `mu`.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::embeddings::{ConditionalMean, JointSample, Space, WeightScale, WeightedSample};
use crate::error::{KbrError, Result};
use crate::kbr::{preimage, PosteriorOperator, PreimageOptions};
use crate::kernels::{gram_matrix, gram_symmetric, Kernel};
use crate::linalg::{
    incomplete_cholesky_gram, LowRankFactor, RegularizationSchedule, RegularizedSolver,
    WoodburySolver,
};
use crate::points::{sq_dist, PointSet};

/// Hidden states (when known) and observations, indexed by time.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Option<PointSet>,
    pub observations: PointSet,
}

impl Trajectory {
    pub fn new(states: Option<PointSet>, observations: PointSet) -> Result<Self> {
        if let Some(s) = &states {
            if s.len() != observations.len() {
                return Err(KbrError::input(format!(
                    "{} states but {} observations",
                    s.len(),
                    observations.len()
                )));
            }
        }
        Ok(Self {
            states,
            observations,
        })
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> Trajectory {
        Trajectory {
            states: self.states.as_ref().map(|s| s.slice(range.clone())),
            observations: self.observations.slice(range),
        }
    }

    /// CSV with columns `t, x_1..x_d, y_1..y_r`; the `x` columns are
    /// omitted when states are unknown.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let d = self.states.as_ref().map_or(0, |s| s.dim());
        let r = self.observations.dim();
        let mut header = vec!["t".to_string()];
        header.extend((1..=d).map(|i| format!("x_{i}")));
        header.extend((1..=r).map(|i| format!("y_{i}")));
        wtr.write_record(&header)?;
        for t in 0..self.len() {
            let mut row = vec![(t + 1).to_string()];
            if let Some(s) = &self.states {
                row.extend(s.point(t).iter().map(|v| v.to_string()));
            }
            row.extend(self.observations.point(t).iter().map(|v| v.to_string()));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads the format of [`Trajectory::write_csv`]. Columns other than
    /// `t`, `x_*` and `y_*` are ignored; rows are ordered by `t`.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        let col = |prefix: &str| -> Vec<usize> {
            let mut cols: Vec<(usize, usize)> = headers
                .iter()
                .enumerate()
                .filter_map(|(c, h)| {
                    h.strip_prefix(prefix)
                        .and_then(|s| s.parse::<usize>().ok())
                        .map(|k| (k, c))
                })
                .collect();
            cols.sort_unstable();
            cols.into_iter().map(|(_, c)| c).collect()
        };
        let t_col = headers
            .iter()
            .position(|h| h == "t")
            .ok_or_else(|| KbrError::input("trajectory file has no t column"))?;
        let (xc, yc) = (col("x_"), col("y_"));
        if yc.is_empty() {
            return Err(KbrError::input("trajectory file has no y columns"));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| KbrError::input(format!("not a number: {s:?}")))
        };
        let mut rows: Vec<(f64, Vec<f64>, Vec<f64>)> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let get = |c: usize| parse(rec.get(c).unwrap_or(""));
            let t = get(t_col)?;
            let x = xc.iter().map(|&c| get(c)).collect::<Result<Vec<_>>>()?;
            let y = yc.iter().map(|&c| get(c)).collect::<Result<Vec<_>>>()?;
            rows.push((t, x, y));
        }
        if rows.is_empty() {
            return Err(KbrError::input("trajectory file has no rows"));
        }
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        let ys: Vec<&[f64]> = rows.iter().map(|r| r.2.as_slice()).collect();
        let obs = PointSet::from_rows(&ys)?;
        let states = if xc.is_empty() {
            None
        } else {
            let xs: Vec<&[f64]> = rows.iter().map(|r| r.1.as_slice()).collect();
            Some(PointSet::from_rows(&xs)?)
        };
        Trajectory::new(states, obs)
    }
}

#[derive(Debug, Clone)]
enum Grams {
    Dense {
        gx: DMatrix<f64>,
        gy: DMatrix<f64>,
        gxxp: DMatrix<f64>,
        solver: RegularizedSolver,
    },
    LowRank {
        /// Factor rows for `X_1..X_T`.
        gamma_x: DMatrix<f64>,
        /// Factor rows for `X_2..X_{T+1}`.
        gamma_xp: DMatrix<f64>,
        solver: WoodburySolver,
        gy: LowRankFactor,
    },
}

/// Trained filter: Gram and transfer matrices over a training trajectory.
#[derive(Debug, Clone)]
pub struct FilterModel {
    joint: JointSample,
    x_next: Vec<f64>,
    kx: Kernel,
    ky: Kernel,
    schedule: RegularizationSchedule,
    grams: Grams,
}

/// Weights over the training states after `t` observations.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub alpha: DVector<f64>,
    pub t: usize,
    /// Predictive weights of the last step, kept for diagnostics.
    pub last_mu: DVector<f64>,
}

/// Trains from a trajectory of `T + 1` states; `observations` must cover at
/// least the first `T`. `low_rank` gives the maximum rank of incomplete
/// Cholesky factors; `None` keeps dense `T x T` matrices.
pub fn filter_train(
    trajectory: &Trajectory,
    kx: &Kernel,
    ky: &Kernel,
    schedule: RegularizationSchedule,
    low_rank: Option<usize>,
) -> Result<FilterModel> {
    let states = trajectory
        .states
        .as_ref()
        .ok_or_else(|| KbrError::input("training trajectory needs hidden states"))?;
    if states.len() < 3 {
        return Err(KbrError::input("filter training needs T >= 2 transitions"));
    }
    let t = states.len() - 1;
    kx.check_dim(states.dim())?;
    ky.check_dim(trajectory.observations.dim())?;
    let x = states.slice(0..t);
    let y = trajectory.observations.slice(0..t);
    let joint = JointSample::new(x, y)?;
    let c = t as f64 * schedule.eps();
    let grams = match low_rank {
        None => {
            let gx = gram_symmetric(kx, &joint.x)?;
            let gy = gram_symmetric(ky, &joint.y)?;
            let gxxp = gram_matrix(kx, &joint.x, &states.slice(1..t + 1))?;
            let solver = RegularizedSolver::new(&gx, c)?;
            Grams::Dense {
                gx,
                gy,
                gxxp,
                solver,
            }
        }
        Some(r) => {
            if r == 0 {
                return Err(KbrError::input("low-rank filtering needs rank >= 1"));
            }
            // one factor over all T+1 states serves G_X and the transfer matrix
            let fx = incomplete_cholesky_gram(kx, states, None, Some(r))?;
            let gamma_x = fx.rows(0..t);
            let gamma_xp = fx.rows(1..t + 1);
            let solver = WoodburySolver::new(c, gamma_x.clone(), gamma_x.transpose())?;
            let gy = incomplete_cholesky_gram(ky, &joint.y, None, Some(r))?;
            Grams::LowRank {
                gamma_x,
                gamma_xp,
                solver,
                gy,
            }
        }
    };
    Ok(FilterModel {
        joint,
        x_next: states.point(t).to_vec(),
        kx: kx.clone(),
        ky: ky.clone(),
        schedule,
        grams,
    })
}

impl FilterModel {
    /// Number of training transitions `T`.
    pub fn len(&self) -> usize {
        self.joint.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joint.is_empty()
    }

    pub fn x_train(&self) -> &PointSet {
        &self.joint.x
    }

    pub fn y_train(&self) -> &PointSet {
        &self.joint.y
    }

    /// The final training state `X_{T+1}`.
    pub fn x_last(&self) -> &[f64] {
        &self.x_next
    }

    pub fn kx(&self) -> &Kernel {
        &self.kx
    }

    pub fn ky(&self) -> &Kernel {
        &self.ky
    }

    pub fn schedule(&self) -> RegularizationSchedule {
        self.schedule
    }

    pub fn is_low_rank(&self) -> bool {
        matches!(self.grams, Grams::LowRank { .. })
    }

    /// `G_X`, reconstructed from factors on the low-rank path.
    pub fn gram_x(&self) -> DMatrix<f64> {
        match &self.grams {
            Grams::Dense { gx, .. } => gx.clone(),
            Grams::LowRank { gamma_x, .. } => gamma_x * gamma_x.transpose(),
        }
    }

    pub fn gram_y(&self) -> DMatrix<f64> {
        match &self.grams {
            Grams::Dense { gy, .. } => gy.clone(),
            Grams::LowRank { gy, .. } => gy.reconstruct(),
        }
    }

    /// Transfer matrix `(G_XX+)_ij = k_X(X_i, X_{j+1})`.
    pub fn transfer(&self) -> DMatrix<f64> {
        match &self.grams {
            Grams::Dense { gxxp, .. } => gxxp.clone(),
            Grams::LowRank {
                gamma_x, gamma_xp, ..
            } => gamma_x * gamma_xp.transpose(),
        }
    }

    fn check_obs(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.joint.y.dim() {
            return Err(KbrError::input(format!(
                "observation has dimension {}, model expects {}",
                y.len(),
                self.joint.y.dim()
            )));
        }
        Ok(())
    }

    fn check_weights(&self, v: &DVector<f64>, what: &str) -> Result<()> {
        if v.len() != self.len() {
            return Err(KbrError::input(format!(
                "{what} has length {}, model has T = {}",
                v.len(),
                self.len()
            )));
        }
        Ok(())
    }
}

/// `alpha = T (G_Y + T eps I)^{-1} k_Y(y_1)`.
pub fn filter_init(model: &FilterModel, y1: &[f64]) -> Result<FilterState> {
    model.check_obs(y1)?;
    let eps = model.schedule.eps();
    let alpha = match &model.grams {
        Grams::Dense { gy, .. } => {
            let n = model.len() as f64;
            let s = RegularizedSolver::new(gy, n * eps)?;
            s.solve_vec(&model.ky.column(&model.joint.y, y1)?) * n
        }
        Grams::LowRank { gy, .. } => {
            ConditionalMean::new(&model.joint, &model.ky, eps, WeightScale::SampleSize, Some(gy))?
                .weight_vector(y1)?
        }
    };
    if alpha.iter().any(|v| !v.is_finite()) {
        return Err(KbrError::numeric("initial filter weights not finite", eps, f64::INFINITY));
    }
    let zeros = DVector::zeros(model.len());
    Ok(FilterState {
        alpha,
        t: 1,
        last_mu: zeros,
    })
}

/// Predictive weights `mu` of the next state.
pub fn filter_predict(model: &FilterModel, state: &FilterState) -> Result<DVector<f64>> {
    model.check_weights(&state.alpha, "alpha")?;
    let a = &state.alpha;
    let mu = match &model.grams {
        Grams::Dense {
            gx, gxxp, solver, ..
        } => {
            let b = solver.solve_vec(&(gx * a));
            solver.solve_vec(&(gxxp * b))
        }
        Grams::LowRank {
            gamma_x,
            gamma_xp,
            solver,
            ..
        } => {
            let ga = gamma_x * (gamma_x.transpose() * a);
            let b = solver.solve_vec(&ga);
            solver.solve_vec(&(gamma_x * (gamma_xp.transpose() * b)))
        }
    };
    if mu.iter().any(|v| !v.is_finite()) {
        return Err(KbrError::numeric(
            "predictive weights not finite",
            model.schedule.eps(),
            f64::INFINITY,
        ));
    }
    Ok(mu)
}

/// Posterior weights after observing `y_new` under the predictive weights `mu`.
pub fn filter_update(
    model: &FilterModel,
    state: &FilterState,
    mu: DVector<f64>,
    y_new: &[f64],
) -> Result<FilterState> {
    model.check_weights(&mu, "mu")?;
    model.check_obs(y_new)?;
    let delta = model.schedule.delta();
    let op = match &model.grams {
        Grams::Dense { gy, .. } => PosteriorOperator::from_prior_weights_with_gram(
            &model.joint,
            mu.clone(),
            &model.ky,
            gy,
            delta,
        )?,
        Grams::LowRank { gy, .. } => {
            PosteriorOperator::from_prior_weights(&model.joint, mu.clone(), &model.ky, delta, Some(gy))?
        }
    };
    let alpha = op.weight_vector(y_new)?;
    if alpha.iter().any(|v| !v.is_finite()) {
        return Err(KbrError::numeric("filter weights not finite", delta, f64::INFINITY));
    }
    Ok(FilterState {
        alpha,
        t: state.t + 1,
        last_mu: mu,
    })
}

/// Predict then update.
pub fn filter_step(model: &FilterModel, state: &FilterState, y_new: &[f64]) -> Result<FilterState> {
    let mu = filter_predict(model, state)?;
    filter_update(model, state, mu, y_new)
}

/// How a weight vector is turned into one state estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PointEstimate {
    /// Gaussian-kernel preimage of the posterior embedding.
    #[default]
    Preimage,
    /// `sum_i alpha_i X_i / sum_i alpha_i`.
    WeightedMean,
}

/// State estimate from the filter weights.
pub fn filter_point_estimate(
    model: &FilterModel,
    state: &FilterState,
    method: PointEstimate,
) -> Result<Vec<f64>> {
    model.check_weights(&state.alpha, "alpha")?;
    let ws = WeightedSample::new(model.joint.x.clone(), state.alpha.as_slice().to_vec(), Space::X)?;
    match method {
        PointEstimate::Preimage => Ok(preimage(&ws, &model.kx, &PreimageOptions::default())?.point),
        PointEstimate::WeightedMean => ws.normalized_mean(),
    }
}

/// Estimates for a run of observations.
#[derive(Debug, Clone)]
pub struct FilterRun {
    pub estimates: PointSet,
    /// Steps where the preimage was degenerate and the weighted mean was used.
    pub fallbacks: usize,
}

/// Filters `observations` from scratch. With [`PointEstimate::Preimage`] a
/// degenerate preimage falls back to the weighted mean, and then to the
/// previous estimate; such steps are counted in [`FilterRun::fallbacks`].
pub fn filter_run(model: &FilterModel, observations: &PointSet, method: PointEstimate) -> Result<FilterRun> {
    if observations.is_empty() {
        return Err(KbrError::input("no observations to filter"));
    }
    let mut out = Vec::with_capacity(observations.len() * model.joint.x.dim());
    let mut fallbacks = 0;
    let mut state = filter_init(model, observations.point(0))?;
    let mut prev: Option<Vec<f64>> = None;
    for t in 0..observations.len() {
        if t > 0 {
            state = filter_step(model, &state, observations.point(t))?;
        }
        let est = match filter_point_estimate(model, &state, method) {
            Ok(p) => p,
            Err(KbrError::Degenerate(_)) => {
                fallbacks += 1;
                match filter_point_estimate(model, &state, PointEstimate::WeightedMean) {
                    Ok(p) => p,
                    Err(KbrError::Degenerate(_)) => prev
                        .clone()
                        .unwrap_or_else(|| model.joint.x.mean()),
                    Err(e) => return Err(e),
                }
            }
            Err(e) => return Err(e),
        };
        out.extend_from_slice(&est);
        prev = Some(est);
    }
    Ok(FilterRun {
        estimates: PointSet::from_flat(out, model.joint.x.dim())?,
        fallbacks,
    })
}

/// Mean squared Euclidean state error.
pub fn state_mse(estimates: &PointSet, truth: &PointSet) -> Result<f64> {
    if estimates.len() != truth.len() || estimates.dim() != truth.dim() || truth.is_empty() {
        return Err(KbrError::input("estimate and truth shapes differ"));
    }
    let total: f64 = estimates
        .iter()
        .zip(truth.iter())
        .map(|(a, b)| sq_dist(a, b))
        .sum();
    Ok(total / truth.len() as f64)
}

/// One candidate of the filter validation grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterCandidate {
    pub beta: f64,
    pub eps: f64,
    pub delta: f64,
}

/// `beta in {0.25, 0.5, 1, 2, 4}`, `eps in {1e-4, 1e-3, 1e-2, 1e-1}`, `delta = 2 eps`.
pub fn default_filter_grid() -> Vec<FilterCandidate> {
    let mut g = Vec::new();
    for &beta in &[0.25, 0.5, 1.0, 2.0, 4.0] {
        for &eps in &[1e-4, 1e-3, 1e-2, 1e-1] {
            g.push(FilterCandidate {
                beta,
                eps,
                delta: 2.0 * eps,
            });
        }
    }
    g
}

#[derive(Debug, Clone)]
pub struct FilterValidation {
    pub best: FilterCandidate,
    pub best_index: usize,
    /// State MSE on the second half per candidate; infinite when the run failed.
    pub scores: Vec<f64>,
}

/// Split-in-two validation: the first half of `training` fits the filter,
/// which then runs over the second half and is scored by state MSE.
/// Bandwidths are `beta` times those of `kx` and `ky`. Lowest score wins;
/// ties go to the larger `eps`, then the lower index.
pub fn filter_validate(
    training: &Trajectory,
    kx: &Kernel,
    ky: &Kernel,
    grid: &[FilterCandidate],
    low_rank: Option<usize>,
    method: PointEstimate,
    exec: crate::exec::Exec,
) -> Result<FilterValidation> {
    if grid.is_empty() {
        return Err(KbrError::input("filter validation grid is empty"));
    }
    let states = training
        .states
        .as_ref()
        .ok_or_else(|| KbrError::input("validation needs hidden states"))?;
    let n = training.len();
    if n < 8 {
        return Err(KbrError::input("validation needs at least 8 training steps"));
    }
    let half = n / 2;
    let fit = training.slice(0..half + 1);
    let held = training.slice(half..n);
    let held_states = held.states.as_ref().unwrap_or(states);
    let scores = exec.map(grid.len(), |g| {
        let c = grid[g];
        let run = || -> Result<f64> {
            let schedule = RegularizationSchedule::new(c.eps, c.delta)?;
            let model = filter_train(
                &fit,
                &kx.with_bandwidth_scaled(c.beta),
                &ky.with_bandwidth_scaled(c.beta),
                schedule,
                low_rank,
            )?;
            let r = filter_run(&model, &held.observations, method)?;
            state_mse(&r.estimates, held_states)
        };
        match run() {
            Ok(s) if s.is_finite() => s,
            _ => f64::INFINITY,
        }
    });
    let mut best = 0;
    for g in 1..grid.len() {
        if scores[g] < scores[best] || (scores[g] == scores[best] && grid[g].eps > grid[best].eps) {
            best = g;
        }
    }
    if !scores[best].is_finite() {
        return Err(KbrError::numeric(
            "every filter candidate failed",
            grid[best].eps,
            f64::INFINITY,
        ));
    }
    Ok(FilterValidation {
        best: grid[best],
        best_index: best,
        scores,
    })
}

/// Dynamics and observation model with Jacobians, for the EKF.
pub trait DifferentiableModel {
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn transition(&self, x: &DVector<f64>) -> DVector<f64>;
    fn transition_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
    fn observe(&self, x: &DVector<f64>) -> DVector<f64>;
    fn observation_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
    fn process_noise(&self) -> DMatrix<f64>;
    fn observation_noise(&self) -> DMatrix<f64>;
}

/// `x' = F x + w`, `y = H x + v`, `w ~ N(0, Q)`, `v ~ N(0, R)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDynamics {
    pub f: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl LinearDynamics {
    pub fn new(f: DMatrix<f64>, h: DMatrix<f64>, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let d = f.nrows();
        let ok = f.is_square()
            && h.ncols() == d
            && q.shape() == (d, d)
            && r.shape() == (h.nrows(), h.nrows());
        if !ok {
            return Err(KbrError::input("linear model matrices have inconsistent shapes"));
        }
        Ok(Self { f, h, q, r })
    }
}

impl DifferentiableModel for LinearDynamics {
    fn state_dim(&self) -> usize {
        self.f.nrows()
    }
    fn obs_dim(&self) -> usize {
        self.h.nrows()
    }
    fn transition(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.f * x
    }
    fn transition_jacobian(&self, _: &DVector<f64>) -> DMatrix<f64> {
        self.f.clone()
    }
    fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.h * x
    }
    fn observation_jacobian(&self, _: &DVector<f64>) -> DMatrix<f64> {
        self.h.clone()
    }
    fn process_noise(&self) -> DMatrix<f64> {
        self.q.clone()
    }
    fn observation_noise(&self) -> DMatrix<f64> {
        self.r.clone()
    }
}

/// Symmetrizes `p`, zeroes eigenvalues that are negative only by round-off,
/// and fails if a clearly negative eigenvalue remains.
pub(crate) fn clean_covariance(p: DMatrix<f64>) -> Result<DMatrix<f64>> {
    if p.iter().any(|v| !v.is_finite()) {
        return Err(KbrError::numeric("covariance is not finite", 0.0, f64::INFINITY));
    }
    let sym = (&p + p.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-9 * scale.max(f64::MIN_POSITIVE);
    let min = eig.eigenvalues.min();
    if min >= 0.0 {
        return Ok(sym);
    }
    if min < -tol {
        return Err(KbrError::numeric(
            format!("covariance is indefinite (eigenvalue {min:e})"),
            0.0,
            f64::INFINITY,
        ));
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose())
}

/// One extended Kalman filter predict/update step from the posterior at
/// time `t - 1` to the posterior at `t` given `y`.
pub fn ekf_step<M: DifferentiableModel + ?Sized>(
    model: &M,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    y: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = model.state_dim();
    if mean.len() != d || cov.shape() != (d, d) || y.len() != model.obs_dim() {
        return Err(KbrError::input("EKF state or observation has the wrong shape"));
    }
    let f = model.transition_jacobian(mean);
    let m_pred = model.transition(mean);
    let p_pred = &f * cov * f.transpose() + model.process_noise();
    let h = model.observation_jacobian(&m_pred);
    let s = &h * &p_pred * h.transpose() + model.observation_noise();
    let s_inv = s
        .clone()
        .cholesky()
        .ok_or_else(|| KbrError::numeric("innovation covariance not positive definite", 0.0, f64::INFINITY))?
        .inverse();
    let gain = &p_pred * h.transpose() * s_inv;
    let innov = DVector::from_column_slice(y) - model.observe(&m_pred);
    let m = &m_pred + &gain * innov;
    let p = (DMatrix::identity(d, d) - &gain * &h) * &p_pred;
    if m.iter().any(|v| !v.is_finite()) {
        return Err(KbrError::numeric("EKF mean is not finite", 0.0, f64::INFINITY));
    }
    Ok((m, clean_covariance(p)?))
}

/// Runs the EKF over `observations` from the given posterior at time 1,
/// returning the means for times `1..=len` (the first is `mean0` itself).
pub fn ekf_run<M: DifferentiableModel + ?Sized>(
    model: &M,
    mean0: DVector<f64>,
    cov0: DMatrix<f64>,
    observations: &PointSet,
) -> Result<PointSet> {
    let mut out = Vec::with_capacity(observations.len() * mean0.len());
    let (mut m, mut p) = (mean0, cov0);
    out.extend(m.iter());
    for t in 1..observations.len() {
        let (m2, p2) = ekf_step(model, &m, &p, observations.point(t))?;
        m = m2;
        p = p2;
        out.extend(m.iter());
    }
    PointSet::from_flat(out, m.len())
}
