//! Bandwidth heuristics and K-fold cross-validation of KBR hyperparameters.
//!
//! The CV criterion treats the prior as the marginal of `X`: averaging the
//! posterior embeddings over the held-out `Y_j` should then reproduce the
//! held-out empirical embedding of `X`. The score for one fold is the squared
//! RKHS distance between the two, expanded through Gram matrices.

use std::io::Write;

use nalgebra::DVector;
use rand::seq::SliceRandom;

use crate::embeddings::{empirical_mean_embedding, JointSample, Space};
use crate::error::{KbrError, Result};
use crate::exec::Exec;
use crate::kbr::build_posterior_operator;
use crate::kernels::{gram_matrix, gram_symmetric, Kernel};
use crate::linalg::RegularizationSchedule;
use crate::points::{dist, PointSet};

/// Median of all pairwise Euclidean distances (lower median for an even count).
pub fn median_bandwidth(points: &PointSet) -> Result<f64> {
    let n = points.len();
    if n < 2 {
        return Err(KbrError::input("median heuristic needs at least two points"));
    }
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        let pi = points.point(i);
        for j in (i + 1)..n {
            d.push(dist(pi, points.point(j)));
        }
    }
    let mid = (d.len() - 1) / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    let m = *m;
    if m <= 0.0 {
        return Err(KbrError::Degenerate(
            "median pairwise distance is zero (points identical)".into(),
        ));
    }
    Ok(m)
}

/// One hyperparameter candidate: bandwidth multiplier and regularizers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub beta: f64,
    pub eps: f64,
    pub delta: f64,
}

/// `beta in {0.25, 0.5, 1, 2, 4}`, `eps in {1e-4, 1e-3, 1e-2, 1e-1} / n`,
/// `delta = 2 eps`.
pub fn default_grid(n: usize) -> Vec<GridPoint> {
    let mut g = Vec::new();
    for &beta in &[0.25, 0.5, 1.0, 2.0, 4.0] {
        for &e in &[1e-4, 1e-3, 1e-2, 1e-1] {
            let eps = e / n as f64;
            g.push(GridPoint {
                beta,
                eps,
                delta: 2.0 * eps,
            });
        }
    }
    g
}

/// Scale on which the `delta` of a grid point is stated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeltaScale {
    /// Used as given with the prior weights `mu`.
    #[default]
    Raw,
    /// Stated for `mu / m` with `m` the training size of the fold; see
    /// [`RegularizationSchedule::per_sample`].
    PerSample,
}

/// Folds and candidate grid for K-fold cross-validation.
#[derive(Debug, Clone)]
pub struct CvPlan {
    pub folds: Vec<Vec<usize>>,
    pub grid: Vec<GridPoint>,
    pub seed: u64,
    pub delta_scale: DeltaScale,
}

impl DeltaScale {
    /// Schedule for a prior-weight vector over `n` training points.
    pub fn schedule(self, eps: f64, delta: f64, n: usize) -> Result<RegularizationSchedule> {
        match self {
            DeltaScale::Raw => RegularizationSchedule::new(eps, delta),
            DeltaScale::PerSample => RegularizationSchedule::per_sample(eps, delta, n),
        }
    }
}

impl CvPlan {
    /// Random partition of `0..n` into `k` folds whose sizes differ by at most one.
    pub fn new(n: usize, k: usize, grid: Vec<GridPoint>, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(KbrError::input("cross-validation needs K >= 2"));
        }
        if n < 2 * k {
            return Err(KbrError::input(format!(
                "cross-validation needs n >= 2K (n={n}, K={k})"
            )));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut crate::rng::substream(seed, "cv-folds"));
        let mut folds = vec![Vec::new(); k];
        for (pos, i) in idx.into_iter().enumerate() {
            folds[pos % k].push(i);
        }
        for f in folds.iter_mut() {
            f.sort_unstable();
        }
        Ok(Self {
            folds,
            grid,
            seed,
            delta_scale: DeltaScale::Raw,
        })
    }

    pub fn with_delta_scale(mut self, scale: DeltaScale) -> Self {
        self.delta_scale = scale;
        self
    }

    pub fn k(&self) -> usize {
        self.folds.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvRow {
    pub fold: usize,
    pub grid_index: usize,
    pub point: GridPoint,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct CvResult {
    pub best: GridPoint,
    pub best_index: usize,
    /// Sum of fold scores per grid point (infinite when a fit failed).
    pub totals: Vec<f64>,
    pub table: Vec<CvRow>,
}

impl CvResult {
    /// CSV with columns `fold,beta,eps,delta,score`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["fold", "beta", "eps", "delta", "score"])?;
        for r in &self.table {
            wtr.write_record([
                r.fold.to_string(),
                r.point.beta.to_string(),
                r.point.eps.to_string(),
                r.point.delta.to_string(),
                r.score.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Held-out score of one candidate on one fold.
pub fn fold_score(
    joint: &JointSample,
    held_out: &[usize],
    kx: &Kernel,
    ky: &Kernel,
    point: GridPoint,
    delta_scale: DeltaScale,
) -> Result<f64> {
    let n = joint.len();
    let mut mask = vec![false; n];
    for &i in held_out {
        mask[i] = true;
    }
    let train_idx: Vec<usize> = (0..n).filter(|&i| !mask[i]).collect();
    let train = joint.select(&train_idx);
    let test = joint.select(held_out);
    let t = held_out.len() as f64;

    let prior = empirical_mean_embedding(&train.x, Space::X)?;
    let schedule = delta_scale.schedule(point.eps, point.delta, train.len())?;
    let op = build_posterior_operator(&train, &prior, kx, ky, schedule, None)?;
    // mean over held-out j of R k_Y(Y_j) = R (mean of the k_Y columns)
    let ky_cross = gram_matrix(ky, &train.y, &test.y)?;
    let kbar = ky_cross.column_sum() / t;
    let rho = op.apply(&kbar)?;

    let gx = gram_symmetric(kx, &train.x)?;
    let gx_cross = gram_matrix(kx, &train.x, &test.x)?;
    let gx_test = gram_symmetric(kx, &test.x)?;
    let ones = DVector::from_element(held_out.len(), 1.0 / t);
    let score = rho.dot(&(&gx * &rho)) - 2.0 * rho.dot(&(&gx_cross * &ones))
        + ones.dot(&(&gx_test * &ones));
    Ok(score)
}

/// K-fold cross-validation over `plan.grid`. Bandwidths are `beta` times
/// those of `kx` and `ky`. The lowest summed score wins; exact ties go to
/// the larger `eps`, then the lower grid index.
pub fn kbr_cross_validate(
    joint: &JointSample,
    plan: &CvPlan,
    kx: &Kernel,
    ky: &Kernel,
    exec: Exec,
) -> Result<CvResult> {
    if plan.grid.is_empty() {
        return Err(KbrError::input("cross-validation grid is empty"));
    }
    let covered: usize = plan.folds.iter().map(|f| f.len()).sum();
    if covered != joint.len() {
        return Err(KbrError::input("folds do not partition the sample"));
    }
    let k = plan.k();
    let jobs = plan.grid.len() * k;
    let scores = exec.map(jobs, |job| {
        let (g, f) = (job / k, job % k);
        let p = plan.grid[g];
        let kxb = kx.with_bandwidth_scaled(p.beta);
        let kyb = ky.with_bandwidth_scaled(p.beta);
        match fold_score(joint, &plan.folds[f], &kxb, &kyb, p, plan.delta_scale) {
            Ok(s) if s.is_finite() => s,
            Ok(_) | Err(KbrError::Numeric { .. }) => f64::INFINITY,
            Err(_) => f64::NAN,
        }
    });
    if scores.iter().any(|s| s.is_nan()) {
        return Err(KbrError::input("cross-validation fit rejected its inputs"));
    }
    let mut table = Vec::with_capacity(jobs);
    let mut totals = vec![0.0; plan.grid.len()];
    for (job, &s) in scores.iter().enumerate() {
        let (g, f) = (job / k, job % k);
        totals[g] += s;
        table.push(CvRow {
            fold: f,
            grid_index: g,
            point: plan.grid[g],
            score: s,
        });
    }
    let mut best = 0;
    for g in 1..totals.len() {
        let better = totals[g] < totals[best]
            || (totals[g] == totals[best] && plan.grid[g].eps > plan.grid[best].eps);
        if better {
            best = g;
        }
    }
    if !totals[best].is_finite() {
        return Err(KbrError::numeric(
            "every cross-validation candidate failed",
            plan.grid[best].delta,
            f64::INFINITY,
        ));
    }
    Ok(CvResult {
        best: plan.grid[best],
        best_index: best,
        totals,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn median_examples() {
        assert_eq!(median_bandwidth(&PointSet::from_scalars(&[0.0, 1.0]).unwrap()).unwrap(), 1.0);
        assert_eq!(
            median_bandwidth(&PointSet::from_scalars(&[0.0, 1.0, 3.0]).unwrap()).unwrap(),
            2.0
        );
        // six distances {1,1,1,2,2,3}: lower median 1
        assert_eq!(
            median_bandwidth(&PointSet::from_scalars(&[0.0, 1.0, 2.0, 3.0]).unwrap()).unwrap(),
            1.0
        );
    }

    #[test]
    fn median_errors() {
        assert!(median_bandwidth(&PointSet::from_scalars(&[1.0]).unwrap()).is_err());
        assert!(matches!(
            median_bandwidth(&PointSet::from_scalars(&[2.0, 2.0, 2.0]).unwrap()),
            Err(KbrError::Degenerate(_))
        ));
    }

    #[test]
    fn median_matches_enumeration_oracle() {
        let mut rng = crate::rng::seeded(200);
        let flat: Vec<f64> = (0..400).map(|_| rng.sample(StandardNormal)).collect();
        let pts = PointSet::from_flat(flat, 2).unwrap();
        let mut all = Vec::new();
        for i in 0..200 {
            for j in (i + 1)..200 {
                all.push(dist(pts.point(i), pts.point(j)));
            }
        }
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let oracle = all[(all.len() - 1) / 2];
        assert_eq!(median_bandwidth(&pts).unwrap(), oracle);
    }

    #[test]
    fn folds_partition_and_balance() {
        let plan = CvPlan::new(23, 5, default_grid(23), 1).unwrap();
        let mut seen: Vec<usize> = plan.folds.iter().flatten().cloned().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..23).collect::<Vec<_>>());
        let sizes: Vec<usize> = plan.folds.iter().map(|f| f.len()).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let again = CvPlan::new(23, 5, default_grid(23), 1).unwrap();
        assert_eq!(plan.folds, again.folds);
        assert!(CvPlan::new(9, 5, vec![], 1).is_err());
        assert!(CvPlan::new(9, 1, vec![], 1).is_err());
    }

    fn toy_joint(n: usize, seed: u64) -> JointSample {
        let mut rng = crate::rng::seeded(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| v + 0.5 * rng.random::<f64>())
            .collect();
        JointSample::new(
            PointSet::from_scalars(&x).unwrap(),
            PointSet::from_scalars(&y).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn single_candidate_is_returned() {
        let j = toy_joint(30, 1);
        let p = GridPoint {
            beta: 1.0,
            eps: 0.01,
            delta: 0.02,
        };
        let plan = CvPlan::new(30, 3, vec![p], 4).unwrap();
        let k = Kernel::gaussian(1.0).unwrap();
        let r = kbr_cross_validate(&j, &plan, &k, &k, Exec::Sequential).unwrap();
        assert_eq!(r.best, p);
        assert_eq!(r.table.len(), 3);
        assert!(r.table.iter().all(|row| row.score >= -1e-12));
    }

    #[test]
    fn empty_grid_rejected() {
        let j = toy_joint(30, 1);
        let plan = CvPlan::new(30, 3, vec![], 4).unwrap();
        let k = Kernel::gaussian(1.0).unwrap();
        assert!(kbr_cross_validate(&j, &plan, &k, &k, Exec::Sequential).is_err());
    }

    #[test]
    fn ties_prefer_larger_eps() {
        let j = toy_joint(20, 2);
        let a = GridPoint {
            beta: 1.0,
            eps: 0.01,
            delta: 0.02,
        };
        let plan = CvPlan::new(20, 2, vec![a, a, GridPoint { eps: 0.011, ..a }], 3).unwrap();
        let k = Kernel::gaussian(1.0).unwrap();
        let r = kbr_cross_validate(&j, &plan, &k, &k, Exec::Sequential).unwrap();
        // identical candidates tie; the lower index of the two wins
        assert_eq!(r.totals[0], r.totals[1]);
        assert_ne!(r.best_index, 1);
    }

    #[test]
    fn scores_independent_of_execution_and_fold_order() {
        let j = toy_joint(40, 3);
        let k = Kernel::gaussian(0.8).unwrap();
        let plan = CvPlan::new(40, 4, default_grid(40)[..6].to_vec(), 9).unwrap();
        let a = kbr_cross_validate(&j, &plan, &k, &k, Exec::Sequential).unwrap();
        let b = kbr_cross_validate(&j, &plan, &k, &k, Exec::Parallel).unwrap();
        assert_eq!(a.totals, b.totals);
        let mut rev = plan.clone();
        rev.folds.reverse();
        let c = kbr_cross_validate(&j, &rev, &k, &k, Exec::Sequential).unwrap();
        for (x, y) in a.totals.iter().zip(&c.totals) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
        assert_eq!(a.best_index, c.best_index);
    }

    #[test]
    fn score_table_csv_columns() {
        let j = toy_joint(20, 5);
        let k = Kernel::gaussian(1.0).unwrap();
        let plan = CvPlan::new(20, 2, default_grid(20)[..2].to_vec(), 1).unwrap();
        let r = kbr_cross_validate(&j, &plan, &k, &k, Exec::Sequential).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("fold,beta,eps,delta,score\n"));
        assert_eq!(text.lines().count(), 1 + 4);
    }
}
