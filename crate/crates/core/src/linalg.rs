//! Regularized solves, pivoted incomplete Cholesky and Woodbury inversion.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, LU};

use crate::error::{KbrError, Result};
use crate::kernels::Kernel;
use crate::points::PointSet;

/// Jitter added once when a Cholesky pivot underflows.
pub const JITTER: f64 = 1e-12;

/// Tikhonov constants: `eps` regularizes the Gram inverse that produces the
/// prior weights, `delta` the squared operator inverse of the posterior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizationSchedule {
    eps: f64,
    delta: f64,
}

impl RegularizationSchedule {
    pub fn new(eps: f64, delta: f64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) || !(delta > 0.0 && delta.is_finite()) {
            return Err(KbrError::input(format!(
                "regularization constants must be positive and finite (eps={eps}, delta={delta})"
            )));
        }
        Ok(Self { eps, delta })
    }

    /// `eps = 0.01 / n`, `delta = 2 eps`.
    pub fn for_sample_size(n: usize) -> Self {
        let eps = 0.01 / n.max(1) as f64;
        Self {
            eps,
            delta: 2.0 * eps,
        }
    }

    /// `delta` stated for the per-sample weights `mu / n`, which sum to about
    /// one. Since `R` is unchanged under `(mu, delta) -> (c mu, c^2 delta)`,
    /// this stores `delta * n^2` for use with the unscaled `mu`.
    pub fn per_sample(eps: f64, delta: f64, n: usize) -> Result<Self> {
        let nf = n.max(1) as f64;
        Self::new(eps, delta * nf * nf)
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

fn check_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(KbrError::input(format!("{what} has non-finite entries")))
    }
}

/// Ratio of extreme singular values; infinite when singular.
pub fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() || !m.iter().all(|v| v.is_finite()) {
        return f64::INFINITY;
    }
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Cholesky factorization of `G + cI`, reusable across right-hand sides.
#[derive(Debug, Clone)]
pub struct RegularizedSolver {
    chol: Cholesky<f64, Dyn>,
}

impl RegularizedSolver {
    pub fn new(g: &DMatrix<f64>, c: f64) -> Result<Self> {
        if !g.is_square() {
            return Err(KbrError::input("regularized solve needs a square matrix"));
        }
        if !(c > 0.0 && c.is_finite()) {
            return Err(KbrError::input(format!("shift must be positive, got {c}")));
        }
        check_finite(g, "gram matrix")?;
        let n = g.nrows();
        let mut a = g.clone();
        for i in 0..n {
            a[(i, i)] += c;
        }
        if let Some(chol) = Cholesky::new(a.clone()) {
            return Ok(Self { chol });
        }
        for i in 0..n {
            a[(i, i)] += JITTER;
        }
        match Cholesky::new(a.clone()) {
            Some(chol) => Ok(Self { chol }),
            None => Err(KbrError::numeric(
                "cholesky of the shifted gram matrix failed",
                c,
                condition_estimate(&a),
            )),
        }
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }
}

/// `(G + cI)^{-1} B` through a Cholesky factorization.
pub fn solve_regularized(g: &DMatrix<f64>, c: f64, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if b.nrows() != g.nrows() {
        return Err(KbrError::input(format!(
            "right-hand side has {} rows, matrix has {}",
            b.nrows(),
            g.nrows()
        )));
    }
    check_finite(b, "right-hand side")?;
    Ok(RegularizedSolver::new(g, c)?.solve(b))
}

/// Pivoted incomplete Cholesky factor, `G ~ gamma * gamma^T`.
#[derive(Debug, Clone)]
pub struct LowRankFactor {
    pub gamma: DMatrix<f64>,
    /// Pivot indices in selection order.
    pub pivots: Vec<usize>,
    /// Trace of the unexplained diagonal, `sum_i (G_ii - sum_k gamma_ik^2)`.
    pub residual_bound: f64,
}

impl LowRankFactor {
    pub fn rank(&self) -> usize {
        self.gamma.ncols()
    }

    pub fn n(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.gamma * self.gamma.transpose()
    }

    /// Rows `range` of the factor, as a factor for that sub-block of `G`.
    pub fn rows(&self, range: std::ops::Range<usize>) -> DMatrix<f64> {
        self.gamma.rows(range.start, range.len()).into_owned()
    }

    /// Solver for `(gamma gamma^T + cI)^{-1}`.
    pub fn shifted_solver(&self, c: f64) -> Result<WoodburySolver> {
        if !(c > 0.0) {
            return Err(KbrError::input(format!("shift must be positive, got {c}")));
        }
        WoodburySolver::new(c, self.gamma.clone(), self.gamma.transpose())
    }
}

/// Greedy pivoted incomplete Cholesky of the PSD matrix given by `entry(i, j)`.
///
/// Pivots on the largest residual diagonal, lowest index on ties. Stops once
/// the residual trace is `<= tol` or `max_rank` columns exist. Only the
/// diagonal and one column per pivot are evaluated.
pub fn incomplete_cholesky<F>(entry: F, n: usize, tol: f64, max_rank: usize) -> Result<LowRankFactor>
where
    F: Fn(usize, usize) -> f64,
{
    if !(tol >= 0.0) {
        return Err(KbrError::input(format!("tolerance must be >= 0, got {tol}")));
    }
    let max_rank = max_rank.min(n);
    let mut diag: Vec<f64> = (0..n).map(|i| entry(i, i)).collect();
    if diag.iter().any(|v| !v.is_finite()) {
        return Err(KbrError::input("matrix diagonal has non-finite entries"));
    }
    let scale = diag.iter().cloned().fold(1.0, f64::max);
    if let Some(i) = diag.iter().position(|&v| v < -1e-10 * scale) {
        return Err(KbrError::numeric(
            format!("negative diagonal entry {} at {i}: input not PSD", diag[i]),
            0.0,
            f64::NAN,
        ));
    }
    let mut pivoted = vec![false; n];
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(max_rank);
    let mut pivots = Vec::with_capacity(max_rank);

    let residual = |d: &[f64]| d.iter().map(|v| v.max(0.0)).sum::<f64>();
    while cols.len() < max_rank {
        if residual(&diag) <= tol {
            break;
        }
        let mut p = usize::MAX;
        let mut best = 0.0;
        for (i, &d) in diag.iter().enumerate() {
            if !pivoted[i] && d > best {
                best = d;
                p = i;
            }
        }
        if p == usize::MAX {
            break;
        }
        let piv = best.sqrt();
        let k = cols.len();
        let mut col = vec![0.0; n];
        col[p] = piv;
        for i in 0..n {
            if pivoted[i] || i == p {
                continue;
            }
            let mut v = entry(i, p);
            for c in cols.iter() {
                v -= c[i] * c[p];
            }
            let v = v / piv;
            col[i] = v;
            diag[i] -= v * v;
            if diag[i] < -1e-10 * scale {
                return Err(KbrError::numeric(
                    format!(
                        "residual diagonal {} at index {i} after {} pivots: input not PSD",
                        diag[i],
                        k + 1
                    ),
                    0.0,
                    f64::NAN,
                ));
            }
        }
        diag[p] = 0.0;
        pivoted[p] = true;
        pivots.push(p);
        cols.push(col);
    }
    let r = cols.len();
    let gamma = DMatrix::from_fn(n, r, |i, k| cols[k][i]);
    let residual_bound = diag
        .iter()
        .zip(&pivoted)
        .filter(|(_, &p)| !p)
        .map(|(d, _)| *d)
        .sum::<f64>();
    Ok(LowRankFactor {
        gamma,
        pivots,
        residual_bound,
    })
}

/// Default stopping rule: `tol = 1e-6 * trace(G)`, `max_rank = min(n, 100)`.
pub fn default_ichol_params(n: usize, trace: f64) -> (f64, usize) {
    (1e-6 * trace, n.min(100))
}

/// Incomplete Cholesky of the Gram matrix of `points` under `k`, evaluated lazily.
pub fn incomplete_cholesky_gram(
    k: &Kernel,
    points: &PointSet,
    tol: Option<f64>,
    max_rank: Option<usize>,
) -> Result<LowRankFactor> {
    if points.is_empty() {
        return Err(KbrError::input("incomplete cholesky of an empty point list"));
    }
    k.check_dim(points.dim())?;
    let n = points.len();
    let trace: f64 = points.iter().map(|p| k.eval(p, p)).sum();
    let (dtol, drank) = default_ichol_params(n, trace);
    incomplete_cholesky(
        |i, j| k.eval(points.point(i), points.point(j)),
        n,
        tol.unwrap_or(dtol),
        max_rank.unwrap_or(drank),
    )
}

/// Solver for `(d I + U V)^{-1}` that only factorizes the `r x r` matrix
/// `d I_r + V U`.
#[derive(Debug, Clone)]
pub struct WoodburySolver {
    d: f64,
    u: DMatrix<f64>,
    v: DMatrix<f64>,
    inner: LU<f64, Dyn, Dyn>,
}

impl WoodburySolver {
    pub fn new(d: f64, u: DMatrix<f64>, v: DMatrix<f64>) -> Result<Self> {
        if !(d > 0.0 && d.is_finite()) {
            return Err(KbrError::input(format!("diagonal scale must be positive, got {d}")));
        }
        if u.ncols() != v.nrows() || u.nrows() != v.ncols() {
            return Err(KbrError::input(format!(
                "woodbury factors have incompatible shapes {}x{} and {}x{}",
                u.nrows(),
                u.ncols(),
                v.nrows(),
                v.ncols()
            )));
        }
        check_finite(&u, "woodbury U")?;
        check_finite(&v, "woodbury V")?;
        let r = u.ncols();
        let mut inner = &v * &u;
        for i in 0..r {
            inner[(i, i)] += d;
        }
        let lu = LU::new(inner.clone());
        if r > 0 && !lu.is_invertible() {
            return Err(KbrError::numeric(
                "singular inner woodbury system",
                d,
                condition_estimate(&inner),
            ));
        }
        if r > 0 {
            let cond = condition_estimate(&inner);
            if !(cond < 1e15) {
                return Err(KbrError::numeric("singular inner woodbury system", d, cond));
            }
        }
        Ok(Self { d, u, v, inner: lu })
    }

    pub fn n(&self) -> usize {
        self.u.nrows()
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        if self.u.ncols() == 0 {
            return b / self.d;
        }
        let vb = &self.v * b;
        let t = self
            .inner
            .solve(&vb)
            .expect("inner system checked invertible at construction");
        (b - &self.u * t) / self.d
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        if self.u.ncols() == 0 {
            return b / self.d;
        }
        let vb = &self.v * b;
        let t = self
            .inner
            .solve(&vb)
            .expect("inner system checked invertible at construction");
        (b - &self.u * t) / self.d
    }
}

/// `(d I + U C V)^{-1} B`. `C` (identity when `None`) is absorbed into `U`,
/// so a singular `C` is never inverted.
pub fn solve_woodbury(
    d: f64,
    u: &DMatrix<f64>,
    c: Option<&DMatrix<f64>>,
    v: &DMatrix<f64>,
    b: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let u = match c {
        Some(c) => {
            if c.nrows() != u.ncols() || c.ncols() != v.nrows() {
                return Err(KbrError::input("woodbury C has the wrong shape"));
            }
            u * c
        }
        None => u.clone(),
    };
    if b.nrows() != u.nrows() {
        return Err(KbrError::input(format!(
            "right-hand side has {} rows, system has {}",
            b.nrows(),
            u.nrows()
        )));
    }
    check_finite(b, "right-hand side")?;
    Ok(WoodburySolver::new(d, u, v.clone())?.solve(b))
}
