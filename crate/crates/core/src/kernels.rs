//! Positive definite kernels and Gram matrices.
//!
//! Characteristic-ness of a kernel (injectivity of the mean embedding) is a
//! population property and is not checked here; the Gaussian kernel is
//! characteristic on Euclidean space, the trace kernel is not.

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::error::{KbrError, Result};
use crate::exec::Exec;
use crate::modelsel::median_bandwidth;
use crate::points::{sq_dist, PointSet};

#[derive(Debug, Clone, PartialEq)]
pub enum Kernel {
    /// `exp(-|x - y|^2 / (2 sigma^2))`.
    Gaussian { bandwidth: f64 },
    /// `Tr[A B^T]` for `rows x cols` matrices stored row-major.
    Trace { rows: usize, cols: usize },
    /// `k_left(x_1, y_1) * k_right(x_2, y_2)` where the first `left_dim`
    /// coordinates of a point belong to the left factor.
    Product {
        left: Box<Kernel>,
        right: Box<Kernel>,
        left_dim: usize,
    },
}

impl Kernel {
    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(KbrError::input(format!(
                "gaussian bandwidth must be positive and finite, got {bandwidth}"
            )));
        }
        Ok(Kernel::Gaussian { bandwidth })
    }

    pub fn trace(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(KbrError::input("trace kernel needs a non-empty matrix shape"));
        }
        Ok(Kernel::Trace { rows, cols })
    }

    pub fn product(left: Kernel, right: Kernel, left_dim: usize) -> Result<Self> {
        if left_dim == 0 {
            return Err(KbrError::input("product kernel needs left_dim > 0"));
        }
        if let Some(d) = left.fixed_dim() {
            if d != left_dim {
                return Err(KbrError::input(format!(
                    "left factor expects dimension {d}, left_dim is {left_dim}"
                )));
            }
        }
        Ok(Kernel::Product {
            left: Box::new(left),
            right: Box::new(right),
            left_dim,
        })
    }

    /// Gaussian bandwidth, if this is a Gaussian kernel.
    pub fn bandwidth(&self) -> Option<f64> {
        match self {
            Kernel::Gaussian { bandwidth } => Some(*bandwidth),
            _ => None,
        }
    }

    /// Same kernel with every Gaussian bandwidth multiplied by `beta`.
    pub fn with_bandwidth_scaled(&self, beta: f64) -> Kernel {
        match self {
            Kernel::Gaussian { bandwidth } => Kernel::Gaussian {
                bandwidth: bandwidth * beta,
            },
            Kernel::Trace { .. } => self.clone(),
            Kernel::Product {
                left,
                right,
                left_dim,
            } => Kernel::Product {
                left: Box::new(left.with_bandwidth_scaled(beta)),
                right: Box::new(right.with_bandwidth_scaled(beta)),
                left_dim: *left_dim,
            },
        }
    }

    /// Point dimension required by the kernel, when it is fixed.
    pub fn fixed_dim(&self) -> Option<usize> {
        match self {
            Kernel::Gaussian { .. } => None,
            Kernel::Trace { rows, cols } => Some(rows * cols),
            Kernel::Product {
                right, left_dim, ..
            } => right.fixed_dim().map(|d| d + left_dim),
        }
    }

    /// Checks that points of dimension `dim` are acceptable.
    pub fn check_dim(&self, dim: usize) -> Result<()> {
        let ok = match self {
            Kernel::Gaussian { .. } => dim > 0,
            Kernel::Trace { rows, cols } => dim == rows * cols,
            Kernel::Product {
                left,
                right,
                left_dim,
            } => {
                dim > *left_dim
                    && left.check_dim(*left_dim).is_ok()
                    && right.check_dim(dim - left_dim).is_ok()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(KbrError::input(format!(
                "points of dimension {dim} do not fit kernel {self:?}"
            )))
        }
    }

    /// `k(x, y)` with a dimension check.
    pub fn evaluate(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != y.len() {
            return Err(KbrError::input(format!(
                "dimension mismatch: {} vs {}",
                x.len(),
                y.len()
            )));
        }
        self.check_dim(x.len())?;
        Ok(self.eval(x, y))
    }

    /// `k(x, y)` without validation; callers guarantee matching shapes.
    #[inline]
    pub(crate) fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            Kernel::Gaussian { bandwidth } => {
                (-sq_dist(x, y) / (2.0 * bandwidth * bandwidth)).exp()
            }
            Kernel::Trace { .. } => x.iter().zip(y).map(|(a, b)| a * b).sum(),
            Kernel::Product {
                left,
                right,
                left_dim,
            } => {
                let (x1, x2) = x.split_at(*left_dim);
                let (y1, y2) = y.split_at(*left_dim);
                left.eval(x1, y1) * right.eval(x2, y2)
            }
        }
    }

    /// Column `(k(x_i, y))_i`.
    pub fn column(&self, xs: &PointSet, y: &[f64]) -> Result<DVector<f64>> {
        if xs.dim() != y.len() {
            return Err(KbrError::input(format!(
                "query has dimension {} but sample has {}",
                y.len(),
                xs.dim()
            )));
        }
        self.check_dim(y.len())?;
        Ok(DVector::from_iterator(
            xs.len(),
            xs.iter().map(|x| self.eval(x, y)),
        ))
    }
}

/// `|X| x |Z|` matrix of kernel evaluations.
pub fn gram_matrix(k: &Kernel, xs: &PointSet, zs: &PointSet) -> Result<DMatrix<f64>> {
    gram_matrix_with(Exec::default(), k, xs, zs)
}

pub fn gram_matrix_with(
    exec: Exec,
    k: &Kernel,
    xs: &PointSet,
    zs: &PointSet,
) -> Result<DMatrix<f64>> {
    if xs.is_empty() || zs.is_empty() {
        return Err(KbrError::input("gram matrix of an empty point list"));
    }
    if xs.dim() != zs.dim() {
        return Err(KbrError::input(format!(
            "dimension mismatch: {} vs {}",
            xs.dim(),
            zs.dim()
        )));
    }
    k.check_dim(xs.dim())?;
    let (n, m) = (xs.len(), zs.len());
    let rows = exec.map(n, |i| {
        let xi = xs.point(i);
        zs.iter().map(|z| k.eval(xi, z)).collect::<Vec<_>>()
    });
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

/// Symmetric Gram matrix of one point set: the upper triangle is computed and
/// mirrored, so the result equals its transpose bit for bit.
pub fn gram_symmetric(k: &Kernel, xs: &PointSet) -> Result<DMatrix<f64>> {
    gram_symmetric_with(Exec::default(), k, xs)
}

pub fn gram_symmetric_with(exec: Exec, k: &Kernel, xs: &PointSet) -> Result<DMatrix<f64>> {
    if xs.is_empty() {
        return Err(KbrError::input("gram matrix of an empty point list"));
    }
    k.check_dim(xs.dim())?;
    let n = xs.len();
    let upper = exec.map(n, |i| {
        let xi = xs.point(i);
        (i..n).map(|j| k.eval(xi, xs.point(j))).collect::<Vec<_>>()
    });
    let mut g = DMatrix::zeros(n, n);
    for (i, row) in upper.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            let j = i + off;
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    Ok(g)
}

/// Bandwidth entry in a kernel config: a number, `"median"`, or `"median*<factor>"`.
#[derive(Debug, Clone, PartialEq)]
pub enum BandwidthSpec {
    Fixed(f64),
    Median { factor: f64 },
}

impl BandwidthSpec {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "median" {
            return Ok(BandwidthSpec::Median { factor: 1.0 });
        }
        if let Some(rest) = s.strip_prefix("median*") {
            let factor: f64 = rest
                .trim()
                .parse()
                .map_err(|_| KbrError::Config(format!("bad median factor in {s:?}")))?;
            if !(factor > 0.0) {
                return Err(KbrError::Config(format!("median factor must be positive: {s:?}")));
            }
            return Ok(BandwidthSpec::Median { factor });
        }
        let v: f64 = s
            .parse()
            .map_err(|_| KbrError::Config(format!("unrecognized bandwidth {s:?}")))?;
        if !(v > 0.0) {
            return Err(KbrError::Config(format!("bandwidth must be positive: {s:?}")));
        }
        Ok(BandwidthSpec::Fixed(v))
    }

    pub fn resolve(&self, points: &PointSet) -> Result<f64> {
        match self {
            BandwidthSpec::Fixed(v) => Ok(*v),
            BandwidthSpec::Median { factor } => Ok(factor * median_bandwidth(points)?),
        }
    }
}

impl<'de> Deserialize<'de> for BandwidthSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) if v > 0.0 => Ok(BandwidthSpec::Fixed(v)),
            Raw::Num(v) => Err(serde::de::Error::custom(format!(
                "bandwidth must be positive, got {v}"
            ))),
            Raw::Text(s) => BandwidthSpec::parse(&s).map_err(serde::de::Error::custom),
        }
    }
}

/// Kernel description as it appears in experiment config files.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum KernelSpec {
    Gaussian {
        bandwidth: BandwidthSpec,
    },
    Trace {
        rows: usize,
        cols: usize,
    },
    Product {
        left: Box<KernelSpec>,
        right: Box<KernelSpec>,
        left_dim: usize,
    },
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::Gaussian {
            bandwidth: BandwidthSpec::Median { factor: 1.0 },
        }
    }
}

impl KernelSpec {
    /// Builds a kernel, resolving data-dependent bandwidths against `points`.
    pub fn build(&self, points: &PointSet) -> Result<Kernel> {
        match self {
            KernelSpec::Gaussian { bandwidth } => Kernel::gaussian(bandwidth.resolve(points)?),
            KernelSpec::Trace { rows, cols } => Kernel::trace(*rows, *cols),
            KernelSpec::Product {
                left,
                right,
                left_dim,
            } => {
                if points.dim() <= *left_dim {
                    return Err(KbrError::input("product kernel split exceeds point dimension"));
                }
                let idx: Vec<usize> = (0..points.len()).collect();
                let split = |lo: usize, hi: usize| -> Result<PointSet> {
                    let mut flat = Vec::with_capacity(idx.len() * (hi - lo));
                    for p in points.iter() {
                        flat.extend_from_slice(&p[lo..hi]);
                    }
                    PointSet::from_flat(flat, hi - lo)
                };
                let l = left.build(&split(0, *left_dim)?)?;
                let r = right.build(&split(*left_dim, points.dim())?)?;
                Kernel::product(l, r, *left_dim)
            }
        }
    }

    /// Multiplies every median factor or fixed Gaussian bandwidth by `beta`.
    pub fn scaled(&self, beta: f64) -> KernelSpec {
        match self {
            KernelSpec::Gaussian { bandwidth } => KernelSpec::Gaussian {
                bandwidth: match bandwidth {
                    BandwidthSpec::Fixed(v) => BandwidthSpec::Fixed(v * beta),
                    BandwidthSpec::Median { factor } => BandwidthSpec::Median {
                        factor: factor * beta,
                    },
                },
            },
            KernelSpec::Trace { .. } => self.clone(),
            KernelSpec::Product {
                left,
                right,
                left_dim,
            } => KernelSpec::Product {
                left: Box::new(left.scaled(beta)),
                right: Box::new(right.scaled(beta)),
                left_dim: *left_dim,
            },
        }
    }
}
