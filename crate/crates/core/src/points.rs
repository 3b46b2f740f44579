//! Dense point storage shared by every module.
//!
//! Points are real vectors of a common dimension, stored row-major. Matrix
//! valued points (for the trace kernel) are flattened row-major; the shape
//! lives in the kernel that interprets them.

use crate::error::{KbrError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    data: Vec<f64>,
    dim: usize,
}

impl PointSet {
    /// Builds a set from flat row-major storage.
    pub fn from_flat(data: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(KbrError::input("point dimension must be positive"));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(KbrError::input(format!(
                "flat buffer of length {} is not a multiple of dimension {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(KbrError::input("points must be finite"));
        }
        Ok(Self { data, dim })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| KbrError::input("empty point list"))?;
        let dim = first.as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(KbrError::input(format!(
                    "point {i} has dimension {} but expected {dim}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::from_flat(data, dim)
    }

    /// One-dimensional points from scalars.
    pub fn from_scalars(values: &[f64]) -> Result<Self> {
        Self::from_flat(values.to_vec(), 1)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// Subset by index, in the given order.
    pub fn select(&self, idx: &[usize]) -> PointSet {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.point(i));
        }
        PointSet {
            data,
            dim: self.dim,
        }
    }

    /// Contiguous range of points.
    pub fn slice(&self, range: std::ops::Range<usize>) -> PointSet {
        PointSet {
            data: self.data[range.start * self.dim..range.end * self.dim].to_vec(),
            dim: self.dim,
        }
    }

    /// Weighted sum `Σ w_i p_i`.
    pub fn weighted_sum(&self, weights: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (p, &w) in self.iter().zip(weights) {
            for (o, &v) in out.iter_mut().zip(p) {
                *o += w * v;
            }
        }
        out
    }

    /// Coordinate-wise mean.
    pub fn mean(&self) -> Vec<f64> {
        let n = self.len() as f64;
        let mut m = self.weighted_sum(&vec![1.0; self.len()]);
        m.iter_mut().for_each(|v| *v /= n);
        m
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}
