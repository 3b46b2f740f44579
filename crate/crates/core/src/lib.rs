//! Kernel Bayes' rule: nonparametric Bayesian inference with positive
//! definite kernels, plus the filtering, baseline and model-selection
//! machinery used by the experiment CLI.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod embeddings;
pub mod error;
pub mod exec;
pub mod experiments;
pub mod kbr;
pub mod kernels;
pub mod linalg;
pub mod modelsel;
pub mod oracles;
pub mod points;
pub mod rng;
pub mod statespace;

pub use embeddings::{JointSample, Space, WeightedSample};
pub use error::{KbrError, Result};
pub use exec::Exec;
pub use kbr::{build_posterior_operator, PosteriorOperator};
pub use kernels::{Kernel, KernelSpec};
pub use linalg::RegularizationSchedule;
pub use points::PointSet;
