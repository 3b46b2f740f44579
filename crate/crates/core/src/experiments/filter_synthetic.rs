//! Filtering the noisy rotation: the kernel filter trained on a sampled
//! trajectory against the EKF that knows the dynamics.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::exec::Exec;
use crate::linalg::RegularizationSchedule;
use crate::modelsel::median_bandwidth;
use crate::kernels::Kernel;
use crate::oracles::{simulate_rotation, RotationDynamicsConfig};
use crate::rng::substream;
use crate::statespace::{
    default_filter_grid, ekf_run, filter_run, filter_train, filter_validate, state_mse, FilterCandidate,
    PointEstimate, Trajectory,
};

use rand::Rng as _;

use super::config::{FilterSelection, FilterSyntheticConfig, PointEstimateChoice};
use super::output::{fmt_f64, stats_cells, stats_columns, summarize, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FilterMethod {
    Kbr,
    Ekf,
}

impl FilterMethod {
    pub fn name(self) -> &'static str {
        match self {
            FilterMethod::Kbr => "kbr",
            FilterMethod::Ekf => "ekf",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterRow {
    pub dataset: String,
    pub method: FilterMethod,
    pub train_len: usize,
    pub seed: u64,
    pub mse: f64,
    /// Selected bandwidth multiplier and `eps` (`NaN` for the EKF).
    pub beta: f64,
    pub eps: f64,
    /// Steps where the preimage fell back to the weighted mean.
    pub fallbacks: usize,
}

/// Data of one run: a training trajectory of `T + 1` steps and a test one.
pub struct FilterInstance {
    pub dynamics: RotationDynamicsConfig,
    pub train: Trajectory,
    pub test: Trajectory,
}

impl FilterInstance {
    pub fn draw(cfg: &FilterSyntheticConfig, dataset: &str, seed: u64) -> Result<Self> {
        let mut dynamics = RotationDynamicsConfig::preset(dataset)?;
        if let Some(s) = cfg.sigma {
            dynamics.sigma_h = s;
            dynamics.sigma_o = s;
        }
        let train_seed = substream(seed, &format!("train-{dataset}")).random::<u64>();
        let test_seed = substream(seed, &format!("test-{dataset}")).random::<u64>();
        Ok(Self {
            dynamics,
            train: simulate_rotation(&dynamics, cfg.train_len + 1, train_seed)?,
            test: simulate_rotation(&dynamics, cfg.test_len, test_seed)?,
        })
    }
}

fn point_estimate(c: PointEstimateChoice) -> PointEstimate {
    match c {
        PointEstimateChoice::Preimage => PointEstimate::Preimage,
        PointEstimateChoice::WeightedMean => PointEstimate::WeightedMean,
    }
}

/// EKF started at the first observation with covariance `sigma_o^2 I`.
pub fn ekf_mse(inst: &FilterInstance) -> Result<f64> {
    let obs = &inst.test.observations;
    let so = inst.dynamics.sigma_o.max(1e-6);
    let est = ekf_run(
        &inst.dynamics,
        DVector::from_column_slice(obs.point(0)),
        DMatrix::identity(2, 2) * (so * so),
        obs,
    )?;
    state_mse(&est, inst.test.states.as_ref().expect("simulated states"))
}

/// Kernel filter MSE with hyperparameters chosen per `cfg.selection`.
pub fn kbr_mse(
    cfg: &FilterSyntheticConfig,
    inst: &FilterInstance,
    exec: Exec,
) -> Result<(f64, FilterCandidate, usize)> {
    let states = inst.train.states.as_ref().expect("simulated states");
    let kx = Kernel::gaussian(median_bandwidth(states)?)?;
    let ky = Kernel::gaussian(median_bandwidth(&inst.train.observations)?)?;
    let rank = (cfg.rank > 0).then_some(cfg.rank);
    let method = point_estimate(cfg.point_estimate);
    let chosen = match cfg.selection {
        FilterSelection::Validate => {
            filter_validate(&inst.train, &kx, &ky, &default_filter_grid(), rank, method, exec)?.best
        }
        FilterSelection::Explicit => FilterCandidate {
            beta: cfg.beta,
            eps: cfg.eps,
            delta: 2.0 * cfg.eps,
        },
    };
    let model = filter_train(
        &inst.train,
        &kx.with_bandwidth_scaled(chosen.beta),
        &ky.with_bandwidth_scaled(chosen.beta),
        RegularizationSchedule::new(chosen.eps, chosen.delta)?,
        rank,
    )?;
    let run = filter_run(&model, &inst.test.observations, method)?;
    let mse = state_mse(&run.estimates, inst.test.states.as_ref().expect("simulated states"))?;
    Ok((mse, chosen, run.fallbacks))
}

pub fn run_instance(cfg: &FilterSyntheticConfig, dataset: &str, seed: u64, exec: Exec) -> Result<Vec<FilterRow>> {
    let inst = FilterInstance::draw(cfg, dataset, seed)?;
    let (kbr, chosen, fallbacks) = kbr_mse(cfg, &inst, exec)?;
    let ekf = ekf_mse(&inst)?;
    let row = |method, mse, beta, eps, fallbacks| FilterRow {
        dataset: dataset.to_string(),
        method,
        train_len: cfg.train_len,
        seed,
        mse,
        beta,
        eps,
        fallbacks,
    };
    Ok(vec![
        row(FilterMethod::Kbr, kbr, chosen.beta, chosen.eps, fallbacks),
        row(FilterMethod::Ekf, ekf, f64::NAN, f64::NAN, 0),
    ])
}

/// One job per `(dataset, run)`, ordered by dataset then seed.
pub fn run(cfg: &FilterSyntheticConfig, exec: Exec) -> Result<Vec<FilterRow>> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for d in &cfg.datasets {
        for r in 0..cfg.runs {
            jobs.push((d.as_str(), cfg.seed + r as u64));
        }
    }
    let results = exec.map(jobs.len(), |i| run_instance(cfg, jobs[i].0, jobs[i].1, Exec::Sequential));
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    Ok(rows)
}

pub fn runs_table(rows: &[FilterRow]) -> Table {
    let mut t = Table::new(&["dataset", "method", "T", "mse", "beta", "eps", "fallbacks"]);
    for r in rows {
        t.push(
            r.seed,
            vec![
                r.dataset.clone(),
                r.method.name().into(),
                r.train_len.to_string(),
                fmt_f64(r.mse),
                fmt_f64(r.beta),
                fmt_f64(r.eps),
                r.fallbacks.to_string(),
            ],
        );
    }
    t
}

pub fn summary_table(rows: &[FilterRow], root_seed: u64) -> Table {
    let mut header = vec!["dataset", "method", "T"];
    header.extend(stats_columns());
    let mut t = Table::new(&header);
    for ((d, m, n), s) in summarize(rows.iter().map(|r| ((r.dataset.clone(), r.method, r.train_len), r.mse))) {
        let mut row = vec![d, m.name().to_string(), n.to_string()];
        row.extend(stats_cells(&s));
        t.push(root_seed, row);
    }
    t
}

/// State MSE per run, one series per dataset and method.
pub fn plot_series(rows: &[FilterRow]) -> Vec<super::plot::Series> {
    let mut series: Vec<super::plot::Series> = Vec::new();
    for r in rows {
        let name = format!("{} {}", r.dataset, r.method.name());
        let x = series.iter().find(|s| s.name == name).map_or(0, |s| s.points.len()) as f64;
        match series.iter_mut().find(|s| s.name == name) {
            Some(s) => s.points.push((x, r.mse)),
            None => series.push(super::plot::Series {
                name,
                points: vec![(x, r.mse)],
            }),
        }
    }
    series
}
