//! Posterior means in the linear-Gaussian model: KBR against KDE with
//! importance weighting, scored against the conjugate posterior mean.

use crate::baselines::{kde_loo_bandwidth, KdeConfig, KdeIw};
use crate::embeddings::{JointSample, Space, WeightedSample};
use crate::error::Result;
use crate::exec::Exec;
use crate::kbr::build_posterior_operator;
use crate::kernels::Kernel;
use crate::linalg::RegularizationSchedule;
use crate::modelsel::{default_grid, kbr_cross_validate, median_bandwidth, CvPlan, CvResult};
use crate::oracles::{gaussian_conjugate_posterior_mean, GaussianJointConfig};
use crate::points::{sq_dist, PointSet};
use crate::rng::substream;

use super::config::{PosteriorGaussianConfig, PosteriorMethod};
use super::output::{fmt_f64, stats_cells, stats_columns, summarize, Table};
use super::plot::Series;

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorRow {
    pub d: usize,
    pub n: usize,
    pub method: PosteriorMethod,
    pub seed: u64,
    pub mse: f64,
    /// Chosen bandwidth multiplier (KBR) or bandwidth (KDE).
    pub bandwidth: f64,
}

/// Data of one run.
pub struct Instance {
    pub model: GaussianJointConfig,
    pub joint: JointSample,
    pub prior: PointSet,
    pub test: PointSet,
    pub truth: Vec<Vec<f64>>,
}

impl Instance {
    pub fn draw(d: usize, n: usize, ell: usize, n_test: usize, seed: u64) -> Result<Self> {
        let model = GaussianJointConfig::sample(d, seed)?;
        let joint = model.sample_joint(n, &mut substream(seed, &format!("train-{n}")))?;
        let prior = model.sample_prior(ell, &mut substream(seed, &format!("prior-{ell}")))?;
        let test = model.sample_test_points(n_test, &mut substream(seed, "test"))?;
        let truth = test
            .iter()
            .map(|y| gaussian_conjugate_posterior_mean(&model, y))
            .collect::<Result<_>>()?;
        Ok(Self {
            model,
            joint,
            prior,
            test,
            truth,
        })
    }

    pub fn mse(&self, estimates: &[Vec<f64>]) -> f64 {
        let total: f64 = estimates.iter().zip(&self.truth).map(|(e, t)| sq_dist(e, t)).sum();
        total / self.truth.len() as f64
    }
}

/// KBR posterior-mean estimates `sum_i rho_i X_i` at every test point.
pub fn kbr_estimates(
    inst: &Instance,
    kx: &Kernel,
    ky: &Kernel,
    schedule: RegularizationSchedule,
    exec: Exec,
) -> Result<Vec<Vec<f64>>> {
    let ell = inst.prior.len();
    let prior = WeightedSample::new(inst.prior.clone(), vec![1.0 / ell as f64; ell], Space::X)?;
    let op = build_posterior_operator(&inst.joint, &prior, kx, ky, schedule, None)?;
    let rhos = op.weight_vectors(&inst.test, exec)?;
    Ok(rhos
        .iter()
        .map(|rho| inst.joint.x.weighted_sum(rho.as_slice()))
        .collect())
}

pub fn kde_estimates(inst: &Instance, h: f64) -> Result<Vec<Vec<f64>>> {
    let kde = KdeIw::new(&inst.joint, &inst.prior, KdeConfig::equal(h)?)?;
    inst.test.iter().map(|y| kde.posterior_mean(y)).collect()
}

/// Median-heuristic kernels on the `X` and `Y` samples.
pub fn median_kernels(joint: &JointSample) -> Result<(Kernel, Kernel)> {
    Ok((
        Kernel::gaussian(median_bandwidth(&joint.x)?)?,
        Kernel::gaussian(median_bandwidth(&joint.y)?)?,
    ))
}

/// Output of one run: rows plus the CV score table when `kbr-cv` ran.
pub struct RunOutput {
    pub rows: Vec<PosteriorRow>,
    pub cv: Option<CvResult>,
}

pub fn run_instance(
    cfg: &PosteriorGaussianConfig,
    d: usize,
    n: usize,
    seed: u64,
    exec: Exec,
) -> Result<RunOutput> {
    let ell = cfg.ell.unwrap_or(n);
    let inst = Instance::draw(d, n, ell, cfg.n_test, seed)?;
    let (kx, ky) = median_kernels(&inst.joint)?;
    let eps = cfg.eps_factor / n as f64;
    let mut rows = Vec::new();
    let mut cv = None;
    let mut push = |method, mse, bandwidth| {
        rows.push(PosteriorRow {
            d,
            n,
            method,
            seed,
            mse,
            bandwidth,
        })
    };
    let mut methods = cfg.methods.clone();
    methods.sort();
    methods.dedup();
    for method in methods {
        match method {
            PosteriorMethod::KbrMedian => {
                let schedule = cfg.delta_scale.schedule(eps, 2.0 * eps, n)?;
                let est = kbr_estimates(&inst, &kx, &ky, schedule, exec)?;
                push(method, inst.mse(&est), 1.0);
            }
            PosteriorMethod::KbrCv => {
                let plan = CvPlan::new(n, cfg.cv_folds, default_grid(n), seed)?
                    .with_delta_scale(cfg.delta_scale);
                let res = kbr_cross_validate(&inst.joint, &plan, &kx, &ky, exec)?;
                let b = res.best;
                let est = kbr_estimates(
                    &inst,
                    &kx.with_bandwidth_scaled(b.beta),
                    &ky.with_bandwidth_scaled(b.beta),
                    cfg.delta_scale.schedule(b.eps, b.delta, n)?,
                    exec,
                )?;
                push(method, inst.mse(&est), b.beta);
                cv = Some(res);
            }
            PosteriorMethod::KdeiwBest => {
                // best mean performance over the grid, judged by the oracle
                let mut best = (f64::INFINITY, cfg.kde_grid[0]);
                for &h in &cfg.kde_grid {
                    let m = kde_estimates(&inst, h).map(|e| inst.mse(&e)).unwrap_or(f64::INFINITY);
                    if m < best.0 {
                        best = (m, h);
                    }
                }
                push(method, best.0, best.1);
            }
            PosteriorMethod::KdeiwCvSubstitute => {
                let h = kde_loo_bandwidth(&inst.joint, &cfg.kde_grid)?;
                let m = kde_estimates(&inst, h).map(|e| inst.mse(&e)).unwrap_or(f64::INFINITY);
                push(method, m, h);
            }
        }
    }
    Ok(RunOutput { rows, cv })
}

/// One job per `(d, n, run)`; results are sorted by `(d, n, seed, method)`.
pub fn run(cfg: &PosteriorGaussianConfig, exec: Exec) -> Result<Vec<(usize, usize, u64, RunOutput)>> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for &d in &cfg.dims {
        for &n in &cfg.sizes {
            for r in 0..cfg.runs {
                jobs.push((d, n, cfg.seed + r as u64));
            }
        }
    }
    let results = exec.map(jobs.len(), |i| {
        let (d, n, s) = jobs[i];
        run_instance(cfg, d, n, s, Exec::Sequential)
    });
    let mut out = Vec::with_capacity(jobs.len());
    for (job, r) in jobs.into_iter().zip(results) {
        out.push((job.0, job.1, job.2, r?));
    }
    Ok(out)
}

pub fn runs_table(rows: &[PosteriorRow]) -> Table {
    let mut t = Table::new(&["d", "n", "method", "mse", "bandwidth"]);
    for r in rows {
        t.push(
            r.seed,
            vec![
                r.d.to_string(),
                r.n.to_string(),
                r.method.name().into(),
                fmt_f64(r.mse),
                fmt_f64(r.bandwidth),
            ],
        );
    }
    t
}

pub fn summary_table(rows: &[PosteriorRow], root_seed: u64) -> Table {
    let mut header = vec!["d", "n", "method"];
    header.extend(stats_columns());
    let mut t = Table::new(&header);
    for ((d, n, m), s) in summarize(rows.iter().map(|r| ((r.d, r.n, r.method), r.mse))) {
        let mut row = vec![d.to_string(), n.to_string(), m.name().to_string()];
        row.extend(stats_cells(&s));
        t.push(root_seed, row);
    }
    t
}

/// Median MSE against `d` (one series per method and `n`).
pub fn plot_series(rows: &[PosteriorRow]) -> Vec<Series> {
    let stats = summarize(rows.iter().map(|r| ((r.method, r.n, r.d), r.mse)));
    let mut series: Vec<Series> = Vec::new();
    for ((m, n, d), s) in stats {
        let name = format!("{} n={n}", m.name());
        match series.iter_mut().find(|x| x.name == name) {
            Some(x) => x.points.push((d as f64, s.median)),
            None => series.push(Series {
                name,
                points: vec![(d as f64, s.median)],
            }),
        }
    }
    series
}
