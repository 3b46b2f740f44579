//! Likelihood-free posterior means: rejection ABC against KBR and the
//! kernel conditional mean, at matched numbers of likelihood draws.

use std::time::Instant;

use nalgebra::DVector;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::baselines::{abc_rejection, AbcConfig, AbcResult};
use crate::embeddings::{ConditionalMean, DENSE_LIMIT, JointSample, Space, WeightScale, WeightedSample};
use crate::error::{KbrError, Result};
use crate::exec::Exec;
use crate::kbr::{build_posterior_operator, LowRankPair};
use crate::linalg::incomplete_cholesky_gram;
use crate::modelsel::median_bandwidth;
use crate::kernels::Kernel;
use crate::oracles::{gaussian_conjugate_posterior_mean, GaussianJointConfig};
use crate::points::{sq_dist, PointSet};
use crate::rng::substream;

use super::config::AbcCompareConfig;
use super::output::{fmt_f64, median, nan_last_cmp, stats_cells, stats_columns, summarize, Table};
use super::plot::Series;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AbcMethod {
    Kbr,
    CondMean,
    Abc,
}

impl AbcMethod {
    pub fn name(self) -> &'static str {
        match self {
            AbcMethod::Kbr => "kbr",
            AbcMethod::CondMean => "cond-mean",
            AbcMethod::Abc => "abc",
        }
    }
}

/// Squared error at one test point.
#[derive(Debug, Clone, PartialEq)]
pub struct AbcRow {
    pub method: AbcMethod,
    /// ABC tolerance; `NaN` for the kernel methods.
    pub tau: f64,
    /// Likelihood draws allowed (sample size for the kernel methods).
    pub budget: usize,
    pub seed: u64,
    pub point: usize,
    /// `NaN` when ABC accepted nothing.
    pub error: f64,
    pub draws: usize,
    pub accepted: usize,
}

/// Wall-clock seconds for all test points of one `(method, tau, budget, seed)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub method: AbcMethod,
    pub tau: f64,
    pub budget: usize,
    pub seed: u64,
    pub seconds: f64,
}

fn kernel_sample(model: &GaussianJointConfig, n: usize, seed: u64) -> Result<JointSample> {
    let mut rng = substream(seed, &format!("kernel-{n}"));
    let x = model.sample_prior(n, &mut rng)?;
    let mut ys = Vec::with_capacity(n * model.d);
    for p in x.iter() {
        ys.extend(model.sample_likelihood(p, &mut rng));
    }
    JointSample::new(x, PointSet::from_flat(ys, model.d)?)
}

/// Fixed inputs of one run.
struct RunContext<'a> {
    cfg: &'a AbcCompareConfig,
    model: &'a GaussianJointConfig,
    test: &'a PointSet,
    truth: &'a [Vec<f64>],
    seed: u64,
}

#[derive(Default)]
struct Output {
    rows: Vec<AbcRow>,
    timings: Vec<TimingRow>,
}

fn kernel_rows(ctx: &RunContext<'_>, n: usize, out: &mut Output) -> Result<()> {
    let RunContext { cfg, model, test, truth, seed } = *ctx;
    let Output { rows, timings } = out;
    let start = Instant::now();
    let joint = kernel_sample(model, n, seed)?;
    let kx = Kernel::gaussian(median_bandwidth(&joint.x)?)?;
    let ky = Kernel::gaussian(median_bandwidth(&joint.y)?)?;
    let factors = if n > DENSE_LIMIT {
        Some((
            incomplete_cholesky_gram(&kx, &joint.x, None, Some(cfg.max_rank))?,
            incomplete_cholesky_gram(&ky, &joint.y, None, Some(cfg.max_rank))?,
        ))
    } else {
        None
    };
    let sample_time = start.elapsed().as_secs_f64();

    let mut push = |method, ests: Vec<Vec<f64>>, secs: f64| {
        for (j, (e, t)) in ests.iter().zip(truth).enumerate() {
            rows.push(AbcRow {
                method,
                tau: f64::NAN,
                budget: n,
                seed,
                point: j,
                error: sq_dist(e, t),
                draws: n,
                accepted: n,
            });
        }
        timings.push(TimingRow {
            method,
            tau: f64::NAN,
            budget: n,
            seed,
            seconds: sample_time + secs,
        });
    };

    let t0 = Instant::now();
    let eps = 0.01 / (n as f64).sqrt();
    let cm = ConditionalMean::new(&joint, &ky, eps, WeightScale::Unit, factors.as_ref().map(|f| &f.1))?;
    let ests = test
        .iter()
        .map(|y| Ok(joint.x.weighted_sum(cm.weight_vector(y)?.as_slice())))
        .collect::<Result<Vec<_>>>()?;
    push(AbcMethod::CondMean, ests, t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let eps = 0.01 / n as f64;
    let schedule = cfg.delta_scale.schedule(eps, 2.0 * eps, n)?;
    let prior = WeightedSample::new(joint.x.clone(), vec![1.0 / n as f64; n], Space::X)?;
    let pair = factors.as_ref().map(|(gx, gy)| LowRankPair { gx, gy });
    let op = build_posterior_operator(&joint, &prior, &kx, &ky, schedule, pair)?;
    let ests = test
        .iter()
        .map(|y| Ok(joint.x.weighted_sum(op.weight_vector(y)?.as_slice())))
        .collect::<Result<Vec<_>>>()?;
    push(AbcMethod::Kbr, ests, t0.elapsed().as_secs_f64());
    Ok(())
}

fn abc_rows(ctx: &RunContext<'_>, budget: usize, out: &mut Output) -> Result<()> {
    let RunContext { cfg, model, test, truth, seed } = *ctx;
    let Output { rows, timings } = out;
    let tau_max = cfg.taus.iter().cloned().fold(0.0, f64::max);
    let mut per_point: Vec<AbcResult> = Vec::with_capacity(test.len());
    let prior_l = model
        .prior_cov()
        .cholesky()
        .ok_or_else(|| KbrError::numeric("prior covariance is not positive definite", 0.0, f64::INFINITY))?
        .l();
    let mut secs = 0.0;
    for (j, y) in test.iter().enumerate() {
        let abc_seed = substream(seed, &format!("abc-{budget}-{j}")).random::<u64>();
        let acfg = AbcConfig::new(tau_max, budget, abc_seed)?;
        let r = abc_rejection(
            |rng| {
                let z = DVector::from_fn(model.d, |_, _| rng.sample::<f64, _>(StandardNormal));
                (&prior_l * z).iter().cloned().collect()
            },
            |x, rng| model.sample_likelihood(x, rng),
            y,
            &acfg,
        )?;
        secs += r.elapsed.as_secs_f64();
        per_point.push(r);
    }
    let mut taus = cfg.taus.clone();
    taus.sort_by(|a, b| b.total_cmp(a));
    taus.dedup();
    for tau in taus {
        for (j, r) in per_point.iter().enumerate() {
            let r = r.restrict(tau);
            let error = r.mean().map_or(f64::NAN, |m| sq_dist(&m, &truth[j]));
            rows.push(AbcRow {
                method: AbcMethod::Abc,
                tau,
                budget,
                seed,
                point: j,
                error,
                draws: r.draws,
                accepted: r.accepted.len(),
            });
        }
        timings.push(TimingRow {
            method: AbcMethod::Abc,
            tau,
            budget,
            seed,
            seconds: secs,
        });
    }
    Ok(())
}

/// All rows of one run.
pub fn run_seed(cfg: &AbcCompareConfig, seed: u64) -> Result<(Vec<AbcRow>, Vec<TimingRow>)> {
    let model = GaussianJointConfig::sample(cfg.dim, seed)?;
    let test = model.sample_test_points(cfg.n_test, &mut substream(seed, "test"))?;
    let truth: Vec<Vec<f64>> = test
        .iter()
        .map(|y| gaussian_conjugate_posterior_mean(&model, y))
        .collect::<Result<_>>()?;
    let ctx = RunContext {
        cfg,
        model: &model,
        test: &test,
        truth: &truth,
        seed,
    };
    let mut out = Output::default();
    let mut budgets = cfg.sizes.clone();
    budgets.sort_unstable();
    budgets.dedup();
    for &n in &budgets {
        kernel_rows(&ctx, n, &mut out)?;
        abc_rows(&ctx, n, &mut out)?;
    }
    if cfg.trend_budget > 0 && !budgets.contains(&cfg.trend_budget) {
        abc_rows(&ctx, cfg.trend_budget, &mut out)?;
    }
    Ok((out.rows, out.timings))
}

/// Runs are parallel; rows come back ordered by seed.
pub fn run(cfg: &AbcCompareConfig, exec: Exec) -> Result<(Vec<AbcRow>, Vec<TimingRow>)> {
    cfg.validate()?;
    let results = exec.map(cfg.runs, |r| run_seed(cfg, cfg.seed + r as u64));
    let (mut rows, mut timings) = (Vec::new(), Vec::new());
    for r in results {
        let (a, b) = r?;
        rows.extend(a);
        timings.extend(b);
    }
    Ok((rows, timings))
}

/// Per-run median error over test points, keyed by `(method, tau, budget, seed)`.
/// `tau` is carried as its bit pattern so the key is totally ordered.
pub fn run_medians(rows: &[AbcRow]) -> Vec<((AbcMethod, u64, usize, u64), f64)> {
    let mut groups: std::collections::BTreeMap<(AbcMethod, u64, usize, u64), Vec<f64>> = Default::default();
    for r in rows {
        groups
            .entry((r.method, r.tau.to_bits(), r.budget, r.seed))
            .or_default()
            .push(r.error);
    }
    groups.into_iter().map(|(k, v)| (k, median(&v))).collect()
}

/// Best (lowest) ABC per-run median over tolerances at `budget`, `+inf` if
/// every tolerance accepted nothing at some point.
pub fn best_abc_median(rows: &[AbcRow], budget: usize, seed: u64) -> f64 {
    run_medians(rows)
        .into_iter()
        .filter(|((m, _, b, s), _)| *m == AbcMethod::Abc && *b == budget && *s == seed)
        .map(|(_, v)| v)
        .min_by(nan_last_cmp)
        .unwrap_or(f64::INFINITY)
}

pub fn runs_table(rows: &[AbcRow]) -> Table {
    let mut t = Table::new(&["method", "tau", "budget", "point", "error", "draws", "accepted"]);
    for r in rows {
        t.push(
            r.seed,
            vec![
                r.method.name().into(),
                fmt_f64(r.tau),
                r.budget.to_string(),
                r.point.to_string(),
                fmt_f64(r.error),
                r.draws.to_string(),
                r.accepted.to_string(),
            ],
        );
    }
    t
}

pub fn timing_table(timings: &[TimingRow]) -> Table {
    let mut t = Table::new(&["method", "tau", "budget", "wallclock_s"]);
    for r in timings {
        t.push(
            r.seed,
            vec![r.method.name().into(), fmt_f64(r.tau), r.budget.to_string(), fmt_f64(r.seconds)],
        );
    }
    t
}

/// Median over runs of the per-run median error.
pub fn summary_table(rows: &[AbcRow], root_seed: u64) -> Table {
    let mut header = vec!["method", "tau", "budget"];
    header.extend(stats_columns());
    let mut t = Table::new(&header);
    let per_run = run_medians(rows);
    for ((m, tau, b), s) in summarize(per_run.into_iter().map(|((m, tau, b, _), v)| ((m, tau, b), v))) {
        let mut row = vec![m.name().to_string(), fmt_f64(f64::from_bits(tau)), b.to_string()];
        row.extend(stats_cells(&s));
        t.push(root_seed, row);
    }
    t
}

/// Median error against budget, one series per method and tolerance.
pub fn plot_series(rows: &[AbcRow]) -> Vec<Series> {
    let per_run = run_medians(rows);
    let stats = summarize(per_run.into_iter().map(|((m, tau, b, _), v)| ((m, tau, b), v)));
    let mut series: Vec<Series> = Vec::new();
    for ((m, tau, b), s) in stats {
        let tau = f64::from_bits(tau);
        let name = if tau.is_nan() { m.name().to_string() } else { format!("abc tau={tau}") };
        match series.iter_mut().find(|x| x.name == name) {
            Some(x) => x.points.push((b as f64, s.median)),
            None => series.push(Series {
                name,
                points: vec![(b as f64, s.median)],
            }),
        }
    }
    for s in &mut series {
        for p in &mut s.points {
            p.0 = p.0.log10();
        }
    }
    series
}
