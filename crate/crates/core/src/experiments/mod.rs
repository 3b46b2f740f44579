//! Experiment harness behind the `kbr` command line.
//!
//! Each experiment reads an optional TOML config, runs over its seeds, and
//! writes CSV tables plus SVG plots into an output directory. Every CSV row
//! ends with the run seed, the config hash and the library version.

pub mod abc_compare;
pub mod config;
pub mod filter_synthetic;
pub mod output;
pub mod plot;
pub mod posterior_gaussian;

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::error::{KbrError, Result};
use crate::exec::Exec;

use config::{parse_config, AbcCompareConfig, FilterSyntheticConfig, PosteriorGaussianConfig};
use output::{config_hash, Table};
use plot::{line_plot, write_plot, Series};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    PosteriorGaussian,
    AbcCompare,
    FilterSynthetic,
}

impl Experiment {
    pub const ALL: [Experiment; 3] = [
        Experiment::PosteriorGaussian,
        Experiment::AbcCompare,
        Experiment::FilterSynthetic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::PosteriorGaussian => "posterior-gaussian",
            Experiment::AbcCompare => "abc-compare",
            Experiment::FilterSynthetic => "filter-synthetic",
        }
    }
}

impl FromStr for Experiment {
    type Err = KbrError;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| KbrError::Config(format!("unknown experiment {s:?}")))
    }
}

/// Overrides applied on top of the config file.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub paper_scale: bool,
    pub out_dir: PathBuf,
    pub exec: Exec,
}

/// What a run produced.
#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub config_hash: String,
    pub files: Vec<PathBuf>,
    /// Plot failures, which never fail the run.
    pub warnings: Vec<String>,
}

struct Writer<'a> {
    dir: &'a Path,
    hash: String,
    report: RunReport,
}

impl<'a> Writer<'a> {
    fn new<C: Serialize>(dir: &'a Path, cfg: &C) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let hash = config_hash(cfg)?;
        let text = toml::to_string(cfg).map_err(|e| KbrError::Config(e.to_string()))?;
        let mut w = Self {
            dir,
            hash: hash.clone(),
            report: RunReport {
                config_hash: hash,
                ..Default::default()
            },
        };
        let path = dir.join("config.toml");
        std::fs::write(&path, text)?;
        w.report.files.push(path);
        Ok(w)
    }

    fn table(&mut self, name: &str, t: &Table) -> Result<()> {
        let path = self.dir.join(name);
        t.write_file(&path, &self.hash)?;
        self.report.files.push(path);
        Ok(())
    }

    fn plot(&mut self, name: &str, title: &str, xl: &str, yl: &str, series: &[Series]) {
        let path = self.dir.join(name);
        match write_plot(&path, &line_plot(title, xl, yl, series, true)) {
            Some(w) => self.report.warnings.push(w),
            None => self.report.files.push(path),
        }
    }
}

fn load<C: serde::de::DeserializeOwned + Default>(text: Option<&str>, name: &str) -> Result<C> {
    match text {
        Some(t) => parse_config(t, name),
        None => Ok(C::default()),
    }
}

/// Runs one experiment. Without a config file every key takes its default.
pub fn run_experiment(experiment: Experiment, config_text: Option<&str>, opts: &RunOptions) -> Result<RunReport> {
    let name = experiment.name();
    match experiment {
        Experiment::PosteriorGaussian => {
            let mut cfg: PosteriorGaussianConfig = load(config_text, name)?;
            cfg.experiment = Some(name.into());
            if let Some(s) = opts.seed {
                cfg.seed = s;
            }
            if opts.paper_scale {
                cfg.paper_scale();
            }
            cfg.validate()?;
            let mut w = Writer::new(&opts.out_dir, &cfg)?;
            let results = posterior_gaussian::run(&cfg, opts.exec)?;
            let rows: Vec<_> = results.iter().flat_map(|r| r.3.rows.iter().cloned()).collect();
            w.table("runs.csv", &posterior_gaussian::runs_table(&rows))?;
            w.table("summary.csv", &posterior_gaussian::summary_table(&rows, cfg.seed))?;
            let mut cv_tables: std::collections::BTreeMap<(usize, usize), Table> = Default::default();
            for (d, n, seed, out) in &results {
                if let Some(cv) = &out.cv {
                    let t = cv_tables
                        .entry((*d, *n))
                        .or_insert_with(|| Table::new(&["fold", "beta", "eps", "delta", "score"]));
                    for r in &cv.table {
                        t.push(
                            *seed,
                            vec![
                                r.fold.to_string(),
                                output::fmt_f64(r.point.beta),
                                output::fmt_f64(r.point.eps),
                                output::fmt_f64(r.point.delta),
                                output::fmt_f64(r.score),
                            ],
                        );
                    }
                }
            }
            for ((d, n), t) in &cv_tables {
                w.table(&format!("cv_scores_d{d}_n{n}.csv"), t)?;
            }
            w.plot(
                "mse.svg",
                "Posterior mean MSE",
                "dimension",
                "median MSE",
                &posterior_gaussian::plot_series(&rows),
            );
            Ok(w.report)
        }
        Experiment::AbcCompare => {
            let mut cfg: AbcCompareConfig = load(config_text, name)?;
            cfg.experiment = Some(name.into());
            if let Some(s) = opts.seed {
                cfg.seed = s;
            }
            if opts.paper_scale {
                cfg.paper_scale();
            }
            cfg.validate()?;
            let mut w = Writer::new(&opts.out_dir, &cfg)?;
            let (rows, timings) = abc_compare::run(&cfg, opts.exec)?;
            w.table("runs.csv", &abc_compare::runs_table(&rows))?;
            w.table("summary.csv", &abc_compare::summary_table(&rows, cfg.seed))?;
            w.table("timing.csv", &abc_compare::timing_table(&timings))?;
            w.plot(
                "error.svg",
                "Posterior mean error",
                "log10 draws",
                "median squared error",
                &abc_compare::plot_series(&rows),
            );
            Ok(w.report)
        }
        Experiment::FilterSynthetic => {
            let mut cfg: FilterSyntheticConfig = load(config_text, name)?;
            cfg.experiment = Some(name.into());
            if let Some(s) = opts.seed {
                cfg.seed = s;
            }
            if opts.paper_scale {
                cfg.paper_scale();
            }
            cfg.validate()?;
            let mut w = Writer::new(&opts.out_dir, &cfg)?;
            let rows = filter_synthetic::run(&cfg, opts.exec)?;
            w.table("runs.csv", &filter_synthetic::runs_table(&rows))?;
            w.table("summary.csv", &filter_synthetic::summary_table(&rows, cfg.seed))?;
            if let Some(first) = cfg.datasets.first() {
                let inst = filter_synthetic::FilterInstance::draw(&cfg, first, cfg.seed)?;
                let mut t = Table::new(&["t", "x_1", "x_2", "y_1", "y_2"]);
                let states = inst.test.states.as_ref().expect("simulated states");
                for i in 0..inst.test.len() {
                    let mut row = vec![(i + 1).to_string()];
                    for p in [states.point(i), inst.test.observations.point(i)] {
                        row.extend(p.iter().map(|v| output::fmt_f64(*v)));
                    }
                    t.push(cfg.seed, row);
                }
                w.table(&format!("trajectory_{first}.csv"), &t)?;
            }
            w.plot(
                "mse.svg",
                "Filter state MSE",
                "run",
                "MSE",
                &filter_synthetic::plot_series(&rows),
            );
            Ok(w.report)
        }
    }
}
