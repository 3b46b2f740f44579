//! TOML experiment configuration.
//!
//! A config file holds flat keys for one experiment. Every key is optional;
//! unknown keys are rejected. Example for `posterior-gaussian`:
//!
//! ```toml
//! experiment = "posterior-gaussian"
//! seed = 1
//! runs = 10
//! dims = [2, 4]
//! sizes = [200]
//! n_test = 100
//! methods = ["kbr-median", "kdeiw-best"]
//! ```

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{KbrError, Result};
use crate::modelsel::DeltaScale;

/// Parses `text` into `T`, checking an optional `experiment` key against `name`.
pub fn parse_config<T: DeserializeOwned>(text: &str, name: &str) -> Result<T> {
    let table: toml::Table = text
        .parse()
        .map_err(|e| KbrError::Config(format!("invalid TOML: {e}")))?;
    if let Some(v) = table.get("experiment") {
        match v.as_str() {
            Some(s) if s == name => {}
            _ => {
                return Err(KbrError::Config(format!(
                    "config is for experiment {v}, not {name:?}"
                )))
            }
        }
    }
    toml::from_str(text).map_err(|e| KbrError::Config(e.to_string()))
}

fn config_err(msg: impl Into<String>) -> KbrError {
    KbrError::Config(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PosteriorMethod {
    KbrMedian,
    KbrCv,
    KdeiwBest,
    KdeiwCvSubstitute,
}

impl PosteriorMethod {
    pub fn name(self) -> &'static str {
        match self {
            PosteriorMethod::KbrMedian => "kbr-median",
            PosteriorMethod::KbrCv => "kbr-cv",
            PosteriorMethod::KdeiwBest => "kdeiw-best",
            PosteriorMethod::KdeiwCvSubstitute => "kdeiw-cv-substitute",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PosteriorGaussianConfig {
    pub experiment: Option<String>,
    pub seed: u64,
    pub runs: usize,
    pub dims: Vec<usize>,
    /// Joint sample sizes `n`.
    pub sizes: Vec<usize>,
    /// Prior sample size; defaults to `n`.
    pub ell: Option<usize>,
    pub n_test: usize,
    pub methods: Vec<PosteriorMethod>,
    /// `eps = eps_factor / n`, `delta = 2 eps`.
    pub eps_factor: f64,
    /// Scale on which `delta = 2 eps` is stated for KBR.
    pub delta_scale: DeltaScale,
    pub cv_folds: usize,
    pub kde_grid: Vec<f64>,
}

impl Default for PosteriorGaussianConfig {
    fn default() -> Self {
        Self {
            experiment: None,
            seed: 0,
            runs: 10,
            dims: vec![2],
            sizes: vec![200],
            ell: None,
            n_test: 100,
            methods: vec![
                PosteriorMethod::KbrMedian,
                PosteriorMethod::KbrCv,
                PosteriorMethod::KdeiwBest,
                PosteriorMethod::KdeiwCvSubstitute,
            ],
            eps_factor: 0.01,
            delta_scale: DeltaScale::PerSample,
            cv_folds: 10,
            kde_grid: crate::baselines::default_kde_grid(),
        }
    }
}

impl PosteriorGaussianConfig {
    pub fn paper_scale(&mut self) {
        self.runs = 30;
        self.n_test = 1000;
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(config_err("runs must be at least 1"));
        }
        if self.dims.is_empty() || self.dims.contains(&0) {
            return Err(config_err("dims must be a nonempty list of positive integers"));
        }
        if self.sizes.is_empty() || self.sizes.iter().any(|&n| n < 2 * self.cv_folds.max(2)) {
            return Err(config_err("sizes must be nonempty and each at least 2 * cv_folds"));
        }
        if self.ell == Some(0) || self.n_test == 0 {
            return Err(config_err("ell and n_test must be positive"));
        }
        if self.methods.is_empty() {
            return Err(config_err("methods must be nonempty"));
        }
        if !(self.eps_factor > 0.0 && self.eps_factor.is_finite()) {
            return Err(config_err("eps_factor must be positive"));
        }
        if self.cv_folds < 2 {
            return Err(config_err("cv_folds must be at least 2"));
        }
        if self.kde_grid.is_empty() || self.kde_grid.iter().any(|h| !(*h > 0.0)) {
            return Err(config_err("kde_grid must hold positive bandwidths"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbcCompareConfig {
    pub experiment: Option<String>,
    pub seed: u64,
    pub runs: usize,
    pub dim: usize,
    pub n_test: usize,
    /// Sample sizes for the kernel methods; also the ABC draw budgets.
    pub sizes: Vec<usize>,
    pub taus: Vec<f64>,
    /// Extra ABC budget used for the tolerance trend; 0 disables it.
    pub trend_budget: usize,
    /// Maximum incomplete Cholesky rank for samples above the dense limit.
    pub max_rank: usize,
    /// Scale on which the KBR `delta = 2 eps` is stated.
    pub delta_scale: DeltaScale,
}

impl Default for AbcCompareConfig {
    fn default() -> Self {
        Self {
            experiment: None,
            seed: 0,
            runs: 10,
            dim: 2,
            n_test: 10,
            sizes: vec![100, 200, 400, 800, 1600],
            taus: vec![1.0, 0.3, 0.1],
            trend_budget: 100_000,
            max_rank: 100,
            delta_scale: DeltaScale::PerSample,
        }
    }
}

impl AbcCompareConfig {
    pub fn paper_scale(&mut self) {
        self.runs = 10;
        self.n_test = 10;
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 || self.dim == 0 || self.n_test == 0 {
            return Err(config_err("runs, dim and n_test must be positive"));
        }
        if self.sizes.is_empty() || self.sizes.iter().any(|&n| n < 4) {
            return Err(config_err("sizes must be nonempty and each at least 4"));
        }
        if self.taus.is_empty() || self.taus.iter().any(|t| !(*t > 0.0)) {
            return Err(config_err("taus must be a nonempty list of positive values"));
        }
        if self.max_rank == 0 {
            return Err(config_err("max_rank must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterSelection {
    /// Split-in-two validation over the default grid.
    Validate,
    /// Median heuristic with `beta` and `eps` from the config.
    Explicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PointEstimateChoice {
    Preimage,
    WeightedMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSyntheticConfig {
    pub experiment: Option<String>,
    pub seed: u64,
    pub runs: usize,
    pub datasets: Vec<String>,
    /// Training transitions `T`.
    pub train_len: usize,
    pub test_len: usize,
    /// Incomplete Cholesky rank; 0 keeps dense matrices.
    pub rank: usize,
    pub selection: FilterSelection,
    pub beta: f64,
    pub eps: f64,
    pub point_estimate: PointEstimateChoice,
    /// Overrides the noise levels of both presets when set.
    pub sigma: Option<f64>,
}

impl Default for FilterSyntheticConfig {
    fn default() -> Self {
        Self {
            experiment: None,
            seed: 0,
            runs: 10,
            datasets: vec!["a".into(), "b".into()],
            train_len: 400,
            test_len: 1000,
            rank: 60,
            selection: FilterSelection::Validate,
            beta: 1.0,
            eps: 1e-3,
            point_estimate: PointEstimateChoice::Preimage,
            sigma: None,
        }
    }
}

impl FilterSyntheticConfig {
    pub fn paper_scale(&mut self) {
        self.runs = 30;
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(config_err("runs must be at least 1"));
        }
        if self.datasets.is_empty() {
            return Err(config_err("datasets must be nonempty"));
        }
        for d in &self.datasets {
            crate::oracles::RotationDynamicsConfig::preset(d)?;
        }
        if self.train_len < 8 || self.test_len < 2 {
            return Err(config_err("train_len must be at least 8 and test_len at least 2"));
        }
        if !(self.beta > 0.0 && self.eps > 0.0) {
            return Err(config_err("beta and eps must be positive"));
        }
        if let Some(s) = self.sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(config_err("sigma must be nonnegative"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        PosteriorGaussianConfig::default().validate().unwrap();
        AbcCompareConfig::default().validate().unwrap();
        FilterSyntheticConfig::default().validate().unwrap();
    }

    #[test]
    fn parses_partial_files() {
        let c: PosteriorGaussianConfig =
            parse_config("dims = [2, 4]\nmethods = [\"kbr-median\"]\n", "posterior-gaussian").unwrap();
        assert_eq!(c.dims, vec![2, 4]);
        assert_eq!(c.methods, vec![PosteriorMethod::KbrMedian]);
        assert_eq!(c.runs, 10);
        let f: FilterSyntheticConfig =
            parse_config("selection = \"explicit\"\npoint_estimate = \"weighted-mean\"\n", "filter-synthetic")
                .unwrap();
        assert_eq!(f.selection, FilterSelection::Explicit);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(parse_config::<AbcCompareConfig>("bogus = 1", "abc-compare").is_err());
        assert!(parse_config::<AbcCompareConfig>("runs = \"x\"", "abc-compare").is_err());
        assert!(parse_config::<AbcCompareConfig>("experiment = \"filter-synthetic\"", "abc-compare").is_err());
        assert!(parse_config::<AbcCompareConfig>("= =", "abc-compare").is_err());
        let c: FilterSyntheticConfig = parse_config("datasets = [\"z\"]", "filter-synthetic").unwrap();
        assert!(c.validate().is_err());
    }
}
