use std::path::{Path, PathBuf};

use qkmps::learn::{c_grid, SyntheticSpec, DEFAULT_TOL};
use qkmps::mps::DEFAULT_TRUNC_BUDGET;
use qkmps::{FeatureMapConfig, Strategy};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, StageExt};

/// Synthetic data used when no dataset path is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub blobs_per_class: usize,
    pub separation: f64,
    pub spread: f64,
    pub log_scale: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let d = SyntheticSpec::default();
        Self {
            blobs_per_class: d.blobs_per_class,
            separation: d.separation,
            spread: d.spread,
            log_scale: d.log_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Labelled CSV; the synthetic generator is used when absent.
    pub data: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
    /// Number of leading feature columns kept, also the qubit count.
    pub features: usize,
    pub n_per_class: usize,
    pub train_fraction: f64,
    pub layers: usize,
    pub distance: usize,
    pub gamma: f64,
    pub strategy: Strategy,
    pub workers: usize,
    pub c_grid: Vec<f64>,
    pub tol: f64,
    pub trunc_budget: f64,
    pub gaussian_baseline: bool,
    /// Circuits simulated by `benchmark`.
    pub samples: usize,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: None,
            synthetic: SyntheticConfig::default(),
            features: 15,
            n_per_class: 100,
            train_fraction: 0.8,
            layers: 2,
            distance: 1,
            gamma: 0.1,
            strategy: Strategy::RoundRobin,
            workers: 1,
            c_grid: c_grid(),
            tol: DEFAULT_TOL,
            trunc_budget: DEFAULT_TRUNC_BUDGET,
            gaussian_baseline: true,
            samples: 8,
            out_dir: PathBuf::from("out"),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub strategy: Option<Strategy>,
    pub features: Option<usize>,
    pub distance: Option<usize>,
    pub layers: Option<usize>,
    pub gamma: Option<f64>,
    pub out_dir: Option<PathBuf>,
    pub n_per_class: Option<usize>,
    pub data: Option<PathBuf>,
    pub samples: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).stage("config")
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        Self::from_toml_str(&std::fs::read_to_string(path).stage("config")?)
    }

    pub fn apply(&mut self, o: &Overrides) {
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = &o.$field {
                    self.$field = v.clone();
                }
            )*};
        }
        set!(seed, workers, strategy, features, distance, layers, gamma, out_dir, n_per_class, samples);
        if o.data.is_some() {
            self.data = o.data.clone();
        }
    }

    pub fn feature_map(&self) -> Result<FeatureMapConfig, CliError> {
        FeatureMapConfig::new(self.features, self.layers, self.distance, self.gamma).stage("config")
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            n_per_class: self.n_per_class,
            m: self.features,
            blobs_per_class: self.synthetic.blobs_per_class,
            separation: self.synthetic.separation,
            spread: self.synthetic.spread,
            log_scale: self.synthetic.log_scale,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::validation("config", msg));
        self.feature_map()?;
        if self.n_per_class == 0 {
            return bad("n_per_class must be at least 1".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction {} must lie in (0, 1)", self.train_fraction));
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if self.c_grid.is_empty() || self.c_grid.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return bad(format!("c_grid {:?} must be non-empty and positive", self.c_grid));
        }
        if !(self.tol > 0.0) {
            return bad(format!("tol {} must be positive", self.tol));
        }
        if !(self.trunc_budget >= 0.0 && self.trunc_budget < 1.0) {
            return bad(format!("trunc_budget {} must lie in [0, 1)", self.trunc_budget));
        }
        if self.samples < 2 {
            return bad(format!("samples {} must be at least 2", self.samples));
        }
        if self.synthetic.blobs_per_class == 0 || !(self.synthetic.spread > 0.0) {
            return bad("synthetic blobs_per_class and spread must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let mut cfg = ExperimentConfig::from_toml_str("workers = 2\ngamma = 0.5\nstrategy = \"no-messaging\"\n").unwrap();
        assert_eq!(cfg.strategy, Strategy::NoMessaging);
        cfg.apply(&Overrides {
            workers: Some(6),
            ..Overrides::default()
        });
        assert_eq!((cfg.workers, cfg.gamma), (6, 0.5));
        cfg.validate().unwrap();
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }
}
