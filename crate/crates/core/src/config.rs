//! Experiment configuration: a sectioned TOML file, every key optional.
//!
//! A `meta.json` written by a previous run is also accepted; its `config`
//! member is read back verbatim so the run can be reproduced.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adaptive::{PoolMode, RadiusPool};
use crate::enkf::{FilterConfig, FilterVariant};
use crate::error::{Error, Result};
use crate::features::FeatureLayout;
use crate::forest::ForestConfig;
use crate::localization::Taper;
use crate::lorenz96::Lorenz96;
use crate::metrics::CriterionWeights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub k: usize,
    pub forcing: f64,
    pub dt: f64,
    pub steps_per_cycle: usize,
    pub spin_up_steps: usize,
    pub n_cycles: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            k: 40,
            forcing: 8.0,
            dt: 0.005,
            steps_per_cycle: 20,
            spin_up_steps: 1000,
            n_cycles: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub n_ens: usize,
    pub inflation: f64,
    pub variant: FilterVariant,
    /// Observation error standard deviation; `R = obs_noise_std^2 I`.
    pub obs_noise_std: f64,
    /// Initial ensemble spread as a fraction of the mean magnitude of the reference state.
    pub background_std_fraction: f64,
}

impl Default for FilterSection {
    fn default() -> Self {
        FilterSection {
            n_ens: 25,
            inflation: 1.09,
            variant: FilterVariant::Deterministic,
            obs_noise_std: 1.0,
            background_std_fraction: 0.08,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizationSection {
    pub taper: Taper,
    /// Radius used by `run-fixed`.
    pub fixed_radius: f64,
}

impl Default for LocalizationSection {
    fn default() -> Self {
        LocalizationSection {
            taper: Taper::GaspariCohn,
            fixed_radius: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolSection {
    pub mode: PoolMode,
    pub scalar_candidates: Vec<f64>,
    pub n_trials: usize,
    /// Inclusive integer range of per-variable radii in vector mode.
    pub vector_range: [u32; 2],
}

impl Default for PoolSection {
    fn default() -> Self {
        PoolSection {
            mode: PoolMode::ScalarInTime,
            scalar_candidates: (1..=40).map(f64::from).collect(),
            n_trials: 30,
            vector_range: [1, 40],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriterionSection {
    pub w1: f64,
    pub w2: f64,
}

impl Default for CriterionSection {
    fn default() -> Self {
        CriterionSection { w1: 0.7, w2: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub seed: u64,
    /// Fraction of cycles in the training phase.
    pub train_fraction: f64,
    pub out_dir: String,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            seed: 1,
            train_fraction: 0.8,
            out_dir: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSection {
    pub stride: usize,
    pub corr_lag: usize,
}

impl Default for FeatureSection {
    fn default() -> Self {
        FeatureSection {
            stride: 2,
            corr_lag: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestSection {
    pub n_trees: usize,
    /// Absent means unlimited depth.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    /// Absent means `ceil(n_features / 3)`.
    pub n_features_per_split: Option<usize>,
}

impl Default for ForestSection {
    fn default() -> Self {
        ForestSection {
            n_trees: 100,
            max_depth: None,
            min_samples_leaf: 2,
            n_features_per_split: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub filter: FilterSection,
    pub localization: LocalizationSection,
    pub pool: PoolSection,
    pub criterion: CriterionSection,
    pub experiment: ExperimentSection,
    pub features: FeatureSection,
    pub forest: ForestSection,
}

fn field<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config { .. } => e,
        other => Error::config(name, strip_prefix(&other.to_string())),
    })
}

fn strip_prefix(msg: &str) -> String {
    msg.trim_start_matches("invalid parameter: ").to_string()
}

fn require(ok: bool, name: &str, msg: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(name, msg))
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Parse(e.to_string().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Accepts a bare config object or a `meta.json` document holding one under `config`.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let inner = match value.get("config") {
            Some(c) if value.get("format").is_some() => c.clone(),
            _ => value,
        };
        let cfg: ExperimentConfig =
            serde_json::from_value(inner).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        field("model", self.model().validate())?;
        require(m.steps_per_cycle >= 1, "model.steps_per_cycle", "must be >= 1")?;
        require(m.n_cycles >= 2, "model.n_cycles", "must be >= 2")?;

        let f = &self.filter;
        require(f.n_ens >= 2, "filter.n_ens", format!("must be >= 2, got {}", f.n_ens))?;
        require(
            f.inflation >= 1.0 && f.inflation.is_finite(),
            "filter.inflation",
            format!("must be >= 1, got {}", f.inflation),
        )?;
        require(
            f.obs_noise_std > 0.0 && f.obs_noise_std.is_finite(),
            "filter.obs_noise_std",
            format!("must be > 0, got {}", f.obs_noise_std),
        )?;
        require(
            f.background_std_fraction >= 0.0 && f.background_std_fraction.is_finite(),
            "filter.background_std_fraction",
            format!("must be >= 0, got {}", f.background_std_fraction),
        )?;

        require(
            self.localization.fixed_radius > 0.0 && self.localization.fixed_radius.is_finite(),
            "localization.fixed_radius",
            format!("must be > 0, got {}", self.localization.fixed_radius),
        )?;

        field("pool", self.pool().validate())?;

        let c = &self.criterion;
        require(c.w1 >= 0.0 && c.w1.is_finite(), "criterion.w1", format!("must be >= 0, got {}", c.w1))?;
        require(c.w2 >= 0.0 && c.w2.is_finite(), "criterion.w2", format!("must be >= 0, got {}", c.w2))?;
        require(c.w1 + c.w2 > 0.0, "criterion", "w1 + w2 must be > 0")?;

        let e = &self.experiment;
        require(
            e.train_fraction > 0.0 && e.train_fraction < 1.0,
            "experiment.train_fraction",
            format!("must be in (0, 1), got {}", e.train_fraction),
        )?;
        let n_train = self.n_train();
        require(
            n_train >= 2,
            "experiment.train_fraction",
            format!("training phase has {n_train} cycle(s); need at least 2"),
        )?;

        field("features", self.feature_layout().map(|_| ()))?;
        let n_feat = self.feature_layout()?.len();
        field("forest", self.forest_config().validate(Some(n_feat)))?;
        Ok(())
    }

    pub fn model(&self) -> Lorenz96 {
        Lorenz96 {
            k: self.model.k,
            forcing: self.model.forcing,
            dt: self.model.dt,
        }
    }

    pub fn filter_config(&self) -> FilterConfig {
        FilterConfig {
            n_ens: self.filter.n_ens,
            inflation: self.filter.inflation,
            variant: self.filter.variant,
            rng_seed: self.experiment.seed,
        }
    }

    pub fn weights(&self) -> CriterionWeights {
        CriterionWeights {
            w1: self.criterion.w1,
            w2: self.criterion.w2,
        }
    }

    pub fn pool(&self) -> RadiusPool {
        RadiusPool {
            mode: self.pool.mode,
            scalar_candidates: self.pool.scalar_candidates.clone(),
            n_trials: self.pool.n_trials,
            vector_range: (self.pool.vector_range[0], self.pool.vector_range[1]),
            rng_seed: self.experiment.seed,
        }
    }

    pub fn feature_layout(&self) -> Result<FeatureLayout> {
        FeatureLayout::new(self.model.k, self.features.stride, self.features.corr_lag)
    }

    pub fn forest_config(&self) -> ForestConfig {
        ForestConfig {
            n_trees: self.forest.n_trees,
            max_depth: self.forest.max_depth,
            min_samples_leaf: self.forest.min_samples_leaf,
            n_features_per_split: self.forest.n_features_per_split,
            rng_seed: self.experiment.seed,
        }
    }

    /// Number of training-phase cycles.
    pub fn n_train(&self) -> usize {
        let n = self.model.n_cycles;
        ((n as f64 * self.experiment.train_fraction).round() as usize).min(n)
    }

    pub fn obs_variance(&self) -> f64 {
        self.filter.obs_noise_std * self.filter.obs_noise_std
    }
}

/// Load and validate a config file; `.json` files are read as JSON, anything
/// else as TOML.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "json") {
        ExperimentConfig::from_json_str(&text)
    } else {
        ExperimentConfig::from_toml_str(&text)
    }
}
