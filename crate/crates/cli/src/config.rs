//! Experiment configuration: TOML file, command-line overrides and the
//! built-in defaults, resolved in that order of precedence
//! (flags > file > defaults).

use std::path::{Path, PathBuf};

use guidance_lab::toymodel::{ModelConfig, Parameterization, TrainConfig};
use guidance_lab::Strategy;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
#[error("config error at `{path}`: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

/// A sweep axis: a single value or a list of values.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Axis<T> {
    One(T),
    Many(Vec<T>),
}

impl<T> Axis<T> {
    fn into_vec(self) -> Vec<T> {
        match self {
            Axis::One(v) => vec![v],
            Axis::Many(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetParams {
    pub n_per_class: usize,
    pub sigma: f64,
    pub centers: Vec<[f64; 2]>,
    /// Class used as the positive condition; its center is the target mode.
    pub positive_class: usize,
    pub negative_class: usize,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            n_per_class: 500,
            sigma: 1.5,
            centers: vec![[-2.0, 0.0], [2.0, 0.0]],
            positive_class: 0,
            negative_class: 1,
        }
    }
}

/// Settings of the latency table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyParams {
    /// Encoder/decoder width of the timing model.
    pub hidden: usize,
    pub batch: usize,
    pub repetitions: usize,
    pub strategies: Vec<Strategy>,
}

impl Default for LatencyParams {
    fn default() -> Self {
        Self {
            hidden: 512,
            batch: 64,
            repetitions: 21,
            strategies: Strategy::ALL.to_vec(),
        }
    }
}

/// Fully resolved experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub strategy: Vec<Strategy>,
    pub phi: Vec<f64>,
    pub tau: Vec<f64>,
    pub alpha: Vec<f64>,
    pub theta: Vec<f64>,
    pub steps: usize,
    pub seeds: Vec<u64>,
    pub n_samples: usize,
    pub parameterization: Parameterization,
    pub dataset: DatasetParams,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Load weights from here instead of training one model per seed.
    pub model_path: Option<PathBuf>,
    pub out: PathBuf,
    pub disable_normalization: bool,
    pub disable_refinement: bool,
    pub latency: LatencyParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            strategy: vec![Strategy::None, Strategy::Nag],
            phi: vec![4.0],
            tau: vec![2.5],
            alpha: vec![0.25],
            theta: vec![1.0],
            steps: 4,
            seeds: (0..5).collect(),
            n_samples: 500,
            parameterization: Parameterization::Epsilon,
            dataset: DatasetParams::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            model_path: None,
            out: PathBuf::from("runs/default"),
            disable_normalization: false,
            disable_refinement: false,
            latency: LatencyParams::default(),
        }
    }
}

/// On-disk form: every field optional, sweep axes accept scalars or lists.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub schema_version: Option<u32>,
    pub strategy: Option<Axis<Strategy>>,
    pub phi: Option<Axis<f64>>,
    pub tau: Option<Axis<f64>>,
    pub alpha: Option<Axis<f64>>,
    pub theta: Option<Axis<f64>>,
    pub steps: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub n_samples: Option<usize>,
    pub parameterization: Option<Parameterization>,
    pub dataset: Option<DatasetParams>,
    pub model: Option<ModelConfig>,
    pub train: Option<TrainConfig>,
    pub model_path: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub disable_normalization: Option<bool>,
    pub disable_refinement: Option<bool>,
    pub latency: Option<LatencyParams>,
}

/// Values given on the command line; `None` or empty means "not given".
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub strategy: Option<Strategy>,
    pub phi: Vec<f64>,
    pub tau: Vec<f64>,
    pub alpha: Vec<f64>,
    pub theta: Vec<f64>,
    pub steps: Option<usize>,
    pub seeds: Vec<u64>,
    pub disable_normalization: bool,
    pub disable_refinement: bool,
    pub out: Option<PathBuf>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| {
            let path = e
                .span()
                .map(|s| format!("byte {}", s.start))
                .unwrap_or_else(|| "<file>".into());
            ConfigError::new(path, e.message().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new(path.display().to_string(), e.to_string()))?;
        Self::parse(&text)
    }
}

impl ExperimentConfig {
    /// Applies `file` over the defaults, then `flags` over the result, and
    /// validates.
    pub fn resolve(file: FileConfig, flags: &Overrides) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        if let Some(v) = file.schema_version {
            if v != SCHEMA_VERSION {
                return Err(ConfigError::new(
                    "schema_version",
                    format!("unsupported version {v}, expected {SCHEMA_VERSION}"),
                ));
            }
        }
        macro_rules! take {
            ($field:ident) => {
                if let Some(v) = file.$field {
                    c.$field = v;
                }
            };
            ($field:ident, axis) => {
                if let Some(v) = file.$field {
                    c.$field = v.into_vec();
                }
            };
        }
        take!(strategy, axis);
        take!(phi, axis);
        take!(tau, axis);
        take!(alpha, axis);
        take!(theta, axis);
        take!(steps);
        take!(seeds);
        take!(n_samples);
        take!(parameterization);
        take!(dataset);
        take!(model);
        take!(train);
        take!(out);
        take!(disable_normalization);
        take!(disable_refinement);
        take!(latency);
        c.model_path = file.model_path;

        if let Some(s) = flags.strategy {
            c.strategy = vec![s];
        }
        for (axis, values) in [
            (&mut c.phi, &flags.phi),
            (&mut c.tau, &flags.tau),
            (&mut c.alpha, &flags.alpha),
            (&mut c.theta, &flags.theta),
        ] {
            if !values.is_empty() {
                *axis = values.clone();
            }
        }
        if let Some(n) = flags.steps {
            c.steps = n;
        }
        if !flags.seeds.is_empty() {
            c.seeds = flags.seeds.clone();
        }
        c.disable_normalization |= flags.disable_normalization;
        c.disable_refinement |= flags.disable_refinement;
        if let Some(out) = &flags.out {
            c.out = out.clone();
        }
        c.model.parameterization = c.parameterization;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn axis(name: &str, values: &[f64], ok: impl Fn(f64) -> bool, rule: &str) -> Result<(), ConfigError> {
            if values.is_empty() {
                return Err(ConfigError::new(name, "needs at least one value"));
            }
            for (i, &v) in values.iter().enumerate() {
                if !ok(v) {
                    return Err(ConfigError::new(
                        format!("{name}[{i}]"),
                        format!("{v} violates {rule}"),
                    ));
                }
            }
            Ok(())
        }
        if self.strategy.is_empty() {
            return Err(ConfigError::new("strategy", "needs at least one value"));
        }
        axis("phi", &self.phi, |v| v.is_finite() && v >= 0.0, "0 <= phi")?;
        axis("tau", &self.tau, |v| v.is_finite() && v >= 1.0, "tau >= 1")?;
        axis(
            "alpha",
            &self.alpha,
            |v| (0.0..=1.0).contains(&v),
            "0 <= alpha <= 1",
        )?;
        axis(
            "theta",
            &self.theta,
            |v| (0.0..=1.0).contains(&v),
            "0 <= theta <= 1",
        )?;
        if self.steps == 0 {
            return Err(ConfigError::new("steps", "must be >= 1"));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::new("seeds", "needs at least one seed"));
        }
        if self.n_samples == 0 {
            return Err(ConfigError::new("n_samples", "must be >= 1"));
        }
        if self.disable_normalization || self.disable_refinement {
            if let Some((i, s)) = self
                .strategy
                .iter()
                .enumerate()
                .find(|(_, s)| **s != Strategy::Nag)
            {
                let flag = if self.disable_normalization {
                    "disable_normalization"
                } else {
                    "disable_refinement"
                };
                return Err(ConfigError::new(
                    format!("strategy[{i}]"),
                    format!("{flag} only applies to strategy nag, got {s}"),
                ));
            }
        }
        let d = &self.dataset;
        if d.centers.len() < 2 {
            return Err(ConfigError::new("dataset.centers", "need at least 2 centers"));
        }
        if d.centers.len() != self.model.classes {
            return Err(ConfigError::new(
                "dataset.centers",
                format!(
                    "{} centers for {} model classes",
                    d.centers.len(),
                    self.model.classes
                ),
            ));
        }
        if !(d.sigma.is_finite() && d.sigma >= 0.0) {
            return Err(ConfigError::new("dataset.sigma", "must be finite and >= 0"));
        }
        if d.n_per_class == 0 && self.model_path.is_none() {
            return Err(ConfigError::new("dataset.n_per_class", "training needs samples"));
        }
        for (name, class) in [
            ("dataset.positive_class", d.positive_class),
            ("dataset.negative_class", d.negative_class),
        ] {
            if class >= d.centers.len() {
                return Err(ConfigError::new(name, format!("no class {class}")));
            }
        }
        if d.positive_class == d.negative_class || d.centers[d.positive_class] == d.centers[d.negative_class]
        {
            return Err(ConfigError::new(
                "dataset.negative_class",
                "must differ from the positive class and its center",
            ));
        }
        self.model
            .validate()
            .map_err(|e| ConfigError::new("model", e.to_string()))?;
        if self.train.batch_size == 0 || !(self.train.lr.is_finite() && self.train.lr >= 0.0) {
            return Err(ConfigError::new(
                "train",
                "batch_size >= 1 and finite lr >= 0 required",
            ));
        }
        if self.latency.batch == 0 || self.latency.hidden == 0 {
            return Err(ConfigError::new("latency", "batch and hidden must be >= 1"));
        }
        Ok(())
    }

    /// Every point of the strategy x phi x tau x alpha x theta grid, in
    /// config order.
    pub fn settings(&self) -> Vec<Setting> {
        let mut out = Vec::new();
        for &strategy in &self.strategy {
            for &phi in &self.phi {
                for &tau in &self.tau {
                    for &alpha in &self.alpha {
                        for &theta in &self.theta {
                            out.push(Setting {
                                strategy,
                                phi,
                                tau,
                                alpha,
                                theta,
                                disable_normalization: self.disable_normalization,
                                disable_refinement: self.disable_refinement,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

/// One point of the hyperparameter grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Setting {
    pub strategy: Strategy,
    pub phi: f64,
    pub tau: f64,
    pub alpha: f64,
    pub theta: f64,
    pub disable_normalization: bool,
    pub disable_refinement: bool,
}

impl Setting {
    pub fn guidance(&self) -> guidance_lab::GuidanceConfig64 {
        let mut g = guidance_lab::GuidanceConfig::nag(self.phi, self.tau, self.alpha)
            .with_strategy(self.strategy)
            .with_theta(self.theta);
        g.disable_normalization = self.disable_normalization;
        g.disable_refinement = self.disable_refinement;
        g
    }
}
