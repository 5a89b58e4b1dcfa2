//! The pipeline config file: backends, stage defaults, paths, jobs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use atlantis_core::backends::{BackendRegistry, BackendSpec};
use atlantis_core::datasetbuild::ConversionConfig;
use atlantis_core::evaluate::EvalConfig;
use atlantis_core::genpipe::GenerationConfig;
use atlantis_core::uncertainty::{DuOptions, VarianceKind, DEFAULT_THRESHOLD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DuSettings {
    pub threshold: f64,
    pub variance: VarianceKind,
    pub normalize: bool,
}

impl Default for DuSettings {
    fn default() -> Self {
        let o = DuOptions::default();
        Self { threshold: DEFAULT_THRESHOLD, variance: o.variance, normalize: o.normalize }
    }
}

impl DuSettings {
    pub fn options(&self) -> DuOptions {
        DuOptions { variance: self.variance, normalize: self.normalize }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Base for relative path arguments.
    pub work_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Opaque hyperparameters handed to the training backend.
    pub hyperparameters: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Extra backends by id, on top of the built-in mocks.
    pub backends: BTreeMap<String, BackendSpec>,
    pub generation: GenerationConfig,
    pub conversion: ConversionConfig,
    pub eval: EvalConfig,
    pub uncertainty: DuSettings,
    pub split_ratio: f64,
    pub train: TrainSection,
    pub paths: Paths,
    pub jobs: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            backends: BTreeMap::new(),
            generation: GenerationConfig::default(),
            conversion: ConversionConfig::default(),
            eval: EvalConfig::default(),
            uncertainty: DuSettings::default(),
            split_ratio: 0.9,
            train: TrainSection::default(),
            paths: Paths::default(),
            jobs: 1,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    /// Checks stage defaults and builds the registry.
    pub fn validate(&self) -> atlantis_core::Result<BackendRegistry> {
        self.generation.validate()?;
        self.conversion.validate()?;
        self.eval.validate()?;
        if !(self.uncertainty.threshold > 0.0) {
            return Err(atlantis_core::Error::NonPositiveThreshold(self.uncertainty.threshold));
        }
        if !(0.0..=1.0).contains(&self.split_ratio) {
            return Err(atlantis_core::Error::InvalidConfig(format!("split_ratio {} outside [0, 1]", self.split_ratio)));
        }
        if self.jobs == 0 {
            return Err(atlantis_core::Error::InvalidConfig("jobs must be >= 1".into()));
        }
        let mut registry = BackendRegistry::with_mocks();
        for (id, spec) in &self.backends {
            registry.register_spec(id, spec)?;
        }
        Ok(registry)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        match &self.paths.work_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }
}
