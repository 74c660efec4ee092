//! Experiment configuration: a single JSON document whose sections mirror
//! the library's config types. Every field has a default, so `{}` is valid.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::dataio::TabularMapping;
use crate::error::{Error, Result};
use crate::eval::{Distance, ProbeConfig, Scope};
use crate::frameworks::{Framework, TrainerConfig};
use crate::nn::Activation;
use crate::objectives::{ObjectiveConfig, ObjectiveKind};
use crate::simgen::SimConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub activation: Activation,
    /// Per-cell-line projection heads on the drug encoder when the data has
    /// more than one cell line.
    pub cell_line_heads: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 32,
            encoder_hidden: vec![128, 128],
            classifier_hidden: vec![64],
            activation: Activation::Relu,
            cell_line_heads: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub retrieval_ns: Vec<usize>,
    pub scope: Scope,
    pub probe: ProbeConfig,
    /// Neighborhood size for purity and batch mixing.
    pub knn_k: usize,
    pub distance: Distance,
    pub normalize_entropy: bool,
    /// Head used on frozen embeddings in fairness mode.
    pub fairness_probe: ProbeConfig,
    /// Hold-out fraction per batch when the data carries no split.
    pub holdout_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            retrieval_ns: vec![1, 5, 10],
            scope: Scope::Whole,
            probe: ProbeConfig::default(),
            knn_k: 20,
            distance: Distance::Euclidean,
            normalize_entropy: false,
            fairness_probe: ProbeConfig { hidden: Some(32), steps: 300, lr: 0.01, ..ProbeConfig::default() },
            holdout_fraction: 0.5,
        }
    }
}

/// Delimited train/test tables plus their column mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabularSource {
    pub train: PathBuf,
    pub test: PathBuf,
    /// Path to a JSON [`TabularMapping`], relative to the config file.
    pub mapping: PathBuf,
    /// Protected-subgroup ratios applied to the training table.
    #[serde(default)]
    pub subsample: Option<[usize; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Copied into every sub-config that has a seed.
    pub seed: u64,
    /// Canonical paired CSV.
    pub data: Option<PathBuf>,
    pub tabular: Option<TabularSource>,
    pub out: PathBuf,
    pub sim: SimConfig,
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    pub objective: ObjectiveConfig,
    pub augment: AugmentConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: None,
            tabular: None,
            out: PathBuf::from("out"),
            sim: SimConfig::default(),
            model: ModelConfig::default(),
            trainer: TrainerConfig::default(),
            objective: ObjectiveConfig::default(),
            augment: AugmentConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parse a config file; relative paths inside are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(d) = cfg.data.as_mut() {
            resolve(d);
        }
        if let Some(t) = cfg.tabular.as_mut() {
            resolve(&mut t.train);
            resolve(&mut t.test);
            resolve(&mut t.mapping);
        }
        cfg.apply_seed(cfg.seed);
        Ok(cfg)
    }

    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.sim.seed = seed;
        self.trainer.seed = seed;
        self.eval.probe.seed = seed;
        self.eval.fairness_probe.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.trainer.validate()?;
        self.objective.validate()?;
        self.augment.validate()?;
        if self.model.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        if self.data.is_some() && self.tabular.is_some() {
            return Err(Error::Config("set either 'data' or 'tabular', not both".into()));
        }
        if self.objective.objective == ObjectiveKind::Ccl
            && self.trainer.framework == Framework::Moco
            && self.trainer.max_ccl_conditions == 0
        {
            return Err(Error::Config("ccl with moco needs max_ccl_conditions > 0".into()));
        }
        if !(0.0..1.0).contains(&self.eval.holdout_fraction) {
            return Err(Error::Config(format!("holdout_fraction = {} must lie in [0, 1)", self.eval.holdout_fraction)));
        }
        Ok(())
    }

    pub fn load_mapping(&self) -> Result<Option<TabularMapping>> {
        let Some(t) = &self.tabular else { return Ok(None) };
        let text = std::fs::read_to_string(&t.mapping)
            .map_err(|e| Error::Config(format!("cannot read mapping {}: {e}", t.mapping.display())))?;
        serde_json::from_str(&text).map(Some).map_err(|e| Error::Config(format!("{}: {e}", t.mapping.display())))
    }
}
