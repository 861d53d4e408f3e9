//! Experiment configuration: a strict TOML schema with nested sections.
//! Unknown keys are hard errors, and semantic problems report the full
//! field path.

use crate::error::{Error, Result};
use crate::optimizer::TrainConfig;
use crate::pruning::{PruneConfig, PruneScope};
use crate::regularizers::{AlphaSpec, RegKind, RegularizerSpec, DEFAULT_HOYER_EPS};
use crate::rng::fnv1a64;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const MNIST_DIR_ENV: &str = "DSTF_MNIST_DIR";

pub const KNOWN_MODELS: [&str; 3] = ["lenet5", "mlp_toy", "cnn_toy"];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub regularizer: RegBlock,
    #[serde(default)]
    pub prune: PruneBlock,
    #[serde(default)]
    pub stage1: TrainBlock,
    #[serde(default)]
    pub stage2: TrainBlock,
    #[serde(default)]
    pub stage3: TrainBlock,
    #[serde(default)]
    pub compare: CompareBlock,
    #[serde(default)]
    pub grid: GridBlock,
}

fn default_seed() -> u64 {
    42
}
fn default_model() -> String {
    "lenet5".into()
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Mnist,
    Synthetic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Directory holding the four MNIST idx files. Falls back to the
    /// DSTF_MNIST_DIR environment variable when absent.
    pub mnist_dir: Option<PathBuf>,
    pub normalize: bool,
    /// Synthetic-source knobs; ignored for mnist.
    pub n_train: usize,
    pub n_test: usize,
    pub classes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Mnist,
            mnist_dir: None,
            normalize: true,
            n_train: 512,
            n_test: 128,
            classes: 4,
        }
    }
}

impl DataConfig {
    /// MNIST directory after environment fallback.
    pub fn resolved_mnist_dir(&self) -> Result<PathBuf> {
        if let Some(dir) = &self.mnist_dir {
            return Ok(dir.clone());
        }
        match std::env::var_os(MNIST_DIR_ENV) {
            Some(v) if !v.is_empty() => Ok(PathBuf::from(v)),
            _ => Err(Error::Config(format!(
                "data.mnist_dir: not set and {MNIST_DIR_ENV} is empty"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegBlock {
    #[serde(default = "default_reg_kind")]
    pub kind: RegKind,
    #[serde(default = "default_alpha")]
    pub alpha: AlphaSpec,
    /// Required when kind = "tl1". An absent [regularizer] section takes
    /// the published default instead (see Default impl).
    #[serde(default)]
    pub beta: Option<f64>,
    /// Overrides `alpha` for the third pipeline stage of a dual run.
    #[serde(default)]
    pub dual_alpha: Option<AlphaSpec>,
    #[serde(default = "default_hoyer_eps")]
    pub hoyer_eps: f64,
}

fn default_reg_kind() -> RegKind {
    RegKind::Tl1
}
fn default_alpha() -> AlphaSpec {
    AlphaSpec::Uniform(1e-8)
}
fn default_hoyer_eps() -> f64 {
    DEFAULT_HOYER_EPS
}

impl Default for RegBlock {
    fn default() -> Self {
        RegBlock {
            kind: RegKind::Tl1,
            alpha: AlphaSpec::Uniform(1e-8),
            beta: Some(1e-4),
            dual_alpha: None,
            hoyer_eps: DEFAULT_HOYER_EPS,
        }
    }
}

impl RegBlock {
    pub fn to_spec(&self) -> Result<RegularizerSpec> {
        self.build(self.alpha.clone())
    }

    /// Spec for the dual pipeline's activation stage.
    pub fn to_dual_spec(&self) -> Result<RegularizerSpec> {
        self.build(self.dual_alpha.clone().unwrap_or_else(|| self.alpha.clone()))
    }

    fn build(&self, alpha: AlphaSpec) -> Result<RegularizerSpec> {
        let beta = match (self.kind, self.beta) {
            (RegKind::Tl1, None) => {
                return Err(Error::Config(
                    "regularizer.beta: required when kind = \"tl1\"".into(),
                ))
            }
            (_, Some(b)) => b,
            (_, None) => 1.0,
        };
        let spec = RegularizerSpec { kind: self.kind, alpha, beta, hoyer_eps: self.hoyer_eps };
        spec.validate()
            .map_err(|e| Error::Config(format!("regularizer: {e}")))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneBlock {
    pub target_rate: f64,
    pub scope: PruneScope,
    pub weight_l1_alpha: f64,
    pub induce_epochs: usize,
    pub finetune_epochs: usize,
}

impl Default for PruneBlock {
    fn default() -> Self {
        PruneBlock {
            target_rate: 0.6,
            scope: PruneScope::PerLayer,
            weight_l1_alpha: 1e-5,
            induce_epochs: 5,
            finetune_epochs: 5,
        }
    }
}

impl PruneBlock {
    pub fn to_prune_config(&self) -> Result<PruneConfig> {
        let cfg = PruneConfig {
            target_rate: self.target_rate,
            scope: self.scope,
            weight_l1_alpha: self.weight_l1_alpha,
            phase_epochs: (self.induce_epochs, self.finetune_epochs),
        };
        cfg.validate().map_err(|e| Error::Config(format!("prune: {e}")))?;
        Ok(cfg)
    }
}

/// Partial training-recipe override; unset fields take the stage default.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainBlock {
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub lr_schedule: Option<Vec<(usize, f64)>>,
}

impl TrainBlock {
    pub fn resolve(&self, base: TrainConfig, path: &str) -> Result<TrainConfig> {
        let epochs = self.epochs.unwrap_or(base.epochs);
        // an inherited default schedule shrinks with an overridden epoch
        // count; an explicit schedule is validated as written
        let lr_schedule = match &self.lr_schedule {
            Some(s) => s.clone(),
            None => base.lr_schedule.into_iter().filter(|(e, _)| *e < epochs).collect(),
        };
        let cfg = TrainConfig {
            lr: self.lr.unwrap_or(base.lr),
            momentum: self.momentum.unwrap_or(base.momentum),
            weight_decay: self.weight_decay.unwrap_or(base.weight_decay),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            epochs,
            lr_schedule,
            seed: base.seed,
        };
        cfg.validate().map_err(|e| Error::Config(format!("{path}: {e}")))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareBlock {
    pub epochs: usize,
    pub l1_alpha: f64,
    pub hoyer_alpha: f64,
    pub tl1_alpha: f64,
    pub tl1_beta: f64,
}

impl Default for CompareBlock {
    fn default() -> Self {
        CompareBlock {
            epochs: 20,
            l1_alpha: 1e-8,
            hoyer_alpha: 1e-8,
            tl1_alpha: 1e-8,
            tl1_beta: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridBlock {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub epochs: usize,
    pub accuracy_floor: f64,
}

impl Default for GridBlock {
    fn default() -> Self {
        GridBlock {
            alphas: vec![1e-8],
            betas: vec![1e-4],
            epochs: 2,
            accuracy_floor: 0.99,
        }
    }
}

/// Parses and validates a config document. Entry point for untrusted input.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        parse_config_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !KNOWN_MODELS.contains(&self.model.as_str()) {
            return Err(Error::Config(format!(
                "model: unknown model {:?}; expected one of {:?}",
                self.model, KNOWN_MODELS
            )));
        }
        match (self.model.as_str(), self.data.source) {
            ("lenet5", DataSource::Mnist) => {}
            ("lenet5", DataSource::Synthetic) => {
                return Err(Error::Config(
                    "data.source: lenet5 takes 28x28 inputs; use source = \"mnist\"".into(),
                ))
            }
            (_, DataSource::Mnist) => {
                return Err(Error::Config(format!(
                    "data.source: {} takes 8x8 inputs; use source = \"synthetic\"",
                    self.model
                )))
            }
            (_, DataSource::Synthetic) => {}
        }
        if self.data.source == DataSource::Synthetic {
            if self.data.classes < 2 || self.data.classes > 16 {
                return Err(Error::Config(
                    "data.classes: must be between 2 and 16".into(),
                ));
            }
            if self.data.n_train < self.data.classes || self.data.n_test < self.data.classes {
                return Err(Error::Config(
                    "data.n_train/n_test: need at least one sample per class".into(),
                ));
            }
        }
        self.regularizer.to_spec()?;
        self.prune.to_prune_config()?;
        if self.stage2.epochs.is_some() {
            return Err(Error::Config(
                "stage2.epochs: stage-2 epoch counts live in prune.induce_epochs and prune.finetune_epochs".into(),
            ));
        }
        self.stage1_train()?;
        self.stage2_train()?;
        self.stage3_train()?;
        if self.compare.epochs > 0 {
            // strengths must be usable as uniform specs
            RegularizerSpec::uniform(RegKind::L1, self.compare.l1_alpha, 1.0)
                .map_err(|e| Error::Config(format!("compare.l1_alpha: {e}")))?;
            RegularizerSpec::uniform(RegKind::HoyerSq, self.compare.hoyer_alpha, 1.0)
                .map_err(|e| Error::Config(format!("compare.hoyer_alpha: {e}")))?;
            RegularizerSpec::uniform(RegKind::Tl1, self.compare.tl1_alpha, self.compare.tl1_beta)
                .map_err(|e| Error::Config(format!("compare.tl1_alpha/tl1_beta: {e}")))?;
        }
        if !self.grid.accuracy_floor.is_finite() {
            return Err(Error::Config("grid.accuracy_floor: must be finite".into()));
        }
        Ok(())
    }

    pub fn stage1_train(&self) -> Result<TrainConfig> {
        self.stage1.resolve(TrainConfig::lenet5_default(self.seed), "stage1")
    }

    /// Recipe for both stage-2 phases; the epoch counts come from the
    /// prune block.
    pub fn stage2_train(&self) -> Result<TrainConfig> {
        let base = TrainConfig {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 256,
            epochs: 0,
            lr_schedule: vec![],
            seed: self.seed,
        };
        self.stage2.resolve(base, "stage2")
    }

    pub fn stage3_train(&self) -> Result<TrainConfig> {
        let base = TrainConfig {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 256,
            epochs: 20,
            lr_schedule: vec![],
            seed: self.seed,
        };
        self.stage3.resolve(base, "stage3")
    }

    /// Stable digest of the semantic config content, for checkpoint
    /// compatibility checks. The output directory is presentation, not
    /// semantics, and is excluded.
    pub fn digest(&self) -> String {
        let mut canon = self.clone();
        canon.output_dir = PathBuf::new();
        let canonical = serde_json::to_string(&canon).expect("config serializes");
        format!("{:016x}", fnv1a64(&canonical))
    }
}
