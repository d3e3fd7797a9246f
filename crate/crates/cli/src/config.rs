//! TOML run configuration. Every table rejects unknown keys; every key has a
//! default, so an empty file is a valid configuration.

use std::path::{Path, PathBuf};

use grm_core::head::LossConfig;
use grm_core::model::ModelConfig;
use grm_core::relation::GumbelConfig;
use grm_tracker::optim::AdamWConfig;
use grm_tracker::scenario::Suite;
use grm_tracker::train::{DataConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub pairs_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decay_epoch: Option<usize>,
    pub decay_factor: f64,
    pub optimizer: AdamWConfig,
    pub gumbel: GumbelConfig,
    pub loss: LossConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            pairs_per_epoch: t.pairs_per_epoch,
            batch_size: t.batch_size,
            lr: t.lr,
            decay_epoch: t.decay_epoch,
            decay_factor: t.decay_factor,
            optimizer: t.optimizer,
            gumbel: t.gumbel,
            loss: t.loss,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub suite: Suite,
    pub sequences: usize,
    pub frames: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            suite: Suite::Easy,
            sequences: 10,
            frames: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    /// Variant labels to run, from `#1 #2 #5 #b #c #d #e`.
    pub variants: Vec<String>,
    /// Suite used for both training and evaluation of every variant.
    pub suite: Suite,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            variants: ["#1", "#2", "#5", "#b", "#c", "#d", "#e"].map(String::from).to_vec(),
            suite: Suite::Distractor,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub data: DataConfig,
    pub eval: EvalSection,
    pub ablate: AblateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            data: DataConfig::default(),
            eval: EvalSection::default(),
            ablate: AblateSection::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::parse(text).map_err(|e| CliError::Config(format!("TOML syntax: {e}")))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("at `{path}`: {}", e.into_inner().message().trim()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train_config().validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.eval.sequences == 0 || self.eval.frames < 2 {
            return Err(CliError::Config("eval needs sequences >= 1 and frames >= 2".into()));
        }
        for v in &self.ablate.variants {
            crate::commands::ablate::Variant::from_label(v)?;
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            seed: self.seed,
            epochs: t.epochs,
            pairs_per_epoch: t.pairs_per_epoch,
            batch_size: t.batch_size,
            lr: t.lr,
            decay_epoch: t.decay_epoch,
            decay_factor: t.decay_factor,
            optimizer: t.optimizer,
            gumbel: t.gumbel,
            loss: t.loss,
            model: self.model.clone(),
            data: self.data.clone(),
        }
    }

    /// The annotated default configuration.
    pub fn reference() -> String {
        let body = toml::to_string_pretty(&RunConfig::default()).expect("default config serializes");
        format!("{REFERENCE_HEADER}\n{body}")
    }
}

const REFERENCE_HEADER: &str = "\
# Default run configuration, generated by `grm config-reference`.
# Every key is optional; unknown keys are rejected.
#
# Optional keys not shown because they default to unset:
#   train.decay_epoch         epoch at which lr is multiplied by decay_factor
#                             (unset: 80% of train.epochs)
#
# Enumerations:
#   model.relation            adaptive | two_stream | one_stream
#   model.pooling             max | avg
#   train.gumbel.mode         train | eval (training requires train)
#   train.loss.anchor         ground_truth | predicted
#   data.suite, eval.suite,
#   ablate.suite              easy | distractor
#   ablate.variants           any of #1 #2 #5 #b #c #d #e
#   train.optimizer.grad_clip 0 disables gradient clipping
#
# The environment variable GRM_SEED overrides `seed`; `--seed` overrides both.
";
