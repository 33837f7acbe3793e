//! Experiment configuration, read from JSON or TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use seqsleep_core::inference::FoldSpec;
use seqsleep_core::models::{ModelConfig, ModelKind};
use seqsleep_core::training::TrainConfig;
use seqsleep_core::transfer::{FinetuneStrategy, TransferScenario};

use crate::dataset::DatasetSource;
use crate::error::{Error, IoContext, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Full,
    #[default]
    Tiny,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub preset: Preset,
    /// Sequence length; the preset's value when absent.
    pub seq_len: Option<usize>,
    /// Complete network configuration replacing the preset. Its channel
    /// count is still taken from the scenario.
    pub custom: Option<ModelConfig>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::SeqSleepNetPlus,
            preset: Preset::Tiny,
            seq_len: None,
            custom: None,
        }
    }
}

impl ModelSection {
    pub fn build(&self, n_channels: usize) -> Result<ModelConfig> {
        let mut cfg = match (&self.custom, self.preset) {
            (Some(c), _) => c.clone(),
            (None, Preset::Full) => match self.kind {
                ModelKind::SeqSleepNetPlus => ModelConfig::seqsleepnet_plus(n_channels),
                ModelKind::DeepSleepNetPlus => ModelConfig::deepsleepnet_plus(n_channels),
            },
            (None, Preset::Tiny) => ModelConfig::tiny(self.kind, n_channels, 10),
        };
        cfg.n_channels = n_channels;
        if let Some(l) = self.seq_len {
            cfg.seq_len = l;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Cross-validation over target subjects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoldSection {
    /// Number of folds; leave-one-subject-out when absent.
    pub k: Option<usize>,
    /// Validation subjects drawn from each fold's training subjects.
    pub n_validation: usize,
}

impl Default for FoldSection {
    fn default() -> Self {
        Self {
            k: None,
            n_validation: 1,
        }
    }
}

impl FoldSection {
    pub fn fold_spec(&self, subjects: &[String], seed: u64) -> Result<FoldSpec> {
        let spec = match self.k {
            Some(k) => FoldSpec::k_fold(subjects, k, self.n_validation, seed)?,
            None => FoldSpec::leave_one_out(subjects, self.n_validation, seed)?,
        };
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Finetuning subject counts.
    pub counts: Vec<usize>,
    /// Held-out target subjects every sweep point is tested on.
    pub n_test: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            counts: vec![1, 2, 4],
            n_test: 2,
        }
    }
}

/// One run. The top-level `seed` drives every random choice: network
/// initialization, validation picks, fold assignment and minibatch order
/// (the `seed` fields inside the train sections are replaced by derived
/// values).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub scenario: TransferScenario,
    pub strategy: FinetuneStrategy,
    pub model: ModelSection,
    pub source: Option<DatasetSource>,
    pub target: Option<DatasetSource>,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    /// Source subjects held out for early stopping during pretraining.
    pub source_validation: usize,
    pub folds: FoldSection,
    pub sweep: SweepSection,
    /// Sequences per forward pass at evaluation time.
    pub eval_batch: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: None,
            scenario: TransferScenario::Eeg,
            strategy: FinetuneStrategy::All,
            model: ModelSection::default(),
            source: None,
            target: None,
            pretrain: TrainConfig::default(),
            finetune: TrainConfig::default(),
            source_validation: 0,
            folds: FoldSection::default(),
            sweep: SweepSection::default(),
            eval_batch: 32,
        }
    }
}

impl ExperimentConfig {
    /// Parses `.toml` files as TOML and anything else as JSON. Relative
    /// dataset paths are resolved against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        let mut cfg: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|source| Error::Toml {
                path: path.into(),
                source,
            })?
        } else {
            serde_json::from_str(&text).map_err(|source| Error::Json {
                path: path.into(),
                source,
            })?
        };
        let base = path.parent().unwrap_or(Path::new(""));
        for src in [cfg.source.as_mut(), cfg.target.as_mut()]
            .into_iter()
            .flatten()
        {
            if let DatasetSource::Prepared { path } = src {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        }
        if let Some(out) = cfg.output_dir.as_mut().filter(|o| o.is_relative()) {
            *out = base.join(&*out);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.eval_batch == 0 {
            return Err(Error::Config("eval_batch must be positive".into()));
        }
        if self.sweep.counts.contains(&0) {
            return Err(Error::Config("sweep counts must be positive".into()));
        }
        self.model.build(self.scenario.source_modalities().len())?;
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        self.model.build(self.scenario.source_modalities().len())
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.pretrain.clone()
        }
    }

    /// Finetuning settings of fold `i`.
    pub fn finetune_config(&self, i: usize) -> TrainConfig {
        TrainConfig {
            seed: self.seed.wrapping_add(1000 + i as u64),
            ..self.finetune.clone()
        }
    }

    pub fn require_source(&self) -> Result<&DatasetSource> {
        self.source
            .as_ref()
            .ok_or_else(|| Error::Config("the config has no `source` dataset".into()))
    }

    pub fn require_target(&self) -> Result<&DatasetSource> {
        self.target
            .as_ref()
            .ok_or_else(|| Error::Config("the config has no `target` dataset".into()))
    }
}
