//! Checkpoints: `checkpoint.json` (configuration, parameter layout,
//! normalization, provenance) next to `params.bin` holding every parameter
//! value as little-endian `f64`, in registration order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use seqsleep_core::features::{FeatureSpec, NormalizationStats, StftConfig};
use seqsleep_core::models::{Model, ModelConfig, ModelKind};
use seqsleep_core::params::{Group, ParamKind, ParameterStore};
use seqsleep_core::recordings::Modality;
use seqsleep_core::transfer::Pretrained;

use crate::blob::{read_f64, read_json, sha256_hex, to_json, write_bytes, write_f64};
use crate::error::{Error, Result};

pub const META: &str = "checkpoint.json";
pub const VALUES: &str = "params.bin";

/// Input features a model of `kind` expects.
pub fn feature_spec(kind: ModelKind) -> FeatureSpec {
    match kind {
        ModelKind::SeqSleepNetPlus => FeatureSpec::Image(StftConfig::default()),
        ModelKind::DeepSleepNetPlus => FeatureSpec::Raw,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: Group,
    pub kind: ParamKind,
    /// Offset into `params.bin`, in values.
    pub offset: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub seed: u64,
    pub dataset_sha256: String,
    pub train_subjects: Vec<String>,
    pub steps: usize,
    pub best_step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    pub model: ModelConfig,
    pub config_sha256: String,
    pub feature: FeatureSpec,
    pub modalities: Vec<Modality>,
    /// Fitted on the pretraining recordings; applied to every later input.
    pub normalization: Option<NormalizationStats>,
    /// Learnable element count per group.
    pub groups: BTreeMap<Group, usize>,
    pub params: Vec<ParamEntry>,
    pub n_values: usize,
    pub values_sha256: String,
    pub provenance: Provenance,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub feature: FeatureSpec,
    pub modalities: Vec<Modality>,
    pub normalization: Option<NormalizationStats>,
    pub provenance: Provenance,
}

impl Checkpoint {
    pub fn pretrained(&self) -> Pretrained {
        Pretrained::from(&self.model)
    }

    /// Writes both files into `dir`; returns the digests of
    /// `checkpoint.json` and `params.bin`.
    pub fn save(&self, dir: &Path) -> Result<(String, String)> {
        let store = &self.model.store;
        let mut params = Vec::with_capacity(store.len());
        let mut values = Vec::new();
        let mut groups = BTreeMap::new();
        for (_, p) in store.iter() {
            params.push(ParamEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
                group: p.group,
                kind: p.kind,
                offset: values.len(),
            });
            if p.is_learnable() {
                *groups.entry(p.group).or_insert(0) += p.numel();
            }
            values.extend_from_slice(&p.value);
        }
        let values_sha256 = write_f64(&dir.join(VALUES), &values)?;
        let meta = CheckpointMeta {
            format: 1,
            config_sha256: sha256_hex(to_json(&self.model.config).as_bytes()),
            model: self.model.config.clone(),
            feature: self.feature,
            modalities: self.modalities.clone(),
            normalization: self.normalization.clone(),
            groups,
            params,
            n_values: values.len(),
            values_sha256: values_sha256.clone(),
            provenance: self.provenance.clone(),
        };
        let text = to_json(&meta);
        write_bytes(&dir.join(META), text.as_bytes())?;
        Ok((sha256_hex(text.as_bytes()), values_sha256))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META);
        let meta: CheckpointMeta = read_json(&meta_path)?;
        if meta.format != 1 {
            return Err(Error::Config(format!(
                "{}: unsupported format {}",
                meta_path.display(),
                meta.format
            )));
        }
        if sha256_hex(to_json(&meta.model).as_bytes()) != meta.config_sha256 {
            return Err(Error::Corrupt(
                meta_path,
                "model configuration digest mismatch".into(),
            ));
        }
        let values = read_f64(&dir.join(VALUES), meta.n_values, &meta.values_sha256)?;
        let mut store = ParameterStore::new();
        for (i, p) in meta.params.iter().enumerate() {
            let n: usize = p.shape.iter().product();
            let end = meta.params.get(i + 1).map_or(meta.n_values, |q| q.offset);
            if end < p.offset || end - p.offset != n {
                return Err(Error::Corrupt(
                    meta_path,
                    format!("parameter {} has a bad offset", p.name),
                ));
            }
            store.add(
                &p.name,
                &p.shape,
                p.group,
                p.kind,
                values[p.offset..end].to_vec(),
            );
        }
        let model = Model::from_store(&meta.model, &store)?;
        Ok(Self {
            model,
            feature: meta.feature,
            modalities: meta.modalities,
            normalization: meta.normalization,
            provenance: meta.provenance,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let cfg = ModelConfig::tiny(ModelKind::DeepSleepNetPlus, 2, 3);
        let model = Model::build(&cfg, 5).unwrap();
        let ck = Checkpoint {
            model,
            feature: feature_spec(cfg.kind),
            modalities: vec![Modality::Eeg, Modality::Eog],
            normalization: None,
            provenance: Provenance {
                command: "pretrain".into(),
                seed: 5,
                ..Provenance::default()
            },
        };
        let dir = tempfile::tempdir().unwrap();
        let h1 = ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert!(back.model.store.bitwise_eq(&ck.model.store));
        assert_eq!(back.modalities, ck.modalities);
        assert_eq!(back.provenance, ck.provenance);
        assert_eq!(back.save(dir.path()).unwrap(), h1);
        let meta: CheckpointMeta = read_json(&dir.path().join(META)).unwrap();
        let learnable: usize = meta.groups.values().sum();
        assert_eq!(learnable, ck.model.store.learnable_count());
    }
}
