//! Source-to-target transfer: finetuning strategies as frozen parameter
//! groups, the direct-transfer and scratch baselines, and the subject-count
//! sweep.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::features::RecordingFeatures;
use crate::inference::{compute_metrics, predict_features, EvalReport, Fusion};
use crate::models::{Model, ModelConfig};
use crate::params::{Group, GroupSet, ParameterStore};
use crate::recordings::{Modality, StageLabel};
use crate::training::{train_monitored, CurvePoint, SequenceDataset, TrainConfig, TrainOutcome};

/// Which parameter groups are finetuned on the target domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FinetuneStrategy {
    All,
    EpbSoftmax,
    SpbSoftmax,
    SoftmaxOnly,
    /// Direct transfer: the pretrained network is used as is.
    None,
    /// Fresh initialization trained on target data only.
    Scratch,
}

impl FinetuneStrategy {
    pub const ALL: [FinetuneStrategy; 6] = [
        FinetuneStrategy::All,
        FinetuneStrategy::EpbSoftmax,
        FinetuneStrategy::SpbSoftmax,
        FinetuneStrategy::SoftmaxOnly,
        FinetuneStrategy::None,
        FinetuneStrategy::Scratch,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FinetuneStrategy::All => "ALL",
            FinetuneStrategy::EpbSoftmax => "EPB_SOFTMAX",
            FinetuneStrategy::SpbSoftmax => "SPB_SOFTMAX",
            FinetuneStrategy::SoftmaxOnly => "SOFTMAX_ONLY",
            FinetuneStrategy::None => "NONE",
            FinetuneStrategy::Scratch => "SCRATCH",
        }
    }
}

impl core::str::FromStr for FinetuneStrategy {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace(['-', '+'], "_");
        let found = match norm.as_str() {
            "SOFTMAX" => Some(FinetuneStrategy::SoftmaxOnly),
            "DIRECT" | "DT" => Some(FinetuneStrategy::None),
            other => Self::ALL.into_iter().find(|k| k.as_str() == other),
        };
        found.ok_or_else(|| {
            crate::Error::InvalidArgument(format!("unknown finetuning strategy {s:?}"))
        })
    }
}

/// Groups left untouched by `strategy`.
pub fn frozen_groups(strategy: FinetuneStrategy) -> GroupSet {
    match strategy {
        FinetuneStrategy::All | FinetuneStrategy::Scratch => GroupSet::empty(),
        FinetuneStrategy::EpbSoftmax => GroupSet::of(&[Group::Spb]),
        FinetuneStrategy::SpbSoftmax => GroupSet::of(&[Group::Epb]),
        FinetuneStrategy::SoftmaxOnly => GroupSet::of(&[Group::Epb, Group::Spb]),
        FinetuneStrategy::None => GroupSet::all(),
    }
}

/// Channel mapping between source and target domains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferScenario {
    EegEogEmg,
    EegEog,
    Eeg,
    Eog,
    /// Model pretrained on EEG, finetuned and tested on EOG.
    EegToEog,
}

impl TransferScenario {
    pub fn source_modalities(self) -> &'static [Modality] {
        use Modality::*;
        match self {
            TransferScenario::EegEogEmg => &[Eeg, Eog, Emg],
            TransferScenario::EegEog => &[Eeg, Eog],
            TransferScenario::Eeg | TransferScenario::EegToEog => &[Eeg],
            TransferScenario::Eog => &[Eog],
        }
    }

    pub fn target_modalities(self) -> &'static [Modality] {
        match self {
            TransferScenario::EegToEog => &[Modality::Eog],
            other => other.source_modalities(),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            TransferScenario::EegEogEmg => "EEG·EOG·EMG→EEG·EOG·EMG",
            TransferScenario::EegEog => "EEG·EOG→EEG·EOG",
            TransferScenario::Eeg => "EEG→EEG",
            TransferScenario::Eog => "EOG→EOG",
            TransferScenario::EegToEog => "EEG→EOG",
        }
    }
}

/// A pretrained network: configuration plus parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct Pretrained {
    pub config: ModelConfig,
    pub store: ParameterStore,
}

impl From<&Model> for Pretrained {
    fn from(m: &Model) -> Self {
        Self {
            config: m.config.clone(),
            store: m.store.clone(),
        }
    }
}

/// Target-domain recordings, already featurized (and normalized) and split
/// by subject.
#[derive(Clone, Debug)]
pub struct TargetSplits<'a> {
    pub train: Vec<&'a RecordingFeatures>,
    pub validation: Vec<&'a RecordingFeatures>,
    pub test: Vec<&'a RecordingFeatures>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub scenario: TransferScenario,
    pub strategy: FinetuneStrategy,
    pub frozen_groups: GroupSet,
    pub metrics_before: EvalReport,
    pub metrics_after: EvalReport,
    pub steps: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct TransferResult {
    pub model: Model,
    pub outcome: Option<TrainOutcome>,
    pub report: TransferReport,
}

/// Epoch-level metrics of aggregated predictions over `recs`.
pub fn evaluate_recordings(
    model: &Model,
    recs: &[&RecordingFeatures],
    batch_size: usize,
) -> Result<EvalReport> {
    let (truth, pred) = predict_labels(model, recs, batch_size)?;
    compute_metrics(&truth, &pred)
}

/// True and predicted labels of every epoch of `recs`, in order.
pub fn predict_labels(
    model: &Model,
    recs: &[&RecordingFeatures],
    batch_size: usize,
) -> Result<(Vec<StageLabel>, Vec<StageLabel>)> {
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    for rec in recs {
        let p = predict_features(model, rec, batch_size, Fusion::Multiplicative)?;
        truth.extend_from_slice(&rec.labels);
        pred.extend(p.labels);
    }
    Ok((truth, pred))
}

fn check_target(config: &ModelConfig, recs: &[&RecordingFeatures]) -> Result<()> {
    let want = config.epoch_shape();
    if let Some(r) = recs.iter().find(|r| r.epoch_shape != want) {
        bail!(
            ShapeMismatch,
            "checkpoint expects epochs of shape {want:?} ({} channels) but target recording {} has {:?}",
            config.n_channels,
            r.id,
            r.epoch_shape
        );
    }
    Ok(())
}

/// Finetunes `source` on the target splits with `strategy`. NONE skips
/// optimization; SCRATCH ignores the source values and starts from a fresh
/// initialization seeded by `cfg.seed`. Validation subjects, when present,
/// drive early stopping.
pub fn run_transfer(
    source: &Pretrained,
    target: &TargetSplits<'_>,
    scenario: TransferScenario,
    strategy: FinetuneStrategy,
    cfg: &TrainConfig,
) -> Result<TransferResult> {
    run_transfer_monitored(source, target, scenario, strategy, cfg, false)
}

fn run_transfer_monitored(
    source: &Pretrained,
    target: &TargetSplits<'_>,
    scenario: TransferScenario,
    strategy: FinetuneStrategy,
    cfg: &TrainConfig,
    monitor_test: bool,
) -> Result<TransferResult> {
    if target.test.is_empty() {
        bail!(Empty, "target has no test recordings");
    }
    let all: Vec<&RecordingFeatures> = target
        .train
        .iter()
        .chain(&target.validation)
        .chain(&target.test)
        .copied()
        .collect();
    check_target(&source.config, &all)?;
    let train_subj: BTreeSet<&str> = target.train.iter().map(|r| r.subject.as_str()).collect();
    crate::training::audit_disjoint(
        train_subj.iter().copied(),
        target
            .validation
            .iter()
            .chain(&target.test)
            .map(|r| r.subject.as_str()),
    )?;

    let mut model = match strategy {
        FinetuneStrategy::Scratch => Model::build(&source.config, cfg.seed)?,
        _ => Model::from_store(&source.config, &source.store)?,
    };
    let batch = cfg.batch_size;
    let metrics_before = evaluate_recordings(&model, &target.test, batch)?;
    let frozen = frozen_groups(strategy);

    let outcome = if strategy == FinetuneStrategy::None {
        None
    } else {
        let data = SequenceDataset::new(target.train.clone(), source.config.seq_len, cfg.hop)?;
        let val = (!target.validation.is_empty()).then_some(target.validation.as_slice());
        let monitor = monitor_test.then_some(target.test.as_slice());
        Some(train_monitored(
            &mut model, &data, val, monitor, cfg, frozen,
        )?)
    };
    let metrics_after = match outcome {
        Some(_) => evaluate_recordings(&model, &target.test, batch)?,
        None => metrics_before.clone(),
    };
    let report = TransferReport {
        scenario,
        strategy,
        frozen_groups: frozen,
        metrics_before,
        metrics_after,
        steps: outcome.as_ref().map_or(0, |o| o.steps),
        seed: cfg.seed,
    };
    Ok(TransferResult {
        model,
        outcome,
        report,
    })
}

/// Test-accuracy curve of one sweep point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub n_subjects: usize,
    pub subjects: Vec<String>,
    pub points: Vec<CurvePoint>,
    /// Length before padding.
    pub recorded: usize,
}

/// Picks `n` finetuning subjects from `candidates` with a seeded shuffle.
pub fn choose_subjects(candidates: &[String], n: usize, seed: u64) -> Result<Vec<String>> {
    if n == 0 || n > candidates.len() {
        bail!(
            InvalidArgument,
            "cannot choose {n} of {} available subjects",
            candidates.len()
        );
    }
    let mut pool: Vec<String> = candidates.to_vec();
    pool.sort();
    pool.dedup();
    if n > pool.len() {
        bail!(
            InvalidArgument,
            "cannot choose {n} of {} distinct subjects",
            pool.len()
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    pool.truncate(n);
    pool.sort();
    Ok(pool)
}

/// For each count, finetunes on a seeded random subset of the non-test
/// subjects and records test accuracy at every evaluation step (no early
/// stopping). Curves are padded with their last value to the longest length.
pub fn subject_count_sweep(
    source: &Pretrained,
    pool: &[&RecordingFeatures],
    test: &[&RecordingFeatures],
    counts: &[usize],
    strategy: FinetuneStrategy,
    cfg: &TrainConfig,
) -> Result<Vec<SweepCurve>> {
    let test_subjects: BTreeSet<&str> = test.iter().map(|r| r.subject.as_str()).collect();
    let candidates: Vec<String> = pool
        .iter()
        .map(|r| r.subject.as_str())
        .filter(|s| !test_subjects.contains(s))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(String::from)
        .collect();
    let mut curves = Vec::with_capacity(counts.len());
    for (i, &n) in counts.iter().enumerate() {
        let subjects = choose_subjects(&candidates, n, cfg.seed.wrapping_add(i as u64))?;
        let train: Vec<&RecordingFeatures> = pool
            .iter()
            .filter(|r| subjects.contains(&r.subject))
            .copied()
            .collect();
        let splits = TargetSplits {
            train,
            validation: Vec::new(),
            test: test.to_vec(),
        };
        let res =
            run_transfer_monitored(source, &splits, TransferScenario::Eeg, strategy, cfg, true)?;
        let points = match res.outcome {
            Some(o) => o.curve.monitor_accuracy,
            None => alloc::vec![CurvePoint {
                step: 0,
                value: res.report.metrics_before.accuracy
            }],
        };
        curves.push(SweepCurve {
            n_subjects: n,
            subjects,
            recorded: points.len(),
            points,
        });
    }
    pad_curves(&mut curves);
    Ok(curves)
}

/// Extends every curve with its last point until all have the same length.
pub fn pad_curves(curves: &mut [SweepCurve]) {
    let Some(longest) = curves
        .iter()
        .max_by_key(|c| c.points.len())
        .map(|c| c.points.clone())
    else {
        return;
    };
    for c in curves.iter_mut() {
        let last = c.points.last().map_or(0.0, |p| p.value);
        while c.points.len() < longest.len() {
            let step = longest[c.points.len()].step;
            c.points.push(CurvePoint { step, value: last });
        }
    }
}
