//! Minibatch training: sequence datasets, Adam with frozen groups, and the
//! early-stopping loop.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode, Tensor};
use crate::error::{bail, Error, Result};
use crate::features::RecordingFeatures;
use crate::inference::{predict_features, Fusion};
use crate::models::{sequence_loss, Model};
use crate::params::{GroupSet, ParameterStore};
use crate::recordings::sequence_starts;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Sequences per minibatch.
    pub batch_size: usize,
    /// Full passes over the training sequences.
    pub max_passes: usize,
    /// Optional cap on optimizer steps.
    pub max_steps: Option<usize>,
    /// Validation evaluations without improvement before stopping.
    pub early_stop_patience: usize,
    /// Optimizer steps between validation evaluations.
    pub eval_every: usize,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    /// Divide the data term by the number of sequences as well as by `L`.
    pub batch_mean_loss: bool,
    pub bn_momentum: f64,
    /// Hop between training sequences, in epochs.
    pub hop: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            max_passes: 10,
            max_steps: None,
            early_stop_patience: 50,
            eval_every: 100,
            grad_clip: None,
            batch_mean_loss: true,
            bn_momentum: 0.99,
            hop: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.eps, self.bn_momentum];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            bail!(
                InvalidConfig,
                "learning rate, eps and BN momentum must be positive"
            );
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.bn_momentum >= 1.0
        {
            bail!(InvalidConfig, "betas and BN momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.max_passes == 0 || self.eval_every == 0 || self.hop == 0 {
            bail!(
                InvalidConfig,
                "batch size, passes, eval cadence and hop must be positive"
            );
        }
        if self.early_stop_patience == 0 {
            bail!(InvalidConfig, "early-stopping patience must be positive");
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                bail!(InvalidConfig, "gradient clip must be positive, got {c}");
            }
        }
        Ok(())
    }
}

/// First and second moments plus a step count for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub steps: Vec<u64>,
}

impl AdamState {
    pub fn new(store: &ParameterStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        Self {
            v: zeros.clone(),
            m: zeros,
            steps: vec![0; store.len()],
        }
    }
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamParams {
    fn from(c: &TrainConfig) -> Self {
        Self {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        }
    }
}

/// One bias-corrected Adam update of every learnable parameter outside the
/// frozen groups, from the gradients stored in `store`. Frozen parameters and
/// their moments are left untouched. A non-finite gradient aborts the step
/// before anything is modified.
pub fn adam_step(
    store: &mut ParameterStore,
    state: &mut AdamState,
    hp: AdamParams,
    frozen: GroupSet,
) -> Result<()> {
    if state.m.len() != store.len() {
        bail!(
            ShapeMismatch,
            "optimizer state covers {} parameters, store has {}",
            state.m.len(),
            store.len()
        );
    }
    let active = |p: &crate::params::Param| p.is_learnable() && !frozen.contains(p.group);
    if let Some((_, p)) = store
        .iter()
        .find(|(_, p)| active(p) && p.grad.iter().any(|g| !g.is_finite()))
    {
        bail!(NonFinite, "gradient of {}", p.name);
    }
    for (i, p) in store.iter_mut().enumerate() {
        if !active(p) {
            continue;
        }
        state.steps[i] += 1;
        let t = state.steps[i] as i32;
        let c1 = 1.0 - libm::pow(hp.beta1, t as f64);
        let c2 = 1.0 - libm::pow(hp.beta2, t as f64);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for ((w, &g), (mi, vi)) in p
            .value
            .iter_mut()
            .zip(&p.grad)
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = hp.beta1 * *mi + (1.0 - hp.beta1) * g;
            *vi = hp.beta2 * *vi + (1.0 - hp.beta2) * g * g;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= hp.lr * m_hat / (libm::sqrt(v_hat) + hp.eps);
        }
    }
    Ok(())
}

/// Scales unfrozen gradients so that their global L2 norm is at most `max`.
pub fn clip_gradients(store: &mut ParameterStore, max: f64, frozen: GroupSet) -> f64 {
    let norm = libm::sqrt(
        store
            .iter()
            .filter(|(_, p)| p.is_learnable() && !frozen.contains(p.group))
            .flat_map(|(_, p)| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>(),
    );
    if norm > max {
        let s = max / norm;
        for p in store.iter_mut() {
            if p.is_learnable() && !frozen.contains(p.group) {
                p.grad.iter_mut().for_each(|g| *g *= s);
            }
        }
    }
    norm
}

/// A training sequence: recording and first kept-epoch position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceRef {
    pub recording: usize,
    pub start: usize,
}

/// Feature recordings plus every length-`L` training sequence inside their
/// contiguous runs.
#[derive(Clone, Debug)]
pub struct SequenceDataset<'a> {
    pub recordings: Vec<&'a RecordingFeatures>,
    pub sequences: Vec<SequenceRef>,
    pub seq_len: usize,
}

impl<'a> SequenceDataset<'a> {
    pub fn new(recordings: Vec<&'a RecordingFeatures>, seq_len: usize, hop: usize) -> Result<Self> {
        if seq_len == 0 || hop == 0 {
            bail!(InvalidArgument, "sequence length and hop must be positive");
        }
        if let Some(r) = recordings
            .iter()
            .find(|r| r.epoch_shape != recordings[0].epoch_shape)
        {
            bail!(
                ShapeMismatch,
                "recording {} has epoch shape {:?}",
                r.id,
                r.epoch_shape
            );
        }
        let mut sequences = Vec::new();
        for (i, rec) in recordings.iter().enumerate() {
            for run in rec.contiguous_runs() {
                for s in sequence_starts(run.len(), seq_len, hop) {
                    sequences.push(SequenceRef {
                        recording: i,
                        start: run.start + s,
                    });
                }
            }
        }
        Ok(Self {
            recordings,
            sequences,
            seq_len,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn subjects(&self) -> BTreeSet<&str> {
        self.recordings.iter().map(|r| r.subject.as_str()).collect()
    }

    /// Input tensor `[B, L, ..epoch_shape]` and class targets (row `b·L + l`).
    pub fn batch(&self, refs: &[SequenceRef]) -> Result<(Tensor, Vec<usize>)> {
        let Some(first) = self.recordings.first() else {
            bail!(Empty, "dataset has no recordings")
        };
        let l = self.seq_len;
        let mut shape = vec![refs.len(), l];
        shape.extend_from_slice(&first.epoch_shape);
        let mut data = Vec::with_capacity(shape.iter().product());
        let mut targets = Vec::with_capacity(refs.len() * l);
        for r in refs {
            let rec = self.recordings[r.recording];
            for e in r.start..r.start + l {
                data.extend_from_slice(rec.epoch(e));
                targets.push(rec.labels[e].index());
            }
        }
        Ok((Tensor::new(&shape, data)?, targets))
    }
}

/// Errors when any subject appears on both sides.
pub fn audit_disjoint<'s>(
    train: impl IntoIterator<Item = &'s str>,
    held_out: impl IntoIterator<Item = &'s str>,
) -> Result<()> {
    let train: BTreeSet<&str> = train.into_iter().collect();
    let shared: Vec<&str> = held_out.into_iter().filter(|s| train.contains(s)).collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(Error::SubjectLeak(format!(
            "subjects in both training and held-out data: {shared:?}"
        )))
    }
}

/// One point of a learning curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    /// Minibatch loss after every optimizer step.
    pub train_loss: Vec<CurvePoint>,
    /// Validation accuracy at step 0, every `eval_every` steps and at the end.
    pub val_accuracy: Vec<CurvePoint>,
    /// Accuracy on monitored recordings at the same steps; never used for
    /// model selection.
    pub monitor_accuracy: Vec<CurvePoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub curve: LearningCurve,
    pub steps: usize,
    /// Step whose parameters were kept.
    pub best_step: usize,
    pub best_val_accuracy: Option<f64>,
    pub stopped_early: bool,
    /// The subjects the model was trained on.
    pub train_subjects: Vec<String>,
}

/// Epoch-level accuracy of aggregated predictions over `recs`.
pub fn recording_accuracy(
    model: &Model,
    recs: &[&RecordingFeatures],
    batch_size: usize,
) -> Result<f64> {
    let (mut correct, mut total) = (0usize, 0usize);
    for rec in recs {
        let pred = predict_features(model, rec, batch_size, Fusion::Multiplicative)?;
        correct += pred
            .labels
            .iter()
            .zip(&rec.labels)
            .filter(|(a, b)| a == b)
            .count();
        total += rec.n_epochs();
    }
    if total == 0 {
        bail!(Empty, "no epochs to evaluate");
    }
    Ok(correct as f64 / total as f64)
}

/// Per-position accuracy of eval-mode predictions on the dataset's
/// sequences (no aggregation).
pub fn sequence_accuracy(
    model: &Model,
    data: &SequenceDataset<'_>,
    batch_size: usize,
) -> Result<f64> {
    if data.is_empty() {
        bail!(Empty, "no sequences to evaluate");
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for chunk in data.sequences.chunks(batch_size.max(1)) {
        let (x, targets) = data.batch(chunk)?;
        let probs = model.predict(&x)?;
        for (p, &t) in probs.iter().zip(&targets) {
            correct += (crate::inference::argmax(p) == t) as usize;
        }
        total += targets.len();
    }
    Ok(correct as f64 / total as f64)
}

/// Trains `model` on `data` with Adam, leaving the groups in `frozen` (and
/// their BN running statistics) untouched. With validation recordings the
/// best-validation parameters are restored at the end and training stops
/// after `early_stop_patience` evaluations without improvement.
pub fn train(
    model: &mut Model,
    data: &SequenceDataset<'_>,
    validation: Option<&[&RecordingFeatures]>,
    cfg: &TrainConfig,
    frozen: GroupSet,
) -> Result<TrainOutcome> {
    train_monitored(model, data, validation, None, cfg, frozen)
}

/// [`train`] that also records accuracy on `monitor` whenever validation
/// would be evaluated (step 0, every `eval_every` steps, the last step).
pub fn train_monitored(
    model: &mut Model,
    data: &SequenceDataset<'_>,
    validation: Option<&[&RecordingFeatures]>,
    monitor: Option<&[&RecordingFeatures]>,
    cfg: &TrainConfig,
    frozen: GroupSet,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        bail!(Empty, "no training sequences");
    }
    if data.seq_len != model.config.seq_len {
        bail!(
            ShapeMismatch,
            "dataset sequences have length {} but the model expects {}",
            data.seq_len,
            model.config.seq_len
        );
    }
    if let Some(val) = validation {
        audit_disjoint(data.subjects(), val.iter().map(|r| r.subject.as_str()))?;
        if val.is_empty() {
            bail!(Empty, "validation set given but empty");
        }
    }
    let min_batch = 2usize.min(data.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&model.store);
    let hp = AdamParams::from(cfg);
    let lambda = model.config.lambda;
    let l = model.config.seq_len;
    let eval_batch = cfg.batch_size.max(1);

    let mut curve = LearningCurve::default();
    let mut best: Option<(f64, usize, ParameterStore)> = None;
    let mut since_best = 0usize;
    let mut step = 0usize;
    let mut stopped_early = false;
    let mut last_eval = None;

    let tracked = validation.is_some() || monitor.is_some();
    let mut evaluate =
        |model: &Model, step: usize, curve: &mut LearningCurve| -> Result<Option<bool>> {
            if let Some(mon) = monitor {
                let acc = recording_accuracy(model, mon, eval_batch)?;
                curve.monitor_accuracy.push(CurvePoint { step, value: acc });
            }
            let Some(val) = validation else {
                return Ok(None);
            };
            let acc = recording_accuracy(model, val, eval_batch)?;
            curve.val_accuracy.push(CurvePoint { step, value: acc });
            let improved = best.as_ref().is_none_or(|(b, _, _)| acc > *b);
            if improved {
                best = Some((acc, step, model.store.clone()));
            }
            Ok(Some(improved))
        };

    evaluate(model, 0, &mut curve)?;
    if tracked {
        last_eval = Some(0);
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    'passes: for _ in 0..cfg.max_passes {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < min_batch {
                continue;
            }
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'passes;
            }
            let refs: Vec<SequenceRef> = chunk.iter().map(|&i| data.sequences[i]).collect();
            let (x, targets) = data.batch(&refs)?;
            let mut g = Graph::new(Mode::Train, rng.next_u64());
            let out = model.forward(&mut g, &x)?;
            let loss = sequence_loss(
                &mut g,
                &model.store,
                out.probs,
                &targets,
                l,
                lambda,
                cfg.batch_mean_loss,
            )?;
            let loss_value = g.value(loss).data()[0];
            if !loss_value.is_finite() {
                bail!(NonFinite, "training loss at step {step}");
            }
            let grads = g.backward(loss)?;
            model.store.zero_grad();
            g.accumulate_into(&grads, &mut model.store);
            if let Some(c) = cfg.grad_clip {
                clip_gradients(&mut model.store, c, frozen);
            }
            adam_step(&mut model.store, &mut adam, hp, frozen)?;
            model
                .store
                .apply_running_stats(&g.running_stat_updates(), cfg.bn_momentum, frozen);
            step += 1;
            curve.train_loss.push(CurvePoint {
                step,
                value: loss_value,
            });

            if tracked && step.is_multiple_of(cfg.eval_every) {
                last_eval = Some(step);
                if let Some(improved) = evaluate(model, step, &mut curve)? {
                    since_best = if improved { 0 } else { since_best + 1 };
                    if since_best >= cfg.early_stop_patience {
                        stopped_early = true;
                        break 'passes;
                    }
                }
            }
        }
    }
    if last_eval.is_some() && last_eval != Some(step) {
        evaluate(model, step, &mut curve)?;
    }

    let (best_val_accuracy, best_step) = match best {
        Some((acc, s, store)) => {
            model.store = store;
            (Some(acc), s)
        }
        None => (None, step),
    };
    Ok(TrainOutcome {
        curve,
        steps: step,
        best_step,
        best_val_accuracy,
        stopped_early,
        train_subjects: data.subjects().into_iter().map(String::from).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Group, ParamKind};

    fn scalar_store(v: f64, g: f64, group: Group) -> ParameterStore {
        let mut s = ParameterStore::new();
        let id = s.add("w", &[1], group, ParamKind::Learnable, vec![v]);
        s.get_mut(id).grad = vec![g];
        s
    }

    #[test]
    fn adam_constant_gradient_moves_by_lr() {
        let hp = AdamParams::from(&TrainConfig::default());
        let mut s = scalar_store(0.0, 3.0, Group::Spb);
        let mut st = AdamState::new(&s);
        let mut prev = 0.0;
        for k in 0..200 {
            adam_step(&mut s, &mut st, hp, GroupSet::empty()).unwrap();
            let w = s.by_name("w").unwrap().value[0];
            let step = w - prev;
            assert!(step < 0.0);
            if k > 0 {
                assert!((step.abs() - hp.lr).abs() < 1e-3 * hp.lr);
            }
            prev = w;
        }
    }

    #[test]
    fn adam_frozen_zero_and_nan() {
        let hp = AdamParams::from(&TrainConfig::default());
        let mut s = scalar_store(1.5, 2.0, Group::Epb);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, hp, GroupSet::of(&[Group::Epb])).unwrap();
        assert_eq!(s.by_name("w").unwrap().value, vec![1.5]);
        assert_eq!(st.steps, vec![0]);

        let mut s = scalar_store(1.5, 0.0, Group::Epb);
        adam_step(&mut s, &mut st, hp, GroupSet::empty()).unwrap();
        assert_eq!(s.by_name("w").unwrap().value, vec![1.5]);

        let mut s = scalar_store(1.5, f64::NAN, Group::Epb);
        let mut st = AdamState::new(&s);
        assert!(matches!(
            adam_step(&mut s, &mut st, hp, GroupSet::empty()),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(s.by_name("w").unwrap().value, vec![1.5]);
    }

    #[test]
    fn clipping_scales_to_max_norm() {
        let mut s = scalar_store(0.0, 10.0, Group::Softmax);
        assert_eq!(clip_gradients(&mut s, 2.0, GroupSet::empty()), 10.0);
        assert_eq!(s.by_name("w").unwrap().grad, vec![2.0]);
    }

    #[test]
    fn disjointness_audit() {
        assert!(audit_disjoint(["a", "b"], ["c"]).is_ok());
        assert!(matches!(
            audit_disjoint(["a", "b"], ["b"]),
            Err(Error::SubjectLeak(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            grad_clip: Some(-1.0),
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
