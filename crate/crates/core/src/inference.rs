//! Test-time prediction with overlapping sequences, decision fusion, the
//! evaluation metrics and cross-validation bookkeeping.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{bail, Result};
use crate::features::RecordingFeatures;
use crate::models::{Model, LOG_FLOOR};
use crate::recordings::StageLabel;
use crate::N_CLASSES;

pub type Posterior = [f64; N_CLASSES];

/// How the overlapping decisions for one epoch are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Mean of floored log-posteriors, exponentiated and renormalized
    /// (normalized geometric mean). Same decision as the log-sum.
    #[default]
    Multiplicative,
    /// Mean of posteriors.
    Additive,
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Fuses the decisions for one epoch into a posterior and a label.
pub fn aggregate(posteriors: &[Posterior], fusion: Fusion) -> Result<(Posterior, StageLabel)> {
    if posteriors.is_empty() {
        bail!(Empty, "no decisions to aggregate");
    }
    if posteriors.len() == 1 {
        let p = posteriors[0];
        return Ok((p, StageLabel::ALL[argmax(&p)]));
    }
    let mut out = [0.0; N_CLASSES];
    match fusion {
        Fusion::Multiplicative => {
            for p in posteriors {
                for (o, &v) in out.iter_mut().zip(p) {
                    *o += libm::log(v.max(LOG_FLOOR));
                }
            }
            let n = posteriors.len() as f64;
            let m = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            out.iter_mut().for_each(|o| *o = libm::exp((*o - m) / n));
        }
        Fusion::Additive => {
            for p in posteriors {
                out.iter_mut().zip(p).for_each(|(o, &v)| *o += v);
            }
        }
    }
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|o| *o /= z);
    Ok((out, StageLabel::ALL[argmax(&out)]))
}

/// Number of hop-1 length-`l` sequences covering each of `n` epochs.
pub fn contribution_counts(n: usize, l: usize) -> Vec<usize> {
    let mut counts = vec![0; n];
    if l == 0 || n < l {
        return counts;
    }
    for s in 0..=n - l {
        counts[s..s + l].iter_mut().for_each(|c| *c += 1);
    }
    counts
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypnogramPrediction {
    /// Every decision routed to each epoch, in sequence-start order.
    pub contributions: Vec<Vec<Posterior>>,
    pub aggregated: Vec<Posterior>,
    pub labels: Vec<StageLabel>,
}

/// Evaluates every hop-1 sequence of a recording and fuses the decisions per
/// epoch. Kept epochs are treated as consecutive. Sequences are evaluated in
/// batches of `batch_size`.
pub fn predict_features(
    model: &Model,
    rec: &RecordingFeatures,
    batch_size: usize,
    fusion: Fusion,
) -> Result<HypnogramPrediction> {
    let l = model.config.seq_len;
    let n = rec.n_epochs();
    if n < l {
        bail!(
            InvalidArgument,
            "recording {} has {n} epochs, fewer than the sequence length {l}",
            rec.id
        );
    }
    let starts: Vec<usize> = (0..=n - l).collect();
    let numel = rec.epoch_numel();
    let mut contributions: Vec<Vec<Posterior>> = (0..n).map(|_| Vec::new()).collect();
    for chunk in starts.chunks(batch_size.max(1)) {
        let mut shape = vec![chunk.len(), l];
        shape.extend_from_slice(&rec.epoch_shape);
        let mut data = Vec::with_capacity(chunk.len() * l * numel);
        for &s in chunk {
            data.extend_from_slice(&rec.data[s * numel..(s + l) * numel]);
        }
        let probs = model.predict(&Tensor::new(&shape, data)?)?;
        for (i, &s) in chunk.iter().enumerate() {
            for j in 0..l {
                contributions[s + j].push(probs[i * l + j]);
            }
        }
    }
    let mut aggregated = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for c in &contributions {
        let (p, label) = aggregate(c, fusion)?;
        aggregated.push(p);
        labels.push(label);
    }
    Ok(HypnogramPrediction {
        contributions,
        aggregated,
        labels,
    })
}

/// Accuracy, macro F1, Cohen's kappa and the confusion matrix
/// (rows = truth, columns = prediction).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub kappa: f64,
    pub per_class_f1: [f64; N_CLASSES],
    pub confusion: [[u64; N_CLASSES]; N_CLASSES],
    pub n_epochs: u64,
}

impl EvalReport {
    pub fn from_confusion(confusion: [[u64; N_CLASSES]; N_CLASSES]) -> Result<Self> {
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            bail!(Empty, "confusion matrix is empty");
        }
        let n = total as f64;
        let diag: u64 = (0..N_CLASSES).map(|k| confusion[k][k]).sum();
        let row = |k: usize| confusion[k].iter().sum::<u64>();
        let col = |k: usize| confusion.iter().map(|r| r[k]).sum::<u64>();

        let mut per_class_f1 = [0.0; N_CLASSES];
        for (k, f1) in per_class_f1.iter_mut().enumerate() {
            let denom = row(k) + col(k);
            *f1 = if denom == 0 {
                0.0
            } else {
                2.0 * confusion[k][k] as f64 / denom as f64
            };
        }
        let p_o = diag as f64 / n;
        let p_e: f64 = (0..N_CLASSES)
            .map(|k| row(k) as f64 * col(k) as f64)
            .sum::<f64>()
            / (n * n);
        let kappa = if p_e >= 1.0 {
            1.0
        } else {
            (p_o - p_e) / (1.0 - p_e)
        };
        Ok(Self {
            accuracy: p_o,
            macro_f1: per_class_f1.iter().sum::<f64>() / N_CLASSES as f64,
            kappa,
            per_class_f1,
            confusion,
            n_epochs: total,
        })
    }

    /// Metrics of the summed confusion matrices.
    pub fn pool(reports: &[EvalReport]) -> Result<Self> {
        let mut c = [[0u64; N_CLASSES]; N_CLASSES];
        for r in reports {
            for (i, row) in r.confusion.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    c[i][j] += v;
                }
            }
        }
        Self::from_confusion(c)
    }
}

pub fn confusion_matrix(
    truth: &[StageLabel],
    pred: &[StageLabel],
) -> Result<[[u64; N_CLASSES]; N_CLASSES]> {
    if truth.len() != pred.len() {
        bail!(
            ShapeMismatch,
            "{} true labels but {} predictions",
            truth.len(),
            pred.len()
        );
    }
    if truth.is_empty() {
        bail!(Empty, "no labels to score");
    }
    let mut c = [[0u64; N_CLASSES]; N_CLASSES];
    for (t, p) in truth.iter().zip(pred) {
        c[t.index()][p.index()] += 1;
    }
    Ok(c)
}

pub fn compute_metrics(truth: &[StageLabel], pred: &[StageLabel]) -> Result<EvalReport> {
    EvalReport::from_confusion(confusion_matrix(truth, pred)?)
}

/// Subjects of one cross-validation fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub folds: Vec<Fold>,
}

impl FoldSpec {
    /// One fold per subject.
    pub fn leave_one_out(subjects: &[String], n_validation: usize, seed: u64) -> Result<Self> {
        Self::k_fold(subjects, subjects.len(), n_validation, seed)
    }

    /// `k` folds of consecutive test subjects; when `k` does not divide the
    /// subject count the first folds get one extra subject. Validation
    /// subjects are drawn at random (seeded per fold) from the remainder.
    pub fn k_fold(subjects: &[String], k: usize, n_validation: usize, seed: u64) -> Result<Self> {
        let n = subjects.len();
        let unique: BTreeSet<&String> = subjects.iter().collect();
        if unique.len() != n {
            bail!(InvalidArgument, "subject list has duplicates");
        }
        if k == 0 || k > n {
            bail!(InvalidArgument, "cannot split {n} subjects into {k} folds");
        }
        let (base, extra) = (n / k, n % k);
        let mut folds = Vec::with_capacity(k);
        let mut start = 0;
        for i in 0..k {
            let size = base + usize::from(i < extra);
            let test: Vec<String> = subjects[start..start + size].to_vec();
            let mut rest: Vec<String> = subjects[..start]
                .iter()
                .chain(&subjects[start + size..])
                .cloned()
                .collect();
            if n_validation >= rest.len() {
                bail!(
                    InvalidArgument,
                    "{n_validation} validation subjects leave no training subjects in fold {i}"
                );
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            rest.shuffle(&mut rng);
            let validation = rest.split_off(rest.len() - n_validation);
            let mut train = rest;
            train.sort();
            let mut validation = validation;
            validation.sort();
            folds.push(Fold {
                train,
                validation,
                test,
            });
            start += size;
        }
        let spec = Self { folds };
        spec.validate()?;
        Ok(spec)
    }

    /// Test sets must not overlap and no fold may reuse a subject across its
    /// own train/validation/test parts.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (i, f) in self.folds.iter().enumerate() {
            for s in &f.test {
                if !seen.insert(s) {
                    bail!(
                        InvalidArgument,
                        "subject {s} is tested in more than one fold (fold {i})"
                    );
                }
            }
            let mut within = BTreeSet::new();
            for s in f.train.iter().chain(&f.validation).chain(&f.test) {
                if !within.insert(s) {
                    bail!(SubjectLeak, "subject {s} appears twice in fold {i}");
                }
            }
            if f.test.is_empty() || f.train.is_empty() {
                bail!(
                    InvalidArgument,
                    "fold {i} has no test or no training subjects"
                );
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossValidationReport {
    pub pooled: EvalReport,
    pub per_fold: Vec<EvalReport>,
}

/// Runs `pipeline` on every fold; it returns the true and predicted labels
/// of that fold's test epochs. Metrics are pooled over all test epochs.
pub fn cross_validate<F>(spec: &FoldSpec, mut pipeline: F) -> Result<CrossValidationReport>
where
    F: FnMut(usize, &Fold) -> Result<(Vec<StageLabel>, Vec<StageLabel>)>,
{
    spec.validate()?;
    let per_fold = spec
        .folds
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let (truth, pred) = pipeline(i, f)?;
            compute_metrics(&truth, &pred)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CrossValidationReport {
        pooled: EvalReport::pool(&per_fold)?,
        per_fold,
    })
}
