//! Canonical recordings: 100 Hz channels cut into 30 s epochs with 5-class
//! labels, plus the transforms that produce them.
//!
//! A canonical [`Recording`] stores, per channel, the samples of its kept
//! epochs back to back. `epoch_index` remembers the original position of
//! every kept epoch in the scored night, so gaps left by excluded epochs or
//! dropped context are still visible.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::N_CLASSES;

/// Canonical sampling rate.
pub const CANONICAL_RATE_HZ: f64 = 100.0;
/// Canonical epoch length in seconds.
pub const EPOCH_SECONDS: f64 = 30.0;
/// Samples per canonical epoch and channel.
pub const EPOCH_SAMPLES: usize = 3000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StageLabel {
    W,
    N1,
    N2,
    N3,
    #[serde(rename = "REM")]
    Rem,
}

impl StageLabel {
    pub const ALL: [StageLabel; N_CLASSES] = [
        StageLabel::W,
        StageLabel::N1,
        StageLabel::N2,
        StageLabel::N3,
        StageLabel::Rem,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn one_hot(self) -> [f64; N_CLASSES] {
        let mut v = [0.0; N_CLASSES];
        v[self.index()] = 1.0;
        v
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StageLabel::W => "W",
            StageLabel::N1 => "N1",
            StageLabel::N2 => "N2",
            StageLabel::N3 => "N3",
            StageLabel::Rem => "REM",
        }
    }
}

impl core::fmt::Display for StageLabel {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ScoringStandard {
    Aasm,
    #[serde(rename = "RK")]
    Rk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Modality {
    Eeg,
    Eog,
    Emg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub name: String,
    pub modality: Option<Modality>,
    pub sample_rate_hz: f64,
    pub samples: Vec<f64>,
}

impl Channel {
    pub fn new(name: &str, sample_rate_hz: f64, samples: Vec<f64>) -> Self {
        Self {
            name: name.to_string(),
            modality: None,
            sample_rate_hz,
            samples,
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recording {
    pub id: String,
    pub subject: String,
    pub channels: Vec<Channel>,
    pub labels: Vec<StageLabel>,
    /// Original (scored) index of every kept epoch, strictly increasing.
    pub epoch_index: Vec<usize>,
    pub lights_off_epoch: Option<usize>,
    pub lights_on_epoch: Option<usize>,
    pub epoch_len_s: f64,
}

impl Recording {
    /// A labelled recording whose epochs are contiguous from index 0.
    pub fn new(
        id: &str,
        subject: &str,
        channels: Vec<Channel>,
        labels: Vec<StageLabel>,
        epoch_len_s: f64,
    ) -> Self {
        Self {
            id: id.to_string(),
            subject: subject.to_string(),
            channels,
            epoch_index: (0..labels.len()).collect(),
            labels,
            lights_off_epoch: None,
            lights_on_epoch: None,
            epoch_len_s,
        }
    }

    pub fn n_epochs(&self) -> usize {
        self.labels.len()
    }

    fn epoch_samples(&self, channel: usize) -> usize {
        libm::round(self.channels[channel].sample_rate_hz * self.epoch_len_s) as usize
    }

    /// Samples of epoch `e` (kept-epoch position) on channel `c`.
    pub fn epoch(&self, c: usize, e: usize) -> &[f64] {
        let n = self.epoch_samples(c);
        &self.channels[c].samples[e * n..(e + 1) * n]
    }

    /// All channels last the same time, within one sample at their rates.
    pub fn check_durations(&self) -> Result<()> {
        let Some(first) = self.channels.first() else {
            bail!(Empty, "recording {} has no channels", self.id)
        };
        for ch in &self.channels {
            if !(ch.sample_rate_hz.is_finite() && ch.sample_rate_hz > 0.0) {
                bail!(
                    InvalidArgument,
                    "channel {} has sample rate {}",
                    ch.name,
                    ch.sample_rate_hz
                );
            }
            let tol = 1.0 / ch.sample_rate_hz.min(first.sample_rate_hz);
            if (ch.duration_s() - first.duration_s()).abs() > tol + 1e-9 {
                bail!(
                    ShapeMismatch,
                    "channel {} lasts {} s but {} lasts {} s",
                    ch.name,
                    ch.duration_s(),
                    first.name,
                    first.duration_s()
                );
            }
        }
        Ok(())
    }

    /// Checks the canonical-form invariants.
    pub fn check_canonical(&self) -> Result<()> {
        let n = self.n_epochs();
        if self.epoch_index.len() != n {
            bail!(
                ShapeMismatch,
                "{} labels but {} epoch indices",
                n,
                self.epoch_index.len()
            );
        }
        if self.epoch_index.windows(2).any(|w| w[0] >= w[1]) {
            bail!(
                InvalidArgument,
                "epoch indices of {} are not increasing",
                self.id
            );
        }
        if self.epoch_len_s != EPOCH_SECONDS {
            bail!(
                InvalidArgument,
                "epoch length {} s, expected {EPOCH_SECONDS}",
                self.epoch_len_s
            );
        }
        if self.channels.is_empty() {
            bail!(Empty, "recording {} has no channels", self.id);
        }
        for ch in &self.channels {
            if ch.sample_rate_hz != CANONICAL_RATE_HZ || ch.samples.len() != n * EPOCH_SAMPLES {
                bail!(
                    ShapeMismatch,
                    "channel {} has {} samples at {} Hz, expected {} at 100 Hz",
                    ch.name,
                    ch.samples.len(),
                    ch.sample_rate_hz,
                    n * EPOCH_SAMPLES
                );
            }
        }
        Ok(())
    }

    /// Keeps the named channels in the given order.
    pub fn select_channels(&self, names: &[&str]) -> Result<Recording> {
        let channels = names
            .iter()
            .map(|name| {
                self.channels
                    .iter()
                    .find(|c| c.name == *name)
                    .cloned()
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "recording {} has no channel {name:?}",
                            self.id
                        ))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Recording {
            channels,
            ..self.clone()
        })
    }

    /// Keeps the kept-epoch positions listed in `keep` (increasing).
    fn retain_positions(&self, keep: &[usize]) -> Recording {
        let channels = self
            .channels
            .iter()
            .enumerate()
            .map(|(c, ch)| {
                let mut samples = Vec::with_capacity(keep.len() * self.epoch_samples(c));
                for &e in keep {
                    samples.extend_from_slice(self.epoch(c, e));
                }
                Channel {
                    samples,
                    ..ch.clone()
                }
            })
            .collect();
        Recording {
            channels,
            labels: keep.iter().map(|&e| self.labels[e]).collect(),
            epoch_index: keep.iter().map(|&e| self.epoch_index[e]).collect(),
            ..self.clone()
        }
    }

    /// Maximal runs of consecutive original indices, as kept-epoch position
    /// ranges.
    pub fn contiguous_runs(&self) -> Vec<core::ops::Range<usize>> {
        contiguous_runs(&self.epoch_index)
    }
}

/// Splits increasing original indices into ranges of consecutive values.
pub fn contiguous_runs(epoch_index: &[usize]) -> Vec<core::ops::Range<usize>> {
    let n = epoch_index.len();
    let mut runs = Vec::new();
    let mut start = 0;
    for i in 1..=n {
        if i == n || epoch_index[i] != epoch_index[i - 1] + 1 {
            if i > start {
                runs.push(start..i);
            }
            start = i;
        }
    }
    runs
}

/// Splits hypnogram text into raw stage tokens, one per line (or per comma
/// or tab separated field). Blank lines and `#` comments are skipped.
pub fn parse_hypnogram(text: &str) -> Result<Vec<String>> {
    let tokens: Vec<String> = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(|l| l.split([',', '\t', ';']))
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(String::from)
        .collect();
    if tokens.is_empty() {
        bail!(Empty, "hypnogram has no stage tokens");
    }
    Ok(tokens)
}

/// Outcome of mapping raw tokens onto the 5-class set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageMapping {
    /// One entry per raw token; `None` for excluded epochs.
    pub per_epoch: Vec<Option<StageLabel>>,
    pub labels: Vec<StageLabel>,
    /// Original indices of the labelled epochs.
    pub kept: Vec<usize>,
    pub excluded: Vec<usize>,
}

fn normalize_token(token: &str) -> String {
    let t = token.trim().to_ascii_uppercase();
    let t = t.strip_prefix("SLEEP STAGE").map(str::trim).unwrap_or(&t);
    let t = t.strip_prefix("STAGE").map(str::trim).unwrap_or(t);
    t.to_string()
}

fn map_token(token: &str, standard: ScoringStandard) -> Option<Option<StageLabel>> {
    use StageLabel::*;
    let t = normalize_token(token);
    let excluded = [
        "MOVEMENT",
        "MOVEMENT TIME",
        "MT",
        "M",
        "UNKNOWN",
        "UNSCORED",
        "?",
        "U",
    ];
    if excluded.contains(&t.as_str()) {
        return Some(None);
    }
    let label = match (standard, t.as_str()) {
        (_, "W" | "WAKE" | "0") => W,
        (_, "R" | "REM" | "5") => Rem,
        (ScoringStandard::Aasm, "N1") => N1,
        (ScoringStandard::Aasm, "N2") => N2,
        (ScoringStandard::Aasm, "N3") => N3,
        (ScoringStandard::Rk, "1" | "S1" | "N1") => N1,
        (ScoringStandard::Rk, "2" | "S2" | "N2") => N2,
        (ScoringStandard::Rk, "3" | "S3" | "N3" | "4" | "S4" | "N4") => N3,
        _ => return None,
    };
    Some(Some(label))
}

/// Maps raw tokens to labels. Stage 4 of R&K merges into N3; movement and
/// unknown epochs are excluded and reported by original index.
pub fn map_stages(tokens: &[String], standard: ScoringStandard) -> Result<StageMapping> {
    let mut m = StageMapping {
        per_epoch: Vec::with_capacity(tokens.len()),
        labels: Vec::new(),
        kept: Vec::new(),
        excluded: Vec::new(),
    };
    for (index, token) in tokens.iter().enumerate() {
        let mapped = map_token(token, standard).ok_or_else(|| Error::UnknownStage {
            token: token.clone(),
            index,
        })?;
        match mapped {
            Some(label) => {
                m.labels.push(label);
                m.kept.push(index);
            }
            None => m.excluded.push(index),
        }
        m.per_epoch.push(mapped);
    }
    Ok(m)
}

/// Sample windows of the scored epochs within a signal of `len` samples at
/// 100 Hz: `(original index, first sample)` of each 30 s window that fits.
/// For 20 s scoring each window spans `[start − 5 s, start + 25 s]`.
fn epoch_windows(n_scored: usize, epoch_len_s: f64, len: usize) -> Result<Vec<(usize, usize)>> {
    let rate = CANONICAL_RATE_HZ as usize;
    let lead = if epoch_len_s == 30.0 {
        0
    } else if epoch_len_s == 20.0 {
        5 * rate
    } else {
        bail!(
            InvalidArgument,
            "unsupported epoch length {epoch_len_s} s (expected 20 or 30)"
        )
    };
    let step = libm::round(epoch_len_s) as usize * rate;
    Ok((0..n_scored)
        .filter_map(|k| {
            let start = (k * step).checked_sub(lead)?;
            (start + EPOCH_SAMPLES <= len).then_some((k, start))
        })
        .collect())
}

/// Turns a recording scored in 20 s epochs (channels at 100 Hz) into 30 s
/// epochs covering `[start − 5 s, start + 25 s]`. Context comes from the
/// neighbouring epochs, so an epoch whose neighbour is missing (first, last
/// or next to a gap) is dropped.
pub fn expand_epochs_20_to_30(rec: &Recording) -> Result<Recording> {
    if rec.epoch_len_s != 20.0 {
        bail!(
            InvalidArgument,
            "expected 20 s epochs, got {} s",
            rec.epoch_len_s
        );
    }
    if let Some(ch) = rec
        .channels
        .iter()
        .find(|c| c.sample_rate_hz != CANONICAL_RATE_HZ)
    {
        bail!(
            InvalidArgument,
            "channel {} must be resampled to 100 Hz first",
            ch.name
        );
    }
    let side = 5 * CANONICAL_RATE_HZ as usize;
    let n = rec.n_epochs();
    let mut keep = Vec::new();
    for e in 1..n.saturating_sub(1) {
        if rec.epoch_index[e - 1] + 1 == rec.epoch_index[e]
            && rec.epoch_index[e] + 1 == rec.epoch_index[e + 1]
        {
            keep.push(e);
        }
    }
    if keep.is_empty() {
        bail!(
            Empty,
            "recording {} is too short for one expanded 30 s epoch",
            rec.id
        );
    }
    let channels = rec
        .channels
        .iter()
        .enumerate()
        .map(|(c, ch)| {
            let mut samples = Vec::with_capacity(keep.len() * EPOCH_SAMPLES);
            for &e in &keep {
                let prev = rec.epoch(c, e - 1);
                samples.extend_from_slice(&prev[prev.len() - side..]);
                samples.extend_from_slice(rec.epoch(c, e));
                samples.extend_from_slice(&rec.epoch(c, e + 1)[..side]);
            }
            Channel {
                samples,
                ..ch.clone()
            }
        })
        .collect();
    Ok(Recording {
        channels,
        labels: keep.iter().map(|&e| rec.labels[e]).collect(),
        epoch_index: keep.iter().map(|&e| rec.epoch_index[e]).collect(),
        epoch_len_s: EPOCH_SECONDS,
        ..rec.clone()
    })
}

fn in_bed_range(off: Option<usize>, on: Option<usize>) -> Result<(usize, usize)> {
    let lo = off.unwrap_or(0);
    let hi = on.unwrap_or(usize::MAX);
    if lo > hi {
        bail!(
            InvalidArgument,
            "lights off at epoch {lo} comes after lights on at epoch {hi}"
        );
    }
    Ok((lo, hi))
}

/// Keeps epochs whose original index lies in `[lights_off, lights_on)`.
pub fn trim_to_in_bed(rec: &Recording) -> Result<Recording> {
    let (lo, hi) = in_bed_range(rec.lights_off_epoch, rec.lights_on_epoch)?;
    let keep: Vec<usize> = (0..rec.n_epochs())
        .filter(|&e| (lo..hi).contains(&rec.epoch_index[e]))
        .collect();
    Ok(rec.retain_positions(&keep))
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let (mut term, mut sum, mut k) = (1.0, 1.0, 1.0);
    while term > sum * 1e-17 {
        term *= q / (k * k);
        sum += term;
        k += 1.0;
    }
    sum
}

fn kaiser(n: usize, beta: f64) -> Vec<f64> {
    let denom = bessel_i0(beta);
    let m = (n - 1) as f64;
    (0..n)
        .map(|i| {
            let r = 2.0 * i as f64 / m - 1.0;
            bessel_i0(beta * libm::sqrt((1.0 - r * r).max(0.0))) / denom
        })
        .collect()
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        libm::sin(PI * x) / (PI * x)
    }
}

/// Kaiser window shape parameter of the anti-aliasing filter.
pub const KAISER_BETA: f64 = 8.0;

/// Low-pass prototype for rational resampling by `up / down`: cutoff at
/// `1 / max(up, down)` of Nyquist, `2·10·max(up, down) + 1` taps, unit DC
/// gain, scaled by `up`.
pub fn resampling_filter(up: usize, down: usize) -> Vec<f64> {
    let max_rate = up.max(down);
    let half_len = 10 * max_rate;
    let cutoff = 1.0 / max_rate as f64;
    let n = 2 * half_len + 1;
    let win = kaiser(n, KAISER_BETA);
    let mut h: Vec<f64> = (0..n)
        .map(|i| cutoff * sinc(cutoff * (i as f64 - half_len as f64)) * win[i])
        .collect();
    let dc: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v *= up as f64 / dc);
    h
}

/// Polyphase resampling of `x` by `up / down` with a centred FIR filter and
/// zero extension at both ends. Output length is `ceil(len · up / down)`.
pub fn resample_poly(x: &[f64], up: usize, down: usize) -> Vec<f64> {
    let g = gcd(up as u64, down as u64) as usize;
    let (up, down) = (up / g, down / g);
    if up == 1 && down == 1 {
        return x.to_vec();
    }
    let h = resampling_filter(up, down);
    let half = (h.len() - 1) / 2;
    let n_out = (x.len() * up).div_ceil(down);
    (0..n_out)
        .map(|m| {
            // y[m] = Σ_k x[k] h[m·down − k·up + half]
            let t = m * down + half;
            let k_hi = (t / up).min(x.len().saturating_sub(1));
            let k_lo = t.saturating_sub(h.len() - 1).div_ceil(up);
            (k_lo..=k_hi).map(|k| x[k] * h[t - k * up]).sum()
        })
        .collect()
}

/// Rational approximation of `to / from` with rates resolved to 1 mHz.
fn rate_ratio(from: f64, to: f64) -> Result<(usize, usize)> {
    if !(from.is_finite() && from > 0.0) {
        bail!(InvalidArgument, "sample rate must be positive, got {from}");
    }
    let a = libm::round(to * 1000.0) as u64;
    let b = libm::round(from * 1000.0) as u64;
    if b == 0 {
        bail!(
            InvalidArgument,
            "sample rate {from} Hz is below the 1 mHz resolution"
        );
    }
    let g = gcd(a, b);
    Ok(((a / g) as usize, (b / g) as usize))
}

/// Resamples a channel to 100 Hz; a channel already at 100 Hz is returned
/// unchanged.
pub fn resample_to_100hz(ch: &Channel) -> Result<Channel> {
    let (up, down) = rate_ratio(ch.sample_rate_hz, CANONICAL_RATE_HZ)?;
    let samples = if up == down {
        ch.samples.clone()
    } else {
        resample_poly(&ch.samples, up, down)
    };
    Ok(Channel {
        samples,
        sample_rate_hz: CANONICAL_RATE_HZ,
        ..ch.clone()
    })
}

/// Scoring information accompanying a raw signal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypnogram {
    pub tokens: Vec<String>,
    pub standard: ScoringStandard,
    pub epoch_len_s: f64,
    pub lights_off_epoch: Option<usize>,
    pub lights_on_epoch: Option<usize>,
}

/// Full canonicalization of a continuous raw signal and its hypnogram:
/// resample to 100 Hz, cut 30 s windows (expanding 20 s scoring), drop
/// excluded and out-of-bed epochs.
pub fn canonicalize(
    id: &str,
    subject: &str,
    channels: &[Channel],
    hyp: &Hypnogram,
) -> Result<Recording> {
    if channels.is_empty() {
        bail!(Empty, "recording {id} has no channels");
    }
    if hyp.tokens.is_empty() {
        bail!(Empty, "recording {id} has an empty hypnogram");
    }
    let channels = channels
        .iter()
        .map(resample_to_100hz)
        .collect::<Result<Vec<_>>>()?;
    let len = channels.iter().map(|c| c.samples.len()).min().unwrap_or(0);
    let mapping = map_stages(&hyp.tokens, hyp.standard)?;
    let (lo, hi) = in_bed_range(hyp.lights_off_epoch, hyp.lights_on_epoch)?;
    let windows: Vec<(usize, usize, StageLabel)> =
        epoch_windows(hyp.tokens.len(), hyp.epoch_len_s, len)?
            .into_iter()
            .filter(|(k, _)| (lo..hi).contains(k))
            .filter_map(|(k, s)| mapping.per_epoch[k].map(|l| (k, s, l)))
            .collect();
    if windows.is_empty() {
        bail!(Empty, "recording {id} has no usable epochs");
    }
    let channels = channels
        .into_iter()
        .map(|ch| {
            let mut samples = Vec::with_capacity(windows.len() * EPOCH_SAMPLES);
            for &(_, s, _) in &windows {
                samples.extend_from_slice(&ch.samples[s..s + EPOCH_SAMPLES]);
            }
            Channel { samples, ..ch }
        })
        .collect();
    let rec = Recording {
        id: id.to_string(),
        subject: subject.to_string(),
        channels,
        labels: windows.iter().map(|w| w.2).collect(),
        epoch_index: windows.iter().map(|w| w.0).collect(),
        lights_off_epoch: hyp.lights_off_epoch,
        lights_on_epoch: hyp.lights_on_epoch,
        epoch_len_s: EPOCH_SECONDS,
    };
    rec.check_canonical()?;
    Ok(rec)
}

/// `L` consecutive epochs of one recording.
#[derive(Clone, Copy, Debug)]
pub struct EpochSequence<'a> {
    pub recording: &'a Recording,
    /// Kept-epoch position of the first epoch.
    pub start: usize,
    pub len: usize,
}

impl<'a> EpochSequence<'a> {
    pub fn labels(&self) -> &'a [StageLabel] {
        &self.recording.labels[self.start..self.start + self.len]
    }

    /// Original index of the first epoch in the parent recording.
    pub fn source_epoch_index(&self) -> usize {
        self.recording.epoch_index[self.start]
    }

    /// Samples of position `l` on channel `c`.
    pub fn epoch(&self, c: usize, l: usize) -> &'a [f64] {
        self.recording.epoch(c, self.start + l)
    }
}

/// Start positions of hop-spaced length-`l` sequences inside a run of `n`
/// consecutive epochs: `floor((n − l) / hop) + 1` of them, none if `n < l`.
pub fn sequence_starts(n: usize, l: usize, hop: usize) -> Vec<usize> {
    assert!(l > 0 && hop > 0, "sequence length and hop must be positive");
    if n < l {
        return Vec::new();
    }
    (0..=(n - l) / hop).map(|i| i * hop).collect()
}

/// Training sequences. Sequences never cross a gap in `epoch_index`: each
/// contiguous run is sampled on its own.
pub fn sample_sequences(rec: &Recording, l: usize, hop: usize) -> Vec<EpochSequence<'_>> {
    rec.contiguous_runs()
        .into_iter()
        .flat_map(|run| {
            sequence_starts(run.len(), l, hop)
                .into_iter()
                .map(move |s| EpochSequence {
                    recording: rec,
                    start: run.start + s,
                    len: l,
                })
        })
        .collect()
}
