//! Model inputs: raw multi-channel epochs and normalized log-power
//! time-frequency images.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::recordings::{contiguous_runs, Recording, StageLabel, CANONICAL_RATE_HZ, EPOCH_SAMPLES};

/// Floor applied to power before the logarithm.
pub const POWER_FLOOR: f64 = 1e-12;
/// Floor applied to normalization standard deviations.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub win_len_s: f64,
    pub hop_s: f64,
    pub n_fft: usize,
    pub sample_rate_hz: f64,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            win_len_s: 2.0,
            hop_s: 1.0,
            n_fft: 256,
            sample_rate_hz: CANONICAL_RATE_HZ,
        }
    }
}

impl StftConfig {
    pub fn win_samples(&self) -> usize {
        libm::round(self.win_len_s * self.sample_rate_hz) as usize
    }

    pub fn hop_samples(&self) -> usize {
        libm::round(self.hop_s * self.sample_rate_hz) as usize
    }

    pub fn n_freq(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frames produced for a signal of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        let w = self.win_samples();
        if len < w {
            0
        } else {
            (len - w) / self.hop_samples() + 1
        }
    }

    fn validate(&self) -> Result<()> {
        let w = self.win_samples();
        if w == 0 || self.hop_samples() == 0 {
            bail!(
                InvalidArgument,
                "STFT window and hop must span at least one sample"
            );
        }
        if self.n_fft < w {
            bail!(
                InvalidArgument,
                "n_fft {} is shorter than the {w}-sample window",
                self.n_fft
            );
        }
        Ok(())
    }
}

/// Time-frequency image, `data` laid out `[T, F, C]` row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochImage {
    pub n_frames: usize,
    pub n_freq: usize,
    pub n_channels: usize,
    pub frame_hop_s: f64,
    pub win_len_s: f64,
    pub data: Vec<f64>,
}

impl EpochImage {
    pub fn shape(&self) -> [usize; 3] {
        [self.n_frames, self.n_freq, self.n_channels]
    }

    pub fn at(&self, t: usize, f: usize, c: usize) -> f64 {
        self.data[(t * self.n_freq + f) * self.n_channels + c]
    }
}

/// In-place iterative radix-2 FFT; `re.len()` must be a power of two.
fn fft_radix2(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    let mut j = 0;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * PI / len as f64;
        for start in (0..n).step_by(len) {
            for k in 0..len / 2 {
                let (s, c) = libm::sincos(ang * k as f64);
                let (a, b) = (start + k, start + k + len / 2);
                let tr = re[b] * c - im[b] * s;
                let ti = re[b] * s + im[b] * c;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len <<= 1;
    }
}

/// `|X_k|²` for `k = 0..=n/2` of a real frame zero-padded to `n`.
fn power_spectrum(frame: &[f64], n: usize) -> Vec<f64> {
    let half = n / 2 + 1;
    if n.is_power_of_two() {
        let mut re = vec![0.0; n];
        re[..frame.len()].copy_from_slice(frame);
        let mut im = vec![0.0; n];
        fft_radix2(&mut re, &mut im);
        (0..half).map(|k| re[k] * re[k] + im[k] * im[k]).collect()
    } else {
        (0..half)
            .map(|k| {
                let (mut a, mut b) = (0.0, 0.0);
                for (t, &x) in frame.iter().enumerate() {
                    let (s, c) = libm::sincos(-2.0 * PI * (k * t % n) as f64 / n as f64);
                    a += x * c;
                    b += x * s;
                }
                a * a + b * b
            })
            .collect()
    }
}

/// Symmetric Hamming window.
pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * libm::cos(2.0 * PI * i as f64 / (n - 1) as f64))
        .collect()
}

/// Hamming-windowed power STFT of every channel, `ln(max(|X|², ε))`.
pub fn stft_log_power(channels: &[&[f64]], cfg: &StftConfig) -> Result<EpochImage> {
    cfg.validate()?;
    let Some(first) = channels.first() else {
        bail!(Empty, "no channels to transform")
    };
    if channels.iter().any(|c| c.len() != first.len()) {
        bail!(ShapeMismatch, "channels of one epoch differ in length");
    }
    let (w, hop) = (cfg.win_samples(), cfg.hop_samples());
    let n_frames = cfg.n_frames(first.len());
    if n_frames == 0 {
        bail!(
            ShapeMismatch,
            "{} samples do not fill one {w}-sample window",
            first.len()
        );
    }
    let (f, c_n) = (cfg.n_freq(), channels.len());
    let win = hamming(w);
    let mut data = vec![0.0; n_frames * f * c_n];
    let mut frame = vec![0.0; w];
    for (c, samples) in channels.iter().enumerate() {
        for t in 0..n_frames {
            for (i, v) in frame.iter_mut().enumerate() {
                *v = samples[t * hop + i] * win[i];
            }
            for (k, p) in power_spectrum(&frame, cfg.n_fft).into_iter().enumerate() {
                data[(t * f + k) * c_n + c] = libm::log(p.max(POWER_FLOOR));
            }
        }
    }
    Ok(EpochImage {
        n_frames,
        n_freq: f,
        n_channels: c_n,
        frame_hop_s: cfg.hop_s,
        win_len_s: cfg.win_len_s,
        data,
    })
}

/// Which subjects a batch of data comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Validation,
    Test,
}

/// Per-(frequency bin, channel) statistics, `[F, C]` row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub n_freq: usize,
    pub n_channels: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    /// Mean 0, std 1 everywhere.
    pub fn identity(n_freq: usize, n_channels: usize) -> Self {
        Self {
            n_freq,
            n_channels,
            mean: vec![0.0; n_freq * n_channels],
            std: vec![1.0; n_freq * n_channels],
        }
    }

    /// Fits statistics over every frame of `images` (each laid out
    /// `[T, F, C]`). Only training data may be used.
    pub fn fit<'a>(
        tag: SplitTag,
        images: impl IntoIterator<Item = &'a [f64]>,
        n_freq: usize,
        n_channels: usize,
    ) -> Result<Self> {
        if tag != SplitTag::Train {
            bail!(
                SubjectLeak,
                "normalization statistics fitted on a {tag:?} split"
            );
        }
        let fc = n_freq * n_channels;
        if fc == 0 {
            bail!(
                InvalidArgument,
                "normalization needs at least one bin and channel"
            );
        }
        let images: Vec<&[f64]> = images.into_iter().collect();
        if images.is_empty() {
            bail!(Empty, "no images to fit normalization on");
        }
        if let Some(bad) = images.iter().find(|im| im.is_empty() || im.len() % fc != 0) {
            bail!(
                ShapeMismatch,
                "image of {} values is not a whole number of [{n_freq}, {n_channels}] frames",
                bad.len()
            );
        }
        let rows = || images.iter().flat_map(|im| im.chunks_exact(fc));
        let count = rows().count() as f64;
        let mut mean = vec![0.0; fc];
        for row in rows() {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; fc];
        for row in rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| libm::sqrt(s / count).max(STD_FLOOR))
            .collect();
        Ok(Self {
            n_freq,
            n_channels,
            mean,
            std,
        })
    }

    fn check(&self, len: usize) -> Result<usize> {
        let fc = self.n_freq * self.n_channels;
        if len == 0 || !len.is_multiple_of(fc) {
            bail!(
                ShapeMismatch,
                "image of {len} values does not match statistics over [{}, {}]",
                self.n_freq,
                self.n_channels
            );
        }
        Ok(fc)
    }

    /// `(x − mean) / std`, broadcast over frames, in place.
    pub fn apply_in_place(&self, data: &mut [f64]) -> Result<()> {
        let fc = self.check(data.len())?;
        for row in data.chunks_exact_mut(fc) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(())
    }

    /// `x · std + mean`, in place.
    pub fn invert_in_place(&self, data: &mut [f64]) -> Result<()> {
        let fc = self.check(data.len())?;
        for row in data.chunks_exact_mut(fc) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
        Ok(())
    }
}

pub fn fit_normalization(tag: SplitTag, images: &[EpochImage]) -> Result<NormalizationStats> {
    let Some(first) = images.first() else {
        bail!(Empty, "no images to fit normalization on")
    };
    if images
        .iter()
        .any(|im| (im.n_freq, im.n_channels) != (first.n_freq, first.n_channels))
    {
        bail!(ShapeMismatch, "images differ in bins or channels");
    }
    NormalizationStats::fit(
        tag,
        images.iter().map(|im| im.data.as_slice()),
        first.n_freq,
        first.n_channels,
    )
}

pub fn apply_normalization(image: &EpochImage, stats: &NormalizationStats) -> Result<EpochImage> {
    check_image_stats(image, stats)?;
    let mut out = image.clone();
    stats.apply_in_place(&mut out.data)?;
    Ok(out)
}

pub fn invert_normalization(image: &EpochImage, stats: &NormalizationStats) -> Result<EpochImage> {
    check_image_stats(image, stats)?;
    let mut out = image.clone();
    stats.invert_in_place(&mut out.data)?;
    Ok(out)
}

fn check_image_stats(image: &EpochImage, stats: &NormalizationStats) -> Result<()> {
    if (image.n_freq, image.n_channels) != (stats.n_freq, stats.n_channels) {
        bail!(
            ShapeMismatch,
            "image has {} bins x {} channels, statistics {} x {}",
            image.n_freq,
            image.n_channels,
            stats.n_freq,
            stats.n_channels
        );
    }
    Ok(())
}

/// Stacks images along the channel axis, in the given order.
pub fn stack_images(images: &[EpochImage]) -> Result<EpochImage> {
    let Some(first) = images.first() else {
        bail!(Empty, "no images to stack")
    };
    if images
        .iter()
        .any(|im| (im.n_frames, im.n_freq) != (first.n_frames, first.n_freq))
    {
        bail!(ShapeMismatch, "stacked images must share frames and bins");
    }
    let c_total: usize = images.iter().map(|im| im.n_channels).sum();
    let cells = first.n_frames * first.n_freq;
    let mut data = Vec::with_capacity(cells * c_total);
    for cell in 0..cells {
        for im in images {
            data.extend_from_slice(&im.data[cell * im.n_channels..(cell + 1) * im.n_channels]);
        }
    }
    Ok(EpochImage {
        n_channels: c_total,
        data,
        ..first.clone()
    })
}

/// Interleaves equally long channels into `[n, C]`.
pub fn stack_raw(channels: &[&[f64]]) -> Result<Vec<f64>> {
    let Some(first) = channels.first() else {
        bail!(Empty, "no channels to stack")
    };
    if channels.iter().any(|c| c.len() != first.len()) {
        bail!(ShapeMismatch, "stacked channels must share a length");
    }
    let mut out = Vec::with_capacity(first.len() * channels.len());
    for i in 0..first.len() {
        out.extend(channels.iter().map(|c| c[i]));
    }
    Ok(out)
}

/// How epochs are presented to a model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSpec {
    /// `[3000, C]` raw samples.
    Raw,
    /// `[T, F, C]` log-power image.
    Image(StftConfig),
}

impl FeatureSpec {
    pub fn epoch_shape(&self, n_channels: usize) -> Vec<usize> {
        match self {
            FeatureSpec::Raw => vec![EPOCH_SAMPLES, n_channels],
            FeatureSpec::Image(c) => vec![c.n_frames(EPOCH_SAMPLES), c.n_freq(), n_channels],
        }
    }
}

/// Per-epoch model inputs of one canonical recording, epochs back to back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordingFeatures {
    pub id: String,
    pub subject: String,
    pub epoch_shape: Vec<usize>,
    pub data: Vec<f64>,
    pub labels: Vec<StageLabel>,
    pub epoch_index: Vec<usize>,
}

impl RecordingFeatures {
    pub fn extract(rec: &Recording, spec: &FeatureSpec) -> Result<Self> {
        rec.check_canonical()?;
        let n_ch = rec.channels.len();
        let epoch_shape = spec.epoch_shape(n_ch);
        let numel: usize = epoch_shape.iter().product();
        let mut data = Vec::with_capacity(rec.n_epochs() * numel);
        for e in 0..rec.n_epochs() {
            let chans: Vec<&[f64]> = (0..n_ch).map(|c| rec.epoch(c, e)).collect();
            match spec {
                FeatureSpec::Raw => data.extend(stack_raw(&chans)?),
                FeatureSpec::Image(cfg) => data.extend(stft_log_power(&chans, cfg)?.data),
            }
        }
        Ok(Self {
            id: rec.id.clone(),
            subject: rec.subject.clone(),
            epoch_shape,
            data,
            labels: rec.labels.clone(),
            epoch_index: rec.epoch_index.clone(),
        })
    }

    pub fn n_epochs(&self) -> usize {
        self.labels.len()
    }

    pub fn epoch_numel(&self) -> usize {
        self.epoch_shape.iter().product()
    }

    pub fn epoch(&self, e: usize) -> &[f64] {
        let n = self.epoch_numel();
        &self.data[e * n..(e + 1) * n]
    }

    /// Epoch slices of every image-valued epoch, for fitting statistics.
    pub fn epochs(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.epoch_numel())
    }

    /// Kept-epoch ranges whose original indices are consecutive.
    pub fn contiguous_runs(&self) -> Vec<core::ops::Range<usize>> {
        contiguous_runs(&self.epoch_index)
    }

    pub fn normalize(&mut self, stats: &NormalizationStats) -> Result<()> {
        if self.epoch_shape.len() != 3 {
            bail!(
                InvalidArgument,
                "only image features are normalized, got shape {:?}",
                self.epoch_shape
            );
        }
        stats.apply_in_place(&mut self.data)
    }

    pub fn describe(&self) -> String {
        format!(
            "{} ({} epochs, {:?})",
            self.id,
            self.n_epochs(),
            self.epoch_shape
        )
    }
}

/// Fits statistics on the image epochs of training recordings.
pub fn fit_on_features(tag: SplitTag, recs: &[&RecordingFeatures]) -> Result<NormalizationStats> {
    let Some(first) = recs.first() else {
        bail!(Empty, "no recordings to fit normalization on")
    };
    if first.epoch_shape.len() != 3 || recs.iter().any(|r| r.epoch_shape != first.epoch_shape) {
        bail!(
            ShapeMismatch,
            "normalization needs image features of one shape"
        );
    }
    let (f, c) = (first.epoch_shape[1], first.epoch_shape[2]);
    NormalizationStats::fit(tag, recs.iter().flat_map(|r| r.epochs()), f, c)
}
