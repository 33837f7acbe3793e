//! Seeded synthetic sleep domains: stage sequences from a persistent Markov
//! chain, per-stage band-limited noise and a recording-device transfer
//! function (gain, high-frequency tilt, additive noise).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::recordings::{
    Channel, Modality, Recording, StageLabel, CANONICAL_RATE_HZ, EPOCH_SECONDS,
};
use crate::N_CLASSES;

pub const N_BANDS: usize = 5;

/// Band powers per stage (rows in `StageLabel::ALL` order) for one modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralTemplate {
    pub modality: Modality,
    pub band_power: [[f64; N_BANDS]; N_CLASSES],
}

impl SpectralTemplate {
    pub fn default_for(modality: Modality) -> Self {
        let band_power = match modality {
            Modality::Eeg => [
                [0.6, 0.4, 2.5, 0.3, 1.2],
                [1.0, 1.8, 0.6, 0.3, 0.5],
                [1.8, 1.0, 0.3, 1.6, 0.3],
                [5.0, 0.8, 0.2, 0.3, 0.1],
                [0.8, 1.4, 0.4, 0.2, 0.9],
            ],
            Modality::Eog => [
                [1.5, 0.3, 0.3, 0.2, 0.8],
                [2.0, 0.5, 0.2, 0.2, 0.3],
                [0.6, 0.5, 0.2, 0.5, 0.2],
                [3.0, 0.5, 0.1, 0.2, 0.1],
                [3.5, 0.6, 0.2, 0.1, 0.4],
            ],
            Modality::Emg => [
                [0.2, 0.2, 0.3, 0.6, 3.0],
                [0.2, 0.2, 0.2, 0.4, 1.5],
                [0.2, 0.2, 0.2, 0.4, 1.0],
                [0.3, 0.2, 0.1, 0.3, 0.8],
                [0.1, 0.1, 0.1, 0.1, 0.2],
            ],
        };
        Self {
            modality,
            band_power,
        }
    }
}

/// Linear distortion and noise added by the recording device.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceTransfer {
    pub gain: f64,
    /// First-difference coefficient `a` in `y[t] = x[t] - a·x[t-1]`; raises
    /// high frequencies relative to low ones. Must lie in [0, 1).
    pub tilt: f64,
    /// Standard deviation of white noise added after the gain.
    pub noise_std: f64,
}

impl Default for DeviceTransfer {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl DeviceTransfer {
    pub const IDENTITY: DeviceTransfer = DeviceTransfer {
        gain: 1.0,
        tilt: 0.0,
        noise_std: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.gain.is_finite() && self.gain > 0.0) {
            bail!(
                InvalidConfig,
                "device gain must be positive, got {}",
                self.gain
            );
        }
        if !(0.0..1.0).contains(&self.tilt) {
            bail!(
                InvalidConfig,
                "device tilt must lie in [0, 1), got {}",
                self.tilt
            );
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            bail!(
                InvalidConfig,
                "device noise must be nonnegative, got {}",
                self.noise_std
            );
        }
        Ok(())
    }

    /// L1 distance in (log gain, tilt, noise) coordinates.
    pub fn distance(&self, other: &DeviceTransfer) -> f64 {
        libm::fabs(libm::log(self.gain / other.gain))
            + libm::fabs(self.tilt - other.tilt)
            + libm::fabs(self.noise_std - other.noise_std)
    }

    /// Applies the device to `x` in place.
    pub fn apply<R: Rng>(&self, x: &mut [f64], rng: &mut R) {
        let mut prev = 0.0;
        for v in x.iter_mut() {
            let cur = *v;
            let n: f64 = if self.noise_std > 0.0 {
                rng.sample::<f64, _>(StandardNormal) * self.noise_std
            } else {
                0.0
            };
            *v = self.gain * (cur - self.tilt * prev) + n;
            prev = cur;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainSpec {
    /// Prefix of generated subject ids, keeping domains disjoint.
    pub name: String,
    pub n_subjects: usize,
    pub epochs_per_subject: usize,
    pub priors: [f64; N_CLASSES],
    /// Probability of repeating the previous stage.
    pub persistence: f64,
    pub channels: Vec<Modality>,
    pub templates: Vec<SpectralTemplate>,
    pub band_centers_hz: [f64; N_BANDS],
    pub bandwidth_hz: f64,
    /// Log-normal spread of per-subject band powers and channel gain.
    pub subject_variability: f64,
    /// Intrinsic white-noise floor, before the device.
    pub floor_std: f64,
    pub device: DeviceTransfer,
    pub seed: u64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            name: String::from("synth"),
            n_subjects: 10,
            epochs_per_subject: 120,
            priors: [0.2, 0.1, 0.4, 0.15, 0.15],
            persistence: 0.75,
            channels: vec![Modality::Eeg],
            templates: vec![
                SpectralTemplate::default_for(Modality::Eeg),
                SpectralTemplate::default_for(Modality::Eog),
                SpectralTemplate::default_for(Modality::Emg),
            ],
            band_centers_hz: [2.0, 6.0, 10.0, 13.5, 22.0],
            bandwidth_hz: 1.5,
            subject_variability: 0.2,
            floor_std: 0.1,
            device: DeviceTransfer::IDENTITY,
            seed: 0,
        }
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.epochs_per_subject == 0 {
            bail!(
                InvalidConfig,
                "a domain needs at least one subject and one epoch"
            );
        }
        if self.priors.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            bail!(
                InvalidConfig,
                "stage priors must be nonnegative, got {:?}",
                self.priors
            );
        }
        let total: f64 = self.priors.iter().sum();
        if libm::fabs(total - 1.0) > 1e-9 {
            bail!(InvalidConfig, "stage priors sum to {total}, not 1");
        }
        if !(0.0..1.0).contains(&self.persistence) {
            bail!(
                InvalidConfig,
                "persistence must lie in [0, 1), got {}",
                self.persistence
            );
        }
        if self.channels.is_empty() {
            bail!(InvalidConfig, "a domain needs at least one channel");
        }
        for m in &self.channels {
            let Some(t) = self.template(*m) else {
                bail!(InvalidConfig, "no spectral template for {m:?}");
            };
            if t.band_power
                .iter()
                .flatten()
                .any(|p| !(p.is_finite() && *p >= 0.0))
            {
                bail!(InvalidConfig, "band powers for {m:?} must be nonnegative");
            }
        }
        let nyquist = CANONICAL_RATE_HZ / 2.0;
        if self
            .band_centers_hz
            .iter()
            .any(|f| !(*f > 0.0 && *f < nyquist))
        {
            bail!(InvalidConfig, "band centres must lie in (0, {nyquist}) Hz");
        }
        if !(self.bandwidth_hz > 0.0 && self.bandwidth_hz < nyquist) {
            bail!(InvalidConfig, "bandwidth must lie in (0, {nyquist}) Hz");
        }
        if !(self.subject_variability >= 0.0 && self.floor_std >= 0.0) {
            bail!(
                InvalidConfig,
                "variability and noise floor must be nonnegative"
            );
        }
        self.device.validate()
    }

    pub fn template(&self, m: Modality) -> Option<&SpectralTemplate> {
        self.templates.iter().find(|t| t.modality == m)
    }

    pub fn subject_id(&self, s: usize) -> String {
        format!("{}{:03}", self.name, s)
    }
}

/// Stage sequence of length `n`: with probability `persistence` the previous
/// stage repeats, otherwise a fresh draw from `priors`. The stationary
/// distribution is `priors`.
pub fn markov_stages<R: Rng>(
    priors: &[f64; N_CLASSES],
    persistence: f64,
    n: usize,
    rng: &mut R,
) -> Vec<StageLabel> {
    let draw = |rng: &mut R| {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, p) in priors.iter().enumerate() {
            acc += p;
            if u < acc {
                return StageLabel::ALL[k];
            }
        }
        let last = priors.iter().rposition(|p| *p > 0.0).unwrap_or(0);
        StageLabel::ALL[last]
    };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let next = if i > 0 && rng.random::<f64>() < persistence {
            out[i - 1]
        } else {
            draw(rng)
        };
        out.push(next);
    }
    out
}

/// Two-pole resonator driven by unit white noise, scaled to unit
/// stationary variance.
#[derive(Clone, Debug)]
struct Resonator {
    a1: f64,
    a2: f64,
    scale: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(center_hz: f64, bandwidth_hz: f64, rate_hz: f64) -> Self {
        let r = libm::exp(-PI * bandwidth_hz / rate_hz);
        let w = 2.0 * PI * center_hz / rate_hz;
        let a1 = 2.0 * r * libm::cos(w);
        let a2 = -r * r;
        Self {
            a1,
            a2,
            scale: 1.0 / libm::sqrt(ar2_variance(a1, a2)),
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn step(&mut self, e: f64) -> f64 {
        let y = self.a1 * self.y1 + self.a2 * self.y2 + e;
        self.y2 = self.y1;
        self.y1 = y;
        y * self.scale
    }
}

/// Stationary variance of `y[t] = a1·y[t-1] + a2·y[t-2] + e[t]` for unit
/// innovation variance.
pub fn ar2_variance(a1: f64, a2: f64) -> f64 {
    (1.0 - a2) / ((1.0 + a2) * ((1.0 - a2) * (1.0 - a2) - a1 * a1))
}

const BURN_IN: usize = 500;

/// Generates one canonical 100 Hz recording per subject.
pub fn generate_domain(spec: &DomainSpec) -> Result<Vec<Recording>> {
    spec.validate()?;
    let rate = CANONICAL_RATE_HZ;
    let per_epoch = libm::round(rate * EPOCH_SECONDS) as usize;
    let mut root = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.n_subjects);
    for s in 0..spec.n_subjects {
        let mut rng = ChaCha8Rng::seed_from_u64(root.random());
        let labels = markov_stages(
            &spec.priors,
            spec.persistence,
            spec.epochs_per_subject,
            &mut rng,
        );
        let mut channels = Vec::with_capacity(spec.channels.len());
        for (ci, &m) in spec.channels.iter().enumerate() {
            let template = spec.template(m).expect("validated");
            let sv = spec.subject_variability;
            let mut normal = || rng.sample::<f64, _>(StandardNormal);
            let band_factor: [f64; N_BANDS] = core::array::from_fn(|_| libm::exp(sv * normal()));
            let channel_gain = libm::exp(0.5 * sv * normal());
            let mut bands: Vec<Resonator> = spec
                .band_centers_hz
                .iter()
                .map(|f| Resonator::new(*f, spec.bandwidth_hz, rate))
                .collect();
            for _ in 0..BURN_IN {
                for b in bands.iter_mut() {
                    b.step(rng.sample(StandardNormal));
                }
            }
            let mut x = Vec::with_capacity(per_epoch * labels.len());
            for stage in &labels {
                let power = &template.band_power[stage.index()];
                let amp: [f64; N_BANDS] =
                    core::array::from_fn(|b| libm::sqrt(power[b] * band_factor[b]));
                for _ in 0..per_epoch {
                    let mut v = spec.floor_std * rng.sample::<f64, _>(StandardNormal);
                    for (b, res) in bands.iter_mut().enumerate() {
                        v += amp[b] * res.step(rng.sample(StandardNormal));
                    }
                    x.push(channel_gain * v);
                }
            }
            spec.device.apply(&mut x, &mut rng);
            let name = format!("{}{}", modality_name(m), ci);
            let mut ch = Channel::new(&name, rate, x);
            ch.modality = Some(m);
            channels.push(ch);
        }
        let subject = spec.subject_id(s);
        out.push(Recording::new(
            &subject,
            &subject,
            channels,
            labels,
            EPOCH_SECONDS,
        ));
    }
    Ok(out)
}

fn modality_name(m: Modality) -> &'static str {
    match m {
        Modality::Eeg => "EEG",
        Modality::Eog => "EOG",
        Modality::Emg => "EMG",
    }
}

/// Per-level increments of the device parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MismatchStep {
    /// Gain is multiplied by `gain_factor^level`.
    pub gain_factor: f64,
    pub tilt: f64,
    pub noise_std: f64,
}

impl Default for MismatchStep {
    fn default() -> Self {
        Self {
            gain_factor: 2.0,
            tilt: 0.3,
            noise_std: 0.3,
        }
    }
}

/// One target spec per level. Level 0 reproduces `base`; larger levels move
/// every device parameter further away from it.
pub fn mismatch_ladder(
    base: &DomainSpec,
    levels: &[f64],
    step: &MismatchStep,
) -> Result<Vec<DomainSpec>> {
    if !(step.gain_factor >= 1.0 && step.tilt >= 0.0 && step.noise_std >= 0.0) {
        bail!(
            InvalidArgument,
            "mismatch steps must not shrink the device distortion"
        );
    }
    levels
        .iter()
        .map(|&lvl| {
            if !(lvl.is_finite() && lvl >= 0.0) {
                bail!(
                    InvalidArgument,
                    "mismatch level must be nonnegative, got {lvl}"
                );
            }
            let mut spec = base.clone();
            if lvl > 0.0 {
                spec.device.gain *= libm::pow(step.gain_factor, lvl);
                spec.device.tilt += lvl * step.tilt;
                spec.device.noise_std += lvl * step.noise_std;
            }
            spec.device.validate()?;
            Ok(spec)
        })
        .collect()
}
