//! Dataset ingestion (EDF + sidecar JSON), the prepared on-disk form of
//! canonical recordings and the per-channel feature cache.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use seqsleep_core::features::{FeatureSpec, RecordingFeatures};
use seqsleep_core::recordings::{
    canonicalize, parse_hypnogram, Channel, Hypnogram, Modality, Recording, ScoringStandard,
    StageLabel, EPOCH_SAMPLES,
};
use seqsleep_core::synthdomain::{generate_domain, DomainSpec};

use crate::blob::{read_f64, read_json, sha256_hex, to_json, write_bytes, write_f64, write_json};
use crate::edf::{self, Annotation, WriteSignal};
use crate::error::{Error, IoContext, Result};

pub const CACHE_ENV: &str = "SEQSLEEP_CACHE_DIR";
pub const MANIFEST: &str = "dataset.json";

/// Accepted channel labels per modality, matched exactly, first hit wins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelAliases {
    #[serde(rename = "EEG", default)]
    pub eeg: Vec<String>,
    #[serde(rename = "EOG", default)]
    pub eog: Vec<String>,
    #[serde(rename = "EMG", default)]
    pub emg: Vec<String>,
}

impl Default for ChannelAliases {
    fn default() -> Self {
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            eeg: v(&[
                "EEG Fpz-Cz",
                "EEG C4-A1",
                "EEG C3-A2",
                "EEG C4-M1",
                "EEG C3-M2",
                "EEG",
            ]),
            eog: v(&["EOG horizontal", "EOG ROC-LOC", "EOG E1-M2", "EOG"]),
            emg: v(&["EMG submental", "EMG chin", "EMG Chin1-Chin2", "EMG"]),
        }
    }
}

impl ChannelAliases {
    pub fn names(&self, m: Modality) -> &[String] {
        match m {
            Modality::Eeg => &self.eeg,
            Modality::Eog => &self.eog,
            Modality::Emg => &self.emg,
        }
    }
}

pub const MODALITIES: [Modality; 3] = [Modality::Eeg, Modality::Eog, Modality::Emg];

/// Per-recording channel override.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelChoice {
    #[serde(rename = "EEG", default, skip_serializing_if = "Option::is_none")]
    pub eeg: Option<String>,
    #[serde(rename = "EOG", default, skip_serializing_if = "Option::is_none")]
    pub eog: Option<String>,
    #[serde(rename = "EMG", default, skip_serializing_if = "Option::is_none")]
    pub emg: Option<String>,
}

impl ChannelChoice {
    fn get(&self, m: Modality) -> Option<&String> {
        match m {
            Modality::Eeg => self.eeg.as_ref(),
            Modality::Eog => self.eog.as_ref(),
            Modality::Emg => self.emg.as_ref(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HypnogramSource {
    Tokens(Vec<String>),
    /// Text file (one token per line) or EDF+ file with stage annotations,
    /// relative to the sidecar.
    File(PathBuf),
}

fn default_standard() -> ScoringStandard {
    ScoringStandard::Aasm
}

fn default_epoch_len() -> f64 {
    30.0
}

/// `<stem>.json` next to each `<stem>.edf`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    /// Defaults to the file stem.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    #[serde(default = "default_standard")]
    pub standard: ScoringStandard,
    #[serde(default = "default_epoch_len")]
    pub epoch_len_s: f64,
    /// Absent: stage annotations embedded in the recording itself.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hypnogram: Option<HypnogramSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lights_off_epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lights_on_epoch: Option<usize>,
    #[serde(default)]
    pub channels: ChannelChoice,
}

fn is_edf(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("edf"))
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn read_edf(path: &Path) -> Result<edf::EdfFile> {
    let bytes = fs::read(path).at(path)?;
    edf::parse_edf(&bytes).map_err(|source| Error::Edf {
        path: path.into(),
        source,
    })
}

/// A canonical recording together with the digest of the file it came from.
#[derive(Clone, Debug)]
pub struct Ingested {
    pub recording: Recording,
    pub source: PathBuf,
    pub source_sha256: String,
}

/// Reads every recording of a raw dataset directory. Each `*.edf` needs a
/// sidecar; EDF files referenced as hypnograms by a sidecar are skipped.
pub fn ingest_dir(dir: &Path, aliases: &ChannelAliases) -> Result<Vec<Ingested>> {
    let mut edfs: Vec<PathBuf> = fs::read_dir(dir)
        .at(dir)?
        .map(|e| e.map(|e| e.path()).at(dir))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| is_edf(p))
        .collect();
    edfs.sort();
    let mut sidecars = Vec::with_capacity(edfs.len());
    let mut hypnogram_files = BTreeSet::new();
    for p in &edfs {
        let side = p.with_extension("json");
        let sc = if side.exists() {
            Some(read_json::<Sidecar>(&side)?)
        } else {
            None
        };
        if let Some(HypnogramSource::File(f)) = sc.as_ref().and_then(|s| s.hypnogram.as_ref()) {
            hypnogram_files.insert(dir.join(f));
        }
        sidecars.push(sc);
    }
    let mut out = Vec::new();
    for (p, sc) in edfs.iter().zip(sidecars) {
        if hypnogram_files.contains(p) {
            continue;
        }
        let sc = sc.ok_or_else(|| {
            Error::Dataset(format!(
                "{}: missing sidecar {} (subject, standard, hypnogram, lights markers)",
                p.display(),
                p.with_extension("json").display()
            ))
        })?;
        out.push(ingest_one(dir, p, &sc, aliases)?);
    }
    if out.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: no EDF recordings found",
            dir.display()
        )));
    }
    Ok(out)
}

fn pick_channels(
    file: &edf::EdfFile,
    sc: &Sidecar,
    aliases: &ChannelAliases,
    path: &Path,
) -> Result<Vec<Channel>> {
    let available = file.channels();
    let mut picked = Vec::new();
    for m in MODALITIES {
        let found = match sc.channels.get(m) {
            Some(name) => Some(available.iter().find(|c| &c.name == name).ok_or_else(|| {
                Error::Dataset(format!(
                    "{}: sidecar names channel {name:?}, which the file lacks",
                    path.display()
                ))
            })?),
            None => aliases
                .names(m)
                .iter()
                .find_map(|n| available.iter().find(|c| &c.name == n)),
        };
        if let Some(c) = found {
            picked.push(Channel {
                modality: Some(m),
                ..c.clone()
            });
        }
    }
    if picked.is_empty() {
        let names: Vec<&str> = available.iter().map(|c| c.name.as_str()).collect();
        return Err(Error::Dataset(format!(
            "{}: no channel matches the alias table (has {names:?})",
            path.display()
        )));
    }
    Ok(picked)
}

fn ingest_one(dir: &Path, path: &Path, sc: &Sidecar, aliases: &ChannelAliases) -> Result<Ingested> {
    let bytes = fs::read(path).at(path)?;
    let file = edf::parse_edf(&bytes).map_err(|source| Error::Edf {
        path: path.into(),
        source,
    })?;
    let channels = pick_channels(&file, sc, aliases, path)?;
    let from_annotations = |a: &[Annotation]| edf::scoring_from_annotations(a, sc.epoch_len_s);
    let scoring = match &sc.hypnogram {
        Some(HypnogramSource::Tokens(t)) => edf::AnnotatedScoring {
            tokens: t.clone(),
            ..from_annotations(&file.annotations)
        },
        Some(HypnogramSource::File(f)) => {
            let hp = dir.join(f);
            if is_edf(&hp) {
                from_annotations(&read_edf(&hp)?.annotations)
            } else {
                let text = fs::read_to_string(&hp).at(&hp)?;
                edf::AnnotatedScoring {
                    tokens: parse_hypnogram(&text)
                        .map_err(|e| Error::Dataset(format!("{}: {e}", hp.display())))?,
                    ..from_annotations(&file.annotations)
                }
            }
        }
        None => from_annotations(&file.annotations),
    };
    if scoring.tokens.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: no hypnogram in the sidecar and no stage annotations in the file",
            path.display()
        )));
    }
    let hyp = Hypnogram {
        tokens: scoring.tokens,
        standard: sc.standard,
        epoch_len_s: sc.epoch_len_s,
        lights_off_epoch: sc.lights_off_epoch.or(scoring.lights_off_epoch),
        lights_on_epoch: sc.lights_on_epoch.or(scoring.lights_on_epoch),
    };
    let id = stem(path);
    let subject = sc.subject.clone().unwrap_or_else(|| id.clone());
    let recording = canonicalize(&id, &subject, &channels, &hyp)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    Ok(Ingested {
        recording,
        source: path.into(),
        source_sha256: sha256_hex(&bytes),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelEntry {
    pub name: String,
    pub modality: Option<Modality>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordingEntry {
    pub id: String,
    pub subject: String,
    /// Blob path relative to the dataset directory.
    pub file: String,
    pub sha256: String,
    pub channels: Vec<ChannelEntry>,
    pub labels: Vec<StageLabel>,
    pub epoch_index: Vec<usize>,
    pub lights_off_epoch: Option<usize>,
    pub lights_on_epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_sha256: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreparedManifest {
    pub format: u32,
    pub recordings: Vec<RecordingEntry>,
}

/// Writes canonical recordings as `recordings/<id>.bin` blobs (channels back
/// to back) plus `dataset.json`. Returns the manifest digest.
pub fn write_prepared(out: &Path, recs: &[(&Recording, Option<&str>)]) -> Result<String> {
    let mut entries = Vec::with_capacity(recs.len());
    let mut ids = BTreeSet::new();
    for (r, source_sha) in recs {
        if !ids.insert(&r.id) {
            return Err(Error::Dataset(format!("duplicate recording id {}", r.id)));
        }
        r.check_canonical()?;
        let file = format!("recordings/{}.bin", r.id);
        let values: Vec<f64> = r
            .channels
            .iter()
            .flat_map(|c| c.samples.iter().copied())
            .collect();
        let sha256 = write_f64(&out.join(&file), &values)?;
        entries.push(RecordingEntry {
            id: r.id.clone(),
            subject: r.subject.clone(),
            file,
            sha256,
            channels: r
                .channels
                .iter()
                .map(|c| ChannelEntry {
                    name: c.name.clone(),
                    modality: c.modality,
                })
                .collect(),
            labels: r.labels.clone(),
            epoch_index: r.epoch_index.clone(),
            lights_off_epoch: r.lights_off_epoch,
            lights_on_epoch: r.lights_on_epoch,
            source_sha256: source_sha.map(String::from),
        });
    }
    let manifest = PreparedManifest {
        format: 1,
        recordings: entries,
    };
    let text = to_json(&manifest);
    write_bytes(&out.join(MANIFEST), text.as_bytes())?;
    Ok(sha256_hex(text.as_bytes()))
}

pub fn read_prepared(dir: &Path) -> Result<(Vec<Recording>, PreparedManifest)> {
    let manifest: PreparedManifest = read_json(&dir.join(MANIFEST))?;
    let mut recs = Vec::with_capacity(manifest.recordings.len());
    for e in &manifest.recordings {
        let n = e.labels.len() * EPOCH_SAMPLES;
        let values = read_f64(&dir.join(&e.file), n * e.channels.len(), &e.sha256)?;
        let channels = e
            .channels
            .iter()
            .zip(values.chunks_exact(n.max(1)))
            .map(|(c, s)| Channel {
                modality: c.modality,
                ..Channel::new(&c.name, 100.0, s.to_vec())
            })
            .collect();
        let rec = Recording {
            id: e.id.clone(),
            subject: e.subject.clone(),
            channels,
            labels: e.labels.clone(),
            epoch_index: e.epoch_index.clone(),
            lights_off_epoch: e.lights_off_epoch,
            lights_on_epoch: e.lights_on_epoch,
            epoch_len_s: 30.0,
        };
        rec.check_canonical()?;
        recs.push(rec);
    }
    Ok((recs, manifest))
}

/// Exports recordings as EDF+ files whose stage annotations carry the
/// hypnogram, with sidecars naming the channels.
pub fn export_edf(out: &Path, recs: &[Recording]) -> Result<()> {
    for r in recs {
        if r.epoch_index.iter().enumerate().any(|(i, &k)| i != k) {
            return Err(Error::Dataset(format!(
                "recording {} is not continuous; cannot export as EDF",
                r.id
            )));
        }
        let signals: Vec<WriteSignal<'_>> = r
            .channels
            .iter()
            .map(|c| WriteSignal {
                label: &c.name,
                physical_dimension: "uV",
                sample_rate_hz: c.sample_rate_hz,
                samples: &c.samples,
            })
            .collect();
        let annotations: Vec<Annotation> = r
            .labels
            .iter()
            .enumerate()
            .map(|(e, l)| Annotation {
                onset_s: e as f64 * 30.0,
                duration_s: Some(30.0),
                text: format!("Sleep stage {}", l.as_str()),
            })
            .collect();
        let bytes =
            edf::write_edf(&r.subject, &signals, &annotations).map_err(|source| Error::Edf {
                path: out.join(format!("{}.edf", r.id)),
                source,
            })?;
        write_bytes(&out.join(format!("{}.edf", r.id)), &bytes)?;
        let mut channels = ChannelChoice::default();
        for c in &r.channels {
            match c.modality {
                Some(Modality::Eeg) => channels.eeg = Some(c.name.clone()),
                Some(Modality::Eog) => channels.eog = Some(c.name.clone()),
                Some(Modality::Emg) => channels.emg = Some(c.name.clone()),
                None => {}
            }
        }
        let sidecar = Sidecar {
            subject: Some(r.subject.clone()),
            standard: ScoringStandard::Aasm,
            epoch_len_s: 30.0,
            hypnogram: None,
            lights_off_epoch: r.lights_off_epoch,
            lights_on_epoch: r.lights_on_epoch,
            channels,
        };
        write_json(&out.join(format!("{}.json", r.id)), &sidecar)?;
    }
    Ok(())
}

/// Where a dataset comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
#[allow(clippy::large_enum_variant)]
pub enum DatasetSource {
    /// Output directory of `prepare` or `synth`.
    Prepared { path: PathBuf },
    /// Generated in memory.
    Synth { spec: DomainSpec },
}

/// Loaded canonical recordings plus an identity digest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub recordings: Vec<Recording>,
    /// Digest of the prepared manifest or of the generator spec.
    pub sha256: String,
    /// Prepared datasets keep a feature cache.
    pub cache: Option<FeatureCache>,
}

impl Dataset {
    pub fn load(src: &DatasetSource) -> Result<Self> {
        match src {
            DatasetSource::Prepared { path } => {
                let (recordings, _) = read_prepared(path)?;
                let text = fs::read(path.join(MANIFEST)).at(path.join(MANIFEST))?;
                Ok(Self {
                    recordings,
                    sha256: sha256_hex(&text),
                    cache: Some(FeatureCache::for_dataset(path)),
                })
            }
            DatasetSource::Synth { spec } => Ok(Self {
                recordings: generate_domain(spec)?,
                sha256: sha256_hex(to_json(spec).as_bytes()),
                cache: None,
            }),
        }
    }

    pub fn subjects(&self) -> Vec<String> {
        self.recordings
            .iter()
            .map(|r| r.subject.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Features of every recording from the channels of `modalities`, in
    /// that order.
    pub fn features(
        &self,
        modalities: &[Modality],
        spec: &FeatureSpec,
    ) -> Result<Vec<RecordingFeatures>> {
        self.recordings
            .iter()
            .map(|r| recording_features(r, modalities, spec, self.cache.as_ref()))
            .collect()
    }
}

/// Channel indices of `rec` for each requested modality.
pub fn modality_channels(rec: &Recording, modalities: &[Modality]) -> Result<Vec<usize>> {
    modalities
        .iter()
        .map(|m| {
            rec.channels
                .iter()
                .position(|c| c.modality == Some(*m))
                .ok_or_else(|| Error::Dataset(format!("recording {} has no {m:?} channel", rec.id)))
        })
        .collect()
}

fn single_channel(rec: &Recording, c: usize) -> Recording {
    Recording {
        channels: vec![rec.channels[c].clone()],
        ..rec.clone()
    }
}

pub fn recording_features(
    rec: &Recording,
    modalities: &[Modality],
    spec: &FeatureSpec,
    cache: Option<&FeatureCache>,
) -> Result<RecordingFeatures> {
    let idx = modality_channels(rec, modalities)?;
    let per_channel = idx
        .iter()
        .map(|&c| match (spec, cache) {
            (FeatureSpec::Image(_), Some(cache)) => cache.channel_features(rec, c, spec),
            _ => Ok(RecordingFeatures::extract(&single_channel(rec, c), spec)?),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(interleave(&per_channel))
}

/// Merges single-channel features into one multi-channel layout with the
/// channel axis last.
pub fn interleave(per_channel: &[RecordingFeatures]) -> RecordingFeatures {
    let first = &per_channel[0];
    let k = per_channel.len();
    let mut epoch_shape = first.epoch_shape.clone();
    *epoch_shape.last_mut().unwrap() = k;
    let mut data = Vec::with_capacity(first.data.len() * k);
    for i in 0..first.data.len() {
        data.extend(per_channel.iter().map(|f| f.data[i]));
    }
    RecordingFeatures {
        epoch_shape,
        data,
        ..first.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CacheEntry {
    recording: String,
    recording_sha256: String,
    channel: String,
    feature: FeatureSpec,
    epoch_shape: Vec<usize>,
    sha256: String,
}

/// Single-channel features keyed by the digest of the channel samples and
/// the feature settings.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    pub dir: PathBuf,
}

impl FeatureCache {
    /// `$SEQSLEEP_CACHE_DIR` when set, otherwise `<dataset>/cache`.
    pub fn for_dataset(dataset: &Path) -> Self {
        let dir = std::env::var_os(CACHE_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
            .unwrap_or_else(|| dataset.join("cache"));
        Self { dir }
    }

    fn key(rec: &Recording, c: usize, spec: &FeatureSpec) -> (String, String) {
        let samples = crate::blob::encode_f64(&rec.channels[c].samples);
        let rec_sha = sha256_hex(&samples);
        let mut key_src = rec_sha.clone().into_bytes();
        key_src.extend(serde_json::to_vec(spec).unwrap());
        (sha256_hex(&key_src), rec_sha)
    }

    pub fn channel_features(
        &self,
        rec: &Recording,
        c: usize,
        spec: &FeatureSpec,
    ) -> Result<RecordingFeatures> {
        let (key, rec_sha) = Self::key(rec, c, spec);
        let meta = self.dir.join(format!("{key}.json"));
        let blob = self.dir.join(format!("{key}.bin"));
        let one = single_channel(rec, c);
        if meta.exists() {
            let entry: CacheEntry = read_json(&meta)?;
            let numel: usize = entry.epoch_shape.iter().product();
            let data = read_f64(&blob, numel * rec.n_epochs(), &entry.sha256)?;
            return Ok(RecordingFeatures {
                id: rec.id.clone(),
                subject: rec.subject.clone(),
                epoch_shape: entry.epoch_shape,
                data,
                labels: rec.labels.clone(),
                epoch_index: rec.epoch_index.clone(),
            });
        }
        let f = RecordingFeatures::extract(&one, spec)?;
        let sha256 = write_f64(&blob, &f.data)?;
        write_json(
            &meta,
            &CacheEntry {
                recording: rec.id.clone(),
                recording_sha256: rec_sha,
                channel: rec.channels[c].name.clone(),
                feature: *spec,
                epoch_shape: f.epoch_shape.clone(),
                sha256,
            },
        )?;
        Ok(f)
    }

    /// Digests of every cache blob, sorted by file name.
    pub fn digests(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        if !self.dir.exists() {
            return Ok(out);
        }
        for e in fs::read_dir(&self.dir).at(&self.dir)? {
            let p = e.at(&self.dir)?.path();
            if p.extension().is_some_and(|x| x == "json") {
                let entry: CacheEntry = read_json(&p)?;
                out.push((stem(&p), entry.sha256));
            }
        }
        out.sort();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use seqsleep_core::features::StftConfig;

    fn domain() -> Vec<Recording> {
        generate_domain(&DomainSpec {
            n_subjects: 2,
            epochs_per_subject: 4,
            channels: vec![Modality::Eeg, Modality::Eog],
            ..DomainSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn interleaved_channels_match_joint_extraction() {
        let recs = domain();
        for spec in [FeatureSpec::Raw, FeatureSpec::Image(StftConfig::default())] {
            let joint = RecordingFeatures::extract(&recs[0], &spec).unwrap();
            let split =
                recording_features(&recs[0], &[Modality::Eeg, Modality::Eog], &spec, None).unwrap();
            assert_eq!(joint, split);
        }
        let swapped =
            recording_features(&recs[0], &[Modality::Eog], &FeatureSpec::Raw, None).unwrap();
        assert_eq!(swapped.data, recs[0].channels[1].samples);
        assert!(recording_features(&recs[0], &[Modality::Emg], &FeatureSpec::Raw, None).is_err());
    }

    #[test]
    fn prepared_round_trip_and_cache() {
        let dir = tempfile::tempdir().unwrap();
        let recs = domain();
        let refs: Vec<(&Recording, Option<&str>)> = recs.iter().map(|r| (r, None)).collect();
        let h1 = write_prepared(dir.path(), &refs).unwrap();
        let (back, _) = read_prepared(dir.path()).unwrap();
        assert_eq!(back, recs);
        let h2 = write_prepared(dir.path(), &refs).unwrap();
        assert_eq!(h1, h2);

        let cache = FeatureCache {
            dir: dir.path().join("c"),
        };
        let spec = FeatureSpec::Image(StftConfig::default());
        let fresh = cache.channel_features(&recs[1], 1, &spec).unwrap();
        let cached = cache.channel_features(&recs[1], 1, &spec).unwrap();
        assert_eq!(fresh, cached);
        assert_eq!(cache.digests().unwrap().len(), 1);
    }

    #[test]
    fn edf_export_ingests_back() {
        let dir = tempfile::tempdir().unwrap();
        let recs = domain();
        export_edf(dir.path(), &recs).unwrap();
        let got = ingest_dir(dir.path(), &ChannelAliases::default()).unwrap();
        assert_eq!(got.len(), 2);
        for (g, r) in got.iter().zip(&recs) {
            assert_eq!(g.recording.labels, r.labels);
            assert_eq!(g.recording.subject, r.subject);
            assert_eq!(g.recording.channels.len(), 2);
            let ch = &g.recording.channels[1];
            assert_eq!(ch.modality, Some(Modality::Eog));
            let range = r.channels[1]
                .samples
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            let tol = 2.0 * range / 65535.0 + 1e-9;
            assert!(ch
                .samples
                .iter()
                .zip(&r.channels[1].samples)
                .all(|(a, b)| (a - b).abs() <= tol));
        }
        fs::remove_file(dir.path().join(format!("{}.json", recs[0].id))).unwrap();
        let err = ingest_dir(dir.path(), &ChannelAliases::default()).unwrap_err();
        assert!(err.to_string().contains("missing sidecar"), "{err}");
    }
}
