//! EDF and EDF+ reading, plus a small writer used to export generated data.
//!
//! Layout: a 256-byte ASCII main header, 256 bytes of per-signal fields
//! (stored field-major: all labels, then all transducers, ...), then data
//! records of little-endian `i16` samples, signal after signal.

use seqsleep_core::recordings::Channel;

pub const ANNOTATION_LABEL: &str = "EDF Annotations";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EdfError {
    #[error("header field `{field}`{}: {reason} (got {value:?})", signal_suffix(*.signal))]
    Field {
        field: &'static str,
        signal: Option<usize>,
        value: String,
        reason: &'static str,
    },
    #[error("signal {signal} ({label}): cannot calibrate, {reason}")]
    Calibration {
        signal: usize,
        label: String,
        reason: &'static str,
    },
    #[error("file is truncated: header promises {expected} data records, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("data section is {bytes} bytes, not a whole number of {record_bytes}-byte records")]
    RecordCount { bytes: usize, record_bytes: usize },
    #[error("malformed annotation in record {record}: {reason}")]
    Annotation { record: usize, reason: String },
    #[error("cannot write: {0}")]
    Write(String),
}

fn signal_suffix(signal: Option<usize>) -> String {
    signal
        .map(|s| format!(" of signal {s}"))
        .unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SignalHeader {
    pub label: String,
    pub transducer: String,
    pub physical_dimension: String,
    pub physical_min: f64,
    pub physical_max: f64,
    pub digital_min: i32,
    pub digital_max: i32,
    pub prefiltering: String,
    pub samples_per_record: usize,
}

impl SignalHeader {
    pub fn is_annotation(&self) -> bool {
        self.label == ANNOTATION_LABEL
    }

    fn scale(&self) -> f64 {
        (self.physical_max - self.physical_min) / f64::from(self.digital_max - self.digital_min)
    }

    pub fn to_physical(&self, d: i16) -> f64 {
        (f64::from(d) - f64::from(self.digital_min)) * self.scale() + self.physical_min
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdfHeader {
    pub version: String,
    pub patient: String,
    pub recording: String,
    pub start_date: String,
    pub start_time: String,
    /// Reserved field; "EDF+C" or "EDF+D" for EDF+.
    pub reserved: String,
    pub n_records: usize,
    pub record_duration_s: f64,
    pub signals: Vec<SignalHeader>,
}

impl EdfHeader {
    pub fn is_edf_plus(&self) -> bool {
        self.reserved.starts_with("EDF+")
    }

    fn record_samples(&self) -> usize {
        self.signals.iter().map(|s| s.samples_per_record).sum()
    }
}

/// One EDF+ annotation (time-stamped annotation list entry).
#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub onset_s: f64,
    pub duration_s: Option<f64>,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdfFile {
    pub header: EdfHeader,
    /// Calibrated samples of every ordinary signal, in header order.
    pub signals: Vec<(usize, Vec<f64>)>,
    pub annotations: Vec<Annotation>,
}

impl EdfFile {
    /// Ordinary signals as channels; the rate is samples per record over
    /// the record duration.
    pub fn channels(&self) -> Vec<Channel> {
        self.signals
            .iter()
            .map(|(i, samples)| {
                let h = &self.header.signals[*i];
                Channel::new(
                    h.label.trim(),
                    h.samples_per_record as f64 / self.header.record_duration_s,
                    samples.clone(),
                )
            })
            .collect()
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(
        &mut self,
        n: usize,
        field: &'static str,
        signal: Option<usize>,
    ) -> Result<&'a str, EdfError> {
        let end = self.pos + n;
        let raw = self.bytes.get(self.pos..end).ok_or(EdfError::Field {
            field,
            signal,
            value: String::new(),
            reason: "header ends early",
        })?;
        self.pos = end;
        std::str::from_utf8(raw).map_err(|_| EdfError::Field {
            field,
            signal,
            value: String::from_utf8_lossy(raw).into_owned(),
            reason: "not ASCII",
        })
    }

    fn text(
        &mut self,
        n: usize,
        field: &'static str,
        signal: Option<usize>,
    ) -> Result<String, EdfError> {
        Ok(self.take(n, field, signal)?.trim().to_string())
    }

    fn number<T: std::str::FromStr>(
        &mut self,
        n: usize,
        field: &'static str,
        signal: Option<usize>,
    ) -> Result<T, EdfError> {
        let raw = self.take(n, field, signal)?.trim();
        raw.parse().map_err(|_| EdfError::Field {
            field,
            signal,
            value: raw.to_string(),
            reason: "not a number",
        })
    }
}

fn per_signal<T>(
    cur: &mut Cursor<'_>,
    ns: usize,
    mut read: impl FnMut(&mut Cursor<'_>, usize) -> Result<T, EdfError>,
) -> Result<Vec<T>, EdfError> {
    (0..ns).map(|i| read(cur, i)).collect()
}

pub fn parse_header(bytes: &[u8]) -> Result<EdfHeader, EdfError> {
    let mut c = Cursor { bytes, pos: 0 };
    let version = c.text(8, "version", None)?;
    if version != "0" {
        return Err(EdfError::Field {
            field: "version",
            signal: None,
            value: version,
            reason: "expected 0",
        });
    }
    let patient = c.text(80, "patient", None)?;
    let recording = c.text(80, "recording", None)?;
    let start_date = c.text(8, "start date", None)?;
    let start_time = c.text(8, "start time", None)?;
    let header_bytes: usize = c.number(8, "header bytes", None)?;
    let reserved = c.text(44, "reserved", None)?;
    let n_records: i64 = c.number(8, "number of data records", None)?;
    let record_duration_s: f64 = c.number(8, "record duration", None)?;
    let ns: usize = c.number(4, "number of signals", None)?;
    if header_bytes != 256 * (ns + 1) {
        return Err(EdfError::Field {
            field: "header bytes",
            signal: None,
            value: header_bytes.to_string(),
            reason: "must equal 256 × (signals + 1)",
        });
    }
    if record_duration_s.is_nan() || record_duration_s <= 0.0 {
        return Err(EdfError::Field {
            field: "record duration",
            signal: None,
            value: record_duration_s.to_string(),
            reason: "must be positive",
        });
    }
    let labels = per_signal(&mut c, ns, |c, i| c.text(16, "label", Some(i)))?;
    let transducers = per_signal(&mut c, ns, |c, i| c.text(80, "transducer", Some(i)))?;
    let dims = per_signal(&mut c, ns, |c, i| c.text(8, "physical dimension", Some(i)))?;
    let pmin = per_signal(&mut c, ns, |c, i| {
        c.number::<f64>(8, "physical minimum", Some(i))
    })?;
    let pmax = per_signal(&mut c, ns, |c, i| {
        c.number::<f64>(8, "physical maximum", Some(i))
    })?;
    let dmin = per_signal(&mut c, ns, |c, i| {
        c.number::<i32>(8, "digital minimum", Some(i))
    })?;
    let dmax = per_signal(&mut c, ns, |c, i| {
        c.number::<i32>(8, "digital maximum", Some(i))
    })?;
    let prefilter = per_signal(&mut c, ns, |c, i| c.text(80, "prefiltering", Some(i)))?;
    let spr = per_signal(&mut c, ns, |c, i| {
        c.number::<usize>(8, "samples per record", Some(i))
    })?;
    per_signal(&mut c, ns, |c, i| {
        c.take(32, "signal reserved", Some(i)).map(drop)
    })?;

    let signals: Vec<SignalHeader> = (0..ns)
        .map(|i| SignalHeader {
            label: labels[i].clone(),
            transducer: transducers[i].clone(),
            physical_dimension: dims[i].clone(),
            physical_min: pmin[i],
            physical_max: pmax[i],
            digital_min: dmin[i],
            digital_max: dmax[i],
            prefiltering: prefilter[i].clone(),
            samples_per_record: spr[i],
        })
        .collect();
    for (i, s) in signals.iter().enumerate() {
        if s.is_annotation() {
            continue;
        }
        let reason = if s.physical_min == s.physical_max {
            Some("physical minimum equals physical maximum")
        } else if s.digital_min >= s.digital_max {
            Some("digital minimum is not below digital maximum")
        } else if !(s.physical_min.is_finite() && s.physical_max.is_finite()) {
            Some("physical range is not finite")
        } else {
            None
        };
        if let Some(reason) = reason {
            return Err(EdfError::Calibration {
                signal: i,
                label: s.label.clone(),
                reason,
            });
        }
    }
    let n_records = if n_records == -1 {
        // Unknown while recording; inferred from the data size by the caller.
        usize::MAX
    } else {
        usize::try_from(n_records).map_err(|_| EdfError::Field {
            field: "number of data records",
            signal: None,
            value: n_records.to_string(),
            reason: "must be -1 or non-negative",
        })?
    };
    Ok(EdfHeader {
        version,
        patient,
        recording,
        start_date,
        start_time,
        reserved,
        n_records,
        record_duration_s,
        signals,
    })
}

/// Parses a whole EDF or EDF+ file held in memory.
pub fn parse_edf(bytes: &[u8]) -> Result<EdfFile, EdfError> {
    let mut header = parse_header(bytes)?;
    let data = &bytes[256 * (header.signals.len() + 1)..];
    let record_bytes = 2 * header.record_samples();
    if record_bytes == 0 {
        return Err(EdfError::Field {
            field: "samples per record",
            signal: None,
            value: "0".into(),
            reason: "records hold no samples",
        });
    }
    let whole = data.len() / record_bytes;
    if header.n_records == usize::MAX {
        header.n_records = whole;
    }
    if whole < header.n_records {
        return Err(EdfError::Truncated {
            expected: header.n_records,
            found: whole,
        });
    }
    if data.len() != header.n_records * record_bytes {
        return Err(EdfError::RecordCount {
            bytes: data.len(),
            record_bytes,
        });
    }

    let mut signals: Vec<(usize, Vec<f64>)> = header
        .signals
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.is_annotation())
        .map(|(i, s)| {
            (
                i,
                Vec::with_capacity(s.samples_per_record * header.n_records),
            )
        })
        .collect();
    let mut annotations = Vec::new();
    for (r, record) in data.chunks_exact(record_bytes).enumerate() {
        let mut off = 0;
        let mut next_ordinary = 0;
        for s in &header.signals {
            let chunk = &record[off..off + 2 * s.samples_per_record];
            off += chunk.len();
            if s.is_annotation() {
                annotations.extend(parse_tal(chunk, r)?);
            } else {
                let out = &mut signals[next_ordinary].1;
                next_ordinary += 1;
                out.extend(
                    chunk
                        .chunks_exact(2)
                        .map(|b| s.to_physical(i16::from_le_bytes([b[0], b[1]]))),
                );
            }
        }
    }
    Ok(EdfFile {
        header,
        signals,
        annotations,
    })
}

fn parse_seconds(s: &str, record: usize, what: &str) -> Result<f64, EdfError> {
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| EdfError::Annotation {
            record,
            reason: format!("bad {what} {s:?}"),
        })
}

/// Time-stamped annotation lists of one record. Entries without text (the
/// record time-keeping stamps) are skipped.
pub fn parse_tal(bytes: &[u8], record: usize) -> Result<Vec<Annotation>, EdfError> {
    let mut out = Vec::new();
    for tal in bytes.split(|b| *b == 0).filter(|t| !t.is_empty()) {
        let tal = std::str::from_utf8(tal).map_err(|_| EdfError::Annotation {
            record,
            reason: "not UTF-8".into(),
        })?;
        let mut parts = tal.split('\u{14}');
        let stamp = parts.next().unwrap_or_default();
        let (onset, duration) = match stamp.split_once('\u{15}') {
            Some((o, d)) => (o, Some(d)),
            None => (stamp, None),
        };
        if !onset.starts_with(['+', '-']) {
            return Err(EdfError::Annotation {
                record,
                reason: format!("onset {onset:?} lacks a sign"),
            });
        }
        let onset_s = parse_seconds(onset, record, "onset")?;
        let duration_s = duration
            .map(|d| parse_seconds(d, record, "duration"))
            .transpose()?;
        for text in parts.filter(|t| !t.is_empty()) {
            out.push(Annotation {
                onset_s,
                duration_s,
                text: text.to_string(),
            });
        }
    }
    Ok(out)
}

/// Stage tokens and in-bed markers recovered from scoring annotations.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnnotatedScoring {
    pub tokens: Vec<String>,
    pub lights_off_epoch: Option<usize>,
    pub lights_on_epoch: Option<usize>,
}

fn is_stage_annotation(text: &str) -> bool {
    let t = text.trim().to_ascii_lowercase();
    t.starts_with("sleep stage") || t.starts_with("movement")
}

/// Expands stage annotations ("Sleep stage 2", "Movement time") into one
/// token per epoch. Unscored stretches between annotations become
/// "UNKNOWN"; "Lights off"/"Lights on" annotations set the in-bed markers.
pub fn scoring_from_annotations(annotations: &[Annotation], epoch_len_s: f64) -> AnnotatedScoring {
    let mut s = AnnotatedScoring::default();
    let epoch_at = |t: f64| (t / epoch_len_s).round().max(0.0) as usize;
    for a in annotations {
        let lower = a.text.trim().to_ascii_lowercase();
        if lower == "lights off" {
            s.lights_off_epoch = Some(epoch_at(a.onset_s));
            continue;
        }
        if lower == "lights on" {
            s.lights_on_epoch = Some(epoch_at(a.onset_s));
            continue;
        }
        if !is_stage_annotation(&a.text) {
            continue;
        }
        let first = epoch_at(a.onset_s);
        let n = a
            .duration_s
            .map_or(1, |d| (d / epoch_len_s).round() as usize);
        if s.tokens.len() < first {
            s.tokens.resize(first, "UNKNOWN".into());
        }
        s.tokens.truncate(first);
        s.tokens
            .extend(std::iter::repeat_n(a.text.trim().to_string(), n));
    }
    s
}

/// A signal to be written: label, sampling rate and physical samples.
#[derive(Clone, Debug)]
pub struct WriteSignal<'a> {
    pub label: &'a str,
    pub physical_dimension: &'a str,
    pub sample_rate_hz: f64,
    pub samples: &'a [f64],
}

fn field(out: &mut Vec<u8>, value: &str, width: usize) -> Result<(), EdfError> {
    if value.len() > width || !value.is_ascii() {
        return Err(EdfError::Write(format!(
            "{value:?} does not fit a {width}-byte ASCII field"
        )));
    }
    out.extend_from_slice(value.as_bytes());
    out.extend(std::iter::repeat_n(b' ', width - value.len()));
    Ok(())
}

/// Decimal rendering of `v` that fits 8 characters, rounded away from the
/// data: down for a minimum, up for a maximum.
fn bound_field(v: f64, up: bool) -> String {
    for p in (0..=7).rev() {
        let scale = 10f64.powi(p);
        let r = if up {
            (v * scale).ceil() / scale
        } else {
            (v * scale).floor() / scale
        };
        let s = format!("{r:.*}", p as usize);
        let ok = s
            .parse::<f64>()
            .is_ok_and(|x| if up { x >= v } else { x <= v });
        if s.len() <= 8 && ok {
            return s;
        }
    }
    format!("{:.0}", if up { v.ceil() } else { v.floor() })
}

/// Writes an EDF+ (continuous) file with 1 s records. Physical ranges are
/// taken from the data (rounded outward to what the 8-byte fields can
/// hold) and samples are quantized to the full `i16` range. Annotations,
/// when given, go into an "EDF Annotations" signal.
pub fn write_edf(
    patient: &str,
    signals: &[WriteSignal<'_>],
    annotations: &[Annotation],
) -> Result<Vec<u8>, EdfError> {
    let record_s = 1.0;
    let mut spr = Vec::with_capacity(signals.len());
    let mut n_records = 0usize;
    for s in signals {
        let per = s.sample_rate_hz * record_s;
        if per.fract() != 0.0 || per <= 0.0 {
            return Err(EdfError::Write(format!(
                "signal {} rate {} Hz is not a whole number",
                s.label, s.sample_rate_hz
            )));
        }
        let per = per as usize;
        let records = s.samples.len().div_ceil(per);
        if s.samples.len() % per != 0 || (n_records != 0 && records != n_records) {
            return Err(EdfError::Write(format!(
                "signal {} does not span whole, equal records",
                s.label
            )));
        }
        n_records = records;
        spr.push(per);
    }

    let tals = annotation_records(annotations, n_records, record_s);
    let ann_spr = tals.iter().map(Vec::len).max().unwrap_or(0).div_ceil(2);
    let with_ann = !annotations.is_empty() || signals.is_empty();
    let ns = signals.len() + usize::from(with_ann);

    let ranges: Vec<(String, String)> = signals
        .iter()
        .map(|s| {
            let lo = s.samples.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = s.samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let (lo, hi) = if lo < hi {
                (lo, hi)
            } else {
                (lo - 1.0, lo + 1.0)
            };
            (bound_field(lo, false), bound_field(hi, true))
        })
        .collect();

    let mut out = Vec::with_capacity(256 * (ns + 1));
    field(&mut out, "0", 8)?;
    field(&mut out, patient, 80)?;
    field(&mut out, "Startdate X X X X", 80)?;
    field(&mut out, "01.01.00", 8)?;
    field(&mut out, "00.00.00", 8)?;
    field(&mut out, &(256 * (ns + 1)).to_string(), 8)?;
    field(&mut out, "EDF+C", 44)?;
    field(&mut out, &n_records.to_string(), 8)?;
    field(&mut out, "1", 8)?;
    field(&mut out, &ns.to_string(), 4)?;

    let ann = with_ann.then_some(ANNOTATION_LABEL);
    let labels: Vec<&str> = signals.iter().map(|s| s.label).chain(ann).collect();
    for l in &labels {
        field(&mut out, l, 16)?;
    }
    for _ in 0..ns {
        field(&mut out, "", 80)?;
    }
    for d in signals
        .iter()
        .map(|s| s.physical_dimension)
        .chain(with_ann.then_some(""))
    {
        field(&mut out, d, 8)?;
    }
    for v in ranges
        .iter()
        .map(|r| r.0.as_str())
        .chain(with_ann.then_some("-1"))
    {
        field(&mut out, v, 8)?;
    }
    for v in ranges
        .iter()
        .map(|r| r.1.as_str())
        .chain(with_ann.then_some("1"))
    {
        field(&mut out, v, 8)?;
    }
    for _ in 0..ns {
        field(&mut out, "-32768", 8)?;
    }
    for _ in 0..ns {
        field(&mut out, "32767", 8)?;
    }
    for _ in 0..ns {
        field(&mut out, "", 80)?;
    }
    for n in spr
        .iter()
        .copied()
        .chain(with_ann.then_some(ann_spr.max(1)))
    {
        field(&mut out, &n.to_string(), 8)?;
    }
    for _ in 0..ns {
        field(&mut out, "", 32)?;
    }

    for r in 0..n_records.max(usize::from(with_ann && n_records == 0)) {
        for (s, ((lo, hi), &per)) in signals.iter().zip(ranges.iter().zip(&spr)) {
            let (lo, hi): (f64, f64) = (lo.parse().unwrap(), hi.parse().unwrap());
            let scale = 65535.0 / (hi - lo);
            for v in &s.samples[r * per..(r + 1) * per] {
                let d = ((v - lo) * scale - 32768.0)
                    .round()
                    .clamp(-32768.0, 32767.0) as i16;
                out.extend_from_slice(&d.to_le_bytes());
            }
        }
        if with_ann {
            let mut tal = tals.get(r).cloned().unwrap_or_default();
            tal.resize(2 * ann_spr.max(1), 0);
            out.extend_from_slice(&tal);
        }
    }
    Ok(out)
}

/// TAL bytes per record: a time-keeping stamp followed by the annotations
/// whose onset falls in that record.
fn annotation_records(annotations: &[Annotation], n_records: usize, record_s: f64) -> Vec<Vec<u8>> {
    let n = n_records.max(1);
    let mut recs: Vec<Vec<u8>> = (0..n)
        .map(|r| format!("+{}\u{14}\u{14}\0", r as f64 * record_s).into_bytes())
        .collect();
    for a in annotations {
        let r = ((a.onset_s / record_s).floor().max(0.0) as usize).min(n - 1);
        let mut tal = format!("{:+}", a.onset_s);
        if let Some(d) = a.duration_s {
            tal.push_str(&format!("\u{15}{d}"));
        }
        tal.push_str(&format!("\u{14}{}\u{14}\0", a.text));
        recs[r].extend_from_slice(tal.as_bytes());
    }
    recs
}
