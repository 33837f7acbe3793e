//! Plot-ready CSV exports and the per-run manifest.

use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};

use seqsleep_core::features::RecordingFeatures;
use seqsleep_core::inference::HypnogramPrediction;
use seqsleep_core::training::LearningCurve;
use seqsleep_core::transfer::SweepCurve;

use crate::blob::{sha256_hex, to_json, write_bytes};
use crate::error::Result;

pub const RUN_MANIFEST: &str = "run_manifest.json";

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    Ok(w.into_inner().expect("in-memory writer"))
}

/// Long format: one row per (series, step).
pub fn curve_csv(curve: &LearningCurve) -> Result<Vec<u8>> {
    let series = [
        ("train_loss", &curve.train_loss),
        ("val_accuracy", &curve.val_accuracy),
        ("monitor_accuracy", &curve.monitor_accuracy),
    ];
    let rows = series.into_iter().flat_map(|(name, pts)| {
        pts.iter()
            .map(move |p| vec![name.to_string(), p.step.to_string(), p.value.to_string()])
    });
    csv_bytes(&["series", "step", "value"], rows)
}

/// Test accuracy along the finetuning steps; rows past `recorded` repeat
/// the last value and are flagged as padding.
pub fn sweep_csv(curve: &SweepCurve) -> Result<Vec<u8>> {
    let rows = curve.points.iter().enumerate().map(|(i, p)| {
        vec![
            p.step.to_string(),
            p.value.to_string(),
            u8::from(i >= curve.recorded).to_string(),
        ]
    });
    csv_bytes(&["step", "test_accuracy", "padded"], rows)
}

/// One row per epoch: original index, true and predicted stage and the
/// fused posterior.
pub fn predictions_csv(rows: &[(&RecordingFeatures, &HypnogramPrediction)]) -> Result<Vec<u8>> {
    let out = rows.iter().flat_map(|(rec, pred)| {
        (0..rec.n_epochs()).map(move |e| {
            let mut r = vec![
                rec.id.clone(),
                rec.epoch_index[e].to_string(),
                rec.labels[e].as_str().to_string(),
                pred.labels[e].as_str().to_string(),
            ];
            r.extend(pred.aggregated[e].iter().map(f64::to_string));
            r
        })
    });
    csv_bytes(
        &[
            "recording",
            "epoch_index",
            "true",
            "predicted",
            "p_W",
            "p_N1",
            "p_N2",
            "p_N3",
            "p_REM",
        ],
        out,
    )
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Collects the files a command writes so the manifest can list them.
#[derive(Debug)]
pub struct Outputs {
    pub dir: PathBuf,
    pub files: Vec<FileDigest>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.into(),
            files: Vec::new(),
        }
    }

    pub fn bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        write_bytes(&self.dir.join(rel), bytes)?;
        self.record(rel, sha256_hex(bytes));
        Ok(())
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, rel: &str, value: &T) -> Result<()> {
        self.bytes(rel, to_json(value).as_bytes())
    }

    /// Registers a file written by other means.
    pub fn record(&mut self, rel: &str, sha256: String) {
        self.files.retain(|f| f.path != rel);
        self.files.push(FileDigest {
            path: rel.to_string(),
            sha256,
        });
    }
}

/// Everything needed to rerun a command. Carries no timestamps so reruns
/// reproduce it byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub git_describe: String,
    pub inputs: Vec<FileDigest>,
    /// Paths relative to the output directory.
    pub outputs: Vec<FileDigest>,
}

pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

impl RunManifest {
    pub fn write(self, outputs: &Outputs) -> Result<()> {
        let mut files = outputs.files.clone();
        files.sort_by(|a, b| a.path.cmp(&b.path));
        let m = RunManifest {
            outputs: files,
            ..self
        };
        write_bytes(&outputs.dir.join(RUN_MANIFEST), to_json(&m).as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use seqsleep_core::training::CurvePoint;

    #[test]
    fn sweep_rows_flag_padding() {
        let c = SweepCurve {
            n_subjects: 1,
            subjects: vec!["a".into()],
            points: vec![
                CurvePoint {
                    step: 0,
                    value: 0.5,
                },
                CurvePoint {
                    step: 5,
                    value: 0.75,
                },
                CurvePoint {
                    step: 10,
                    value: 0.75,
                },
            ],
            recorded: 2,
        };
        let text = String::from_utf8(sweep_csv(&c).unwrap()).unwrap();
        assert_eq!(
            text,
            "step,test_accuracy,padded\n0,0.5,0\n5,0.75,0\n10,0.75,1\n"
        );
    }
}
