//! End-to-end runs of the `seqsleep` binary on small synthetic data.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_seqsleep"));
    c.env_remove("SEQSLEEP_CACHE_DIR");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

#[track_caller]
fn ok(dir: &Path, args: &[&str]) -> Output {
    let o = run(dir, args);
    assert!(
        o.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

/// Every file under `root`, by relative path.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().into(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

const CONFIG: &str = r#"
seed = 3
output_dir = "out"
strategy = "ALL"
[model]
kind = "SeqSleepNetPlus"
seq_len = 3
[source]
kind = "synth"
spec = { name = "src", n_subjects = 3, epochs_per_subject = 8, seed = 1 }
[target]
kind = "prepared"
path = "tgt"
[pretrain]
batch_size = 4
max_steps = 8
eval_every = 4
bn_momentum = 0.9
[finetune]
batch_size = 4
max_steps = 4
eval_every = 2
bn_momentum = 0.9
[folds]
k = 2
[sweep]
counts = [1, 2]
n_test = 1
"#;

/// A directory holding `exp.toml`, the prepared target `tgt` (four
/// subjects of eight epochs) and a pretrained checkpoint under `out`.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("exp.toml"), CONFIG).unwrap();
    ok(
        d,
        &[
            "synth",
            "--out",
            "tgt",
            "--name",
            "tgt",
            "--subjects",
            "4",
            "--epochs",
            "8",
            "--seed",
            "2",
        ],
    );
    ok(d, &["pretrain", "--config", "exp.toml"]);
    dir
}

#[test]
fn pretrain_is_reproducible_and_describes_itself() {
    let ws = workspace();
    let d = ws.path();
    let first = tree(&d.join("out"));
    for f in [
        "checkpoint/checkpoint.json",
        "checkpoint/params.bin",
        "pretrain_curve.csv",
        "pretrain_report.json",
        "run_manifest.json",
    ] {
        assert!(first.contains_key(Path::new(f)), "{f} missing");
    }
    fs::remove_dir_all(d.join("out")).unwrap();
    ok(d, &["pretrain", "--config", "exp.toml"]);
    assert_eq!(tree(&d.join("out")), first);

    let m = json(&d.join("out/run_manifest.json"));
    assert_eq!(m["command"], "pretrain");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["config"]["model"]["seq_len"], 3);
    assert!(!m["git_describe"].as_str().unwrap().is_empty());
    let outputs = m["outputs"].as_array().unwrap();
    let listed: Vec<&str> = outputs
        .iter()
        .map(|o| o["path"].as_str().unwrap())
        .collect();
    assert!(listed.contains(&"checkpoint/params.bin"));
    for o in outputs {
        let bytes = fs::read(d.join("out").join(o["path"].as_str().unwrap())).unwrap();
        use sha2::Digest;
        assert_eq!(
            hex::encode(sha2::Sha256::digest(&bytes)),
            o["sha256"].as_str().unwrap()
        );
    }

    ok(
        d,
        &[
            "pretrain", "--config", "exp.toml", "--seed", "4", "--out", "other",
        ],
    );
    assert_ne!(
        fs::read(d.join("other/checkpoint/params.bin")).unwrap(),
        first[Path::new("checkpoint/params.bin")]
    );
}

#[test]
fn transfer_strategies_and_jobs() {
    let ws = workspace();
    let d = ws.path();
    let ck = "out/checkpoint";

    ok(
        d,
        &[
            "transfer",
            "--config",
            "exp.toml",
            "--checkpoint",
            ck,
            "--strategy",
            "softmax",
            "--out",
            "soft",
        ],
    );
    let r = json(&d.join("soft/transfer_report.json"));
    assert_eq!(r["frozen_groups"], serde_json::json!(["EPB", "SPB"]));
    assert_eq!(r["strategy"], "SOFTMAX_ONLY");

    ok(
        d,
        &[
            "transfer",
            "--config",
            "exp.toml",
            "--checkpoint",
            ck,
            "--strategy",
            "none",
            "--out",
            "none",
        ],
    );
    let r = json(&d.join("none/transfer_report.json"));
    let folds = r["folds"].as_array().unwrap();
    assert_eq!(folds.len(), 2);
    let mut tested: Vec<String> = Vec::new();
    for f in folds {
        assert_eq!(f["report"]["metrics_before"], f["report"]["metrics_after"]);
        tested.extend(
            f["test"]
                .as_array()
                .unwrap()
                .iter()
                .map(|s| s.as_str().unwrap().to_string()),
        );
    }
    tested.sort();
    assert_eq!(tested, ["tgt000", "tgt001", "tgt002", "tgt003"]);
    assert_eq!(r["pooled_after"]["n_epochs"], 32);
    assert_eq!(r["pooled_before"], r["pooled_after"]);

    ok(
        d,
        &[
            "transfer",
            "--config",
            "exp.toml",
            "--checkpoint",
            ck,
            "--out",
            "j1",
        ],
    );
    ok(
        d,
        &[
            "transfer",
            "--config",
            "exp.toml",
            "--checkpoint",
            ck,
            "--out",
            "j2",
            "--jobs",
            "2",
        ],
    );
    let (a, b) = (tree(&d.join("j1")), tree(&d.join("j2")));
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (k, v) in &a {
        // The manifest names its own output directory.
        if k != Path::new("run_manifest.json") {
            assert_eq!(v, &b[k], "{}", k.display());
        }
    }
    assert!(a.contains_key(Path::new("curves/fold_01.csv")));
}

#[test]
fn sweep_writes_one_curve_per_count() {
    let ws = workspace();
    let d = ws.path();
    ok(
        d,
        &[
            "sweep",
            "--config",
            "exp.toml",
            "--checkpoint",
            "out/checkpoint",
            "--counts",
            "1,3",
            "--out",
            "sw",
        ],
    );
    let curves: Vec<String> = tree(&d.join("sw/curves"))
        .into_values()
        .map(|b| String::from_utf8(b).unwrap())
        .collect();
    assert_eq!(curves.len(), 2);
    let lines: Vec<usize> = curves.iter().map(|c| c.lines().count()).collect();
    assert_eq!(lines[0], lines[1]);
    assert!(curves[0].starts_with("step,test_accuracy,padded\n"));
    let r = json(&d.join("sw/sweep_report.json"));
    let n: Vec<u64> = r["curves"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["n_subjects"].as_u64().unwrap())
        .collect();
    assert_eq!(n, [1, 3]);
}

/// Cohen's kappa from parallel label columns.
fn kappa(pairs: &[(String, String)]) -> f64 {
    let n = pairs.len() as f64;
    let mut joint: BTreeMap<(&str, &str), f64> = BTreeMap::new();
    let mut rows: BTreeMap<&str, f64> = BTreeMap::new();
    let mut cols: BTreeMap<&str, f64> = BTreeMap::new();
    for (t, p) in pairs {
        *joint.entry((t, p)).or_default() += 1.0;
        *rows.entry(t).or_default() += 1.0;
        *cols.entry(p).or_default() += 1.0;
    }
    let po = pairs.iter().filter(|(t, p)| t == p).count() as f64 / n;
    let pe: f64 = rows
        .iter()
        .map(|(k, r)| r * cols.get(k).copied().unwrap_or(0.0))
        .sum::<f64>()
        / (n * n);
    if pe == 1.0 {
        1.0
    } else {
        (po - pe) / (1.0 - pe)
    }
}

#[test]
fn evaluate_exports_every_epoch() {
    let ws = workspace();
    let d = ws.path();
    ok(
        d,
        &[
            "evaluate",
            "--checkpoint",
            "out/checkpoint",
            "--dataset",
            "tgt",
            "--out",
            "ev",
        ],
    );
    let text = fs::read_to_string(d.join("ev/predictions.csv")).unwrap();
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = rd.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(
        header,
        [
            "recording",
            "epoch_index",
            "true",
            "predicted",
            "p_W",
            "p_N1",
            "p_N2",
            "p_N3",
            "p_REM"
        ]
    );
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 32);
    for r in &rows {
        let p: Vec<f64> = (4..9).map(|i| r[i].parse().unwrap()).collect();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let pairs: Vec<(String, String)> = rows
        .iter()
        .map(|r| (r[2].to_string(), r[3].to_string()))
        .collect();
    let acc = pairs.iter().filter(|(t, p)| t == p).count() as f64 / 32.0;
    let m = json(&d.join("ev/metrics.json"));
    assert_eq!(m["pooled"]["n_epochs"], 32);
    assert!((m["pooled"]["accuracy"].as_f64().unwrap() - acc).abs() < 1e-12);
    assert!((m["pooled"]["kappa"].as_f64().unwrap() - kappa(&pairs)).abs() < 1e-9);

    // Folds from a transfer run give one report per test set.
    ok(
        d,
        &[
            "transfer",
            "--config",
            "exp.toml",
            "--checkpoint",
            "out/checkpoint",
            "--strategy",
            "none",
            "--out",
            "tr",
        ],
    );
    ok(
        d,
        &[
            "evaluate",
            "--checkpoint",
            "out/checkpoint",
            "--dataset",
            "tgt",
            "--folds",
            "tr/folds.json",
            "--out",
            "ev2",
        ],
    );
    let m2 = json(&d.join("ev2/metrics.json"));
    assert_eq!(m2["per_fold"].as_array().unwrap().len(), 2);
    assert_eq!(m2["pooled"]["n_epochs"], 32);
    let t = json(&d.join("tr/transfer_report.json"));
    assert_eq!(m2["pooled"]["accuracy"], t["pooled_after"]["accuracy"]);
}

#[test]
fn prepare_from_edf_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "synth",
            "--edf",
            "--out",
            "raw",
            "--subjects",
            "2",
            "--epochs",
            "4",
        ],
    );
    ok(d, &["prepare", "raw", "p1"]);
    ok(d, &["prepare", "raw", "p2"]);
    let (a, b) = (tree(&d.join("p1")), tree(&d.join("p2")));
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (k, v) in &a {
        assert_eq!(v, &b[k], "{}", k.display());
    }
    let m1 = json(&d.join("p1/run_manifest.json"));
    assert_eq!(m1["inputs"].as_array().unwrap().len(), 2);
    let r = json(&d.join("p1/prepare_report.json"));
    assert_eq!(r["recordings"], 2);
    assert_eq!(r["epochs"], 8);
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    ok(
        d,
        &[
            "synth",
            "--edf",
            "--out",
            "raw",
            "--subjects",
            "1",
            "--epochs",
            "2",
        ],
    );
    for e in fs::read_dir(d.join("raw")).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "json") {
            fs::remove_file(p).unwrap();
        }
    }
    let o = run(d, &["prepare", "raw", "p"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sidecar"));

    fs::write(d.join("bad.toml"), "seed = 1\nlearning_rate = 0.1\n").unwrap();
    let o = run(d, &["pretrain", "--config", "bad.toml", "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));

    let o = run(d, &["pretrain"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(run(d, &["--help"]).status.success());

    fs::write(d.join("exp.toml"), CONFIG).unwrap();
    ok(
        d,
        &[
            "synth",
            "--out",
            "tgt",
            "--name",
            "tgt",
            "--subjects",
            "2",
            "--epochs",
            "6",
        ],
    );
    ok(d, &["pretrain", "--config", "exp.toml", "--max-steps", "1"]);
    let params = d.join("out/checkpoint/params.bin");
    let mut bytes = fs::read(&params).unwrap();
    bytes[0] ^= 1;
    fs::write(&params, bytes).unwrap();
    let o = run(
        d,
        &[
            "evaluate",
            "--checkpoint",
            "out/checkpoint",
            "--dataset",
            "tgt",
            "--out",
            "ev",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("params.bin"));
}
