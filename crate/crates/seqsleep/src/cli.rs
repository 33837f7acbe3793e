//! `seqsleep` subcommands.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use seqsleep_core::features::{
    fit_on_features, FeatureSpec, NormalizationStats, RecordingFeatures, SplitTag,
};
use seqsleep_core::inference::{
    compute_metrics, predict_features, CrossValidationReport, EvalReport, FoldSpec, Fusion,
};
use seqsleep_core::params::GroupSet;
use seqsleep_core::recordings::Modality;
use seqsleep_core::synthdomain::{generate_domain, DomainSpec};
use seqsleep_core::training::{recording_accuracy, train, SequenceDataset, TrainOutcome};
use seqsleep_core::transfer::{
    choose_subjects, frozen_groups, run_transfer, subject_count_sweep, FinetuneStrategy,
    Pretrained, SweepCurve, TargetSplits, TransferReport, TransferScenario,
};
use seqsleep_core::Model;

use crate::blob::{file_sha256, read_json};
use crate::checkpoint::{feature_spec, Checkpoint, Provenance};
use crate::config::ExperimentConfig;
use crate::dataset::{self, ChannelAliases, Dataset, DatasetSource, FeatureCache};
use crate::error::{Error, Result};
use crate::report::{self, git_describe, FileDigest, Outputs, RunManifest};

#[derive(Debug, Parser)]
#[command(
    name = "seqsleep",
    version,
    about = "Sequence-to-sequence sleep staging and transfer learning"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Generate a synthetic domain as a prepared dataset or as EDF+ files.
    Synth(SynthArgs),
    /// Ingest EDF recordings with JSON sidecars into a prepared dataset.
    Prepare(PrepareArgs),
    /// Train a model on the source dataset and write a checkpoint.
    Pretrain(RunArgs),
    /// Finetune a checkpoint on every cross-validation fold of the target.
    Transfer(TransferArgs),
    /// Evaluate a checkpoint and export per-epoch predictions.
    Evaluate(EvaluateArgs),
    /// Finetune with increasing numbers of target subjects.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Generator spec (JSON or TOML); defaults when absent.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Write EDF+ recordings with sidecars instead of a prepared dataset.
    #[arg(long)]
    pub edf: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Subject id prefix.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    pub dataset: PathBuf,
    pub out: PathBuf,
    /// Channel alias table (JSON object with EEG/EOG/EMG label lists).
    #[arg(long)]
    pub aliases: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_scenario)]
    pub scenario: Option<TransferScenario>,
    /// Caps the optimizer steps of pretraining and finetuning.
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub strategy: Option<FinetuneStrategy>,
    /// Worker threads for independent folds.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Prepared dataset directory.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Fold specification (JSON); every recording forms one set when absent.
    #[arg(long)]
    pub folds: Option<PathBuf>,
    /// Input channels, e.g. `EOG`; the checkpoint's when absent.
    #[arg(long, value_delimiter = ',', value_parser = parse_modality)]
    pub modalities: Vec<Modality>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub strategy: Option<FinetuneStrategy>,
    /// Finetuning subject counts, e.g. `1,3`.
    #[arg(long, value_delimiter = ',')]
    pub counts: Vec<usize>,
}

fn parse_scenario(s: &str) -> std::result::Result<TransferScenario, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
        .map_err(|_| "expected one of eeg_eog_emg, eeg_eog, eeg, eog, eeg_to_eog".to_string())
}

fn parse_modality(s: &str) -> std::result::Result<Modality, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_uppercase()))
        .map_err(|_| "expected EEG, EOG or EMG".to_string())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Synth(a) => synth(a),
        Cmd::Prepare(a) => prepare(a),
        Cmd::Pretrain(a) => pretrain(a),
        Cmd::Transfer(a) => transfer(a),
        Cmd::Evaluate(a) => evaluate(a),
        Cmd::Sweep(a) => sweep(a),
    }
}

fn input(path: &Path) -> Result<FileDigest> {
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: file_sha256(path)?,
    })
}

fn dataset_input(src: &DatasetSource, ds: &Dataset) -> FileDigest {
    let path = match src {
        DatasetSource::Prepared { path } => path.join(dataset::MANIFEST).display().to_string(),
        DatasetSource::Synth { .. } => "synth".into(),
    };
    FileDigest {
        path,
        sha256: ds.sha256.clone(),
    }
}

fn checkpoint_inputs(dir: &Path) -> Result<Vec<FileDigest>> {
    [crate::checkpoint::META, crate::checkpoint::VALUES]
        .iter()
        .map(|f| input(&dir.join(f)))
        .collect()
}

fn manifest(
    command: &str,
    config: &impl Serialize,
    seed: u64,
    inputs: Vec<FileDigest>,
) -> RunManifest {
    RunManifest {
        command: command.into(),
        config: serde_json::to_value(config).expect("serializable config"),
        seed,
        git_describe: git_describe(),
        inputs,
        outputs: Vec::new(),
    }
}

fn load_spec(path: &Path) -> Result<DomainSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec: DomainSpec = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|source| Error::Toml {
            path: path.into(),
            source,
        })?
    } else {
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.into(),
            source,
        })?
    };
    Ok(spec)
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => load_spec(p)?,
        None => DomainSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.subjects {
        spec.n_subjects = n;
    }
    if let Some(n) = a.epochs {
        spec.epochs_per_subject = n;
    }
    if let Some(n) = &a.name {
        spec.name = n.clone();
    }
    spec.validate()?;
    let recs = generate_domain(&spec)?;
    let mut out = Outputs::new(&a.out);
    if a.edf {
        dataset::export_edf(&a.out, &recs)?;
        for r in &recs {
            for ext in ["edf", "json"] {
                let rel = format!("{}.{ext}", r.id);
                out.record(&rel, file_sha256(&a.out.join(&rel))?);
            }
        }
    } else {
        let refs: Vec<_> = recs.iter().map(|r| (r, None)).collect();
        record_prepared(&mut out, &a.out, &refs)?;
    }
    out.json("domain_spec.json", &spec)?;
    let inputs = a
        .spec
        .as_deref()
        .map(input)
        .transpose()?
        .into_iter()
        .collect();
    manifest("synth", &spec, spec.seed, inputs).write(&out)?;
    println!("wrote {} recordings to {}", recs.len(), a.out.display());
    Ok(())
}

fn record_prepared(
    out: &mut Outputs,
    dir: &Path,
    recs: &[(&seqsleep_core::Recording, Option<&str>)],
) -> Result<()> {
    let digest = dataset::write_prepared(dir, recs)?;
    out.record(dataset::MANIFEST, digest);
    let (_, m) = dataset::read_prepared(dir)?;
    for e in m.recordings {
        out.record(&e.file, e.sha256);
    }
    Ok(())
}

#[derive(Serialize)]
struct PrepareReport {
    recordings: usize,
    epochs: usize,
    subjects: Vec<String>,
    /// Per-channel feature cache entries: key and blob digest.
    feature_cache: Vec<(String, String)>,
}

fn prepare(a: PrepareArgs) -> Result<()> {
    let aliases: ChannelAliases = match &a.aliases {
        Some(p) => read_json(p)?,
        None => ChannelAliases::default(),
    };
    let ingested = dataset::ingest_dir(&a.dataset, &aliases)?;
    let mut out = Outputs::new(&a.out);
    let refs: Vec<_> = ingested
        .iter()
        .map(|i| (&i.recording, Some(i.source_sha256.as_str())))
        .collect();
    record_prepared(&mut out, &a.out, &refs)?;
    let cache = FeatureCache::for_dataset(&a.out);
    let spec = feature_spec(seqsleep_core::ModelKind::SeqSleepNetPlus);
    let mut keys = BTreeSet::new();
    for i in &ingested {
        for c in 0..i.recording.channels.len() {
            cache.channel_features(&i.recording, c, &spec)?;
            keys.insert(i.recording.channels[c].name.clone());
        }
    }
    let report = PrepareReport {
        recordings: ingested.len(),
        epochs: ingested.iter().map(|i| i.recording.n_epochs()).sum(),
        subjects: ingested
            .iter()
            .map(|i| i.recording.subject.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
        feature_cache: cache.digests()?,
    };
    out.json("prepare_report.json", &report)?;
    let mut inputs: Vec<FileDigest> = ingested
        .iter()
        .map(|i| FileDigest {
            path: i.source.display().to_string(),
            sha256: i.source_sha256.clone(),
        })
        .collect();
    if let Some(p) = &a.aliases {
        inputs.push(input(p)?);
    }
    manifest("prepare", &aliases, 0, inputs).write(&out)?;
    println!(
        "prepared {} recordings ({} epochs) into {}",
        report.recordings,
        report.epochs,
        a.out.display()
    );
    Ok(())
}

fn load_config(a: &RunArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.scenario {
        cfg.scenario = s;
    }
    if let Some(n) = a.max_steps {
        cfg.pretrain.max_steps = Some(n);
        cfg.finetune.max_steps = Some(n);
    }
    if let Some(o) = &a.out {
        cfg.output_dir = Some(o.clone());
    }
    cfg.validate()?;
    let out = cfg.output_dir.clone().ok_or_else(|| {
        Error::Config("no output directory: pass --out or set `output_dir`".into())
    })?;
    Ok((cfg, out))
}

fn normalized(
    mut feats: Vec<RecordingFeatures>,
    stats: Option<&NormalizationStats>,
) -> Result<Vec<RecordingFeatures>> {
    if let Some(s) = stats {
        for f in &mut feats {
            f.normalize(s)?;
        }
    }
    Ok(feats)
}

#[derive(Serialize)]
struct PretrainReport {
    train_subjects: Vec<String>,
    validation_subjects: Vec<String>,
    steps: usize,
    best_step: usize,
    stopped_early: bool,
    train_accuracy: f64,
    validation: Option<EvalReport>,
}

fn pretrain(a: RunArgs) -> Result<()> {
    let (cfg, out_dir) = load_config(&a)?;
    let src = cfg.require_source()?;
    let ds = Dataset::load(src)?;
    let modalities = cfg.scenario.source_modalities().to_vec();
    let model_cfg = cfg.model_config()?;
    let fspec = feature_spec(model_cfg.kind);
    let feats = ds.features(&modalities, &fspec)?;
    let subjects = ds.subjects();
    let validation: Vec<String> = if cfg.source_validation > 0 {
        choose_subjects(&subjects, cfg.source_validation, cfg.seed)?
    } else {
        Vec::new()
    };
    if validation.len() >= subjects.len() {
        return Err(Error::Config(
            "source_validation leaves no training subjects".into(),
        ));
    }
    let is_val = |f: &RecordingFeatures| validation.contains(&f.subject);
    let stats = match fspec {
        FeatureSpec::Image(_) => {
            let train_refs: Vec<&RecordingFeatures> = feats.iter().filter(|f| !is_val(f)).collect();
            Some(fit_on_features(SplitTag::Train, &train_refs)?)
        }
        FeatureSpec::Raw => None,
    };
    let feats = normalized(feats, stats.as_ref())?;
    let (val, tr): (Vec<&RecordingFeatures>, Vec<&RecordingFeatures>) =
        feats.iter().partition(|f| is_val(f));
    let tc = cfg.pretrain_config();
    let data = SequenceDataset::new(tr.clone(), model_cfg.seq_len, tc.hop)?;
    let mut model = Model::build(&model_cfg, cfg.seed)?;
    let outcome = train(
        &mut model,
        &data,
        (!val.is_empty()).then_some(&val[..]),
        &tc,
        GroupSet::empty(),
    )?;

    let mut out = Outputs::new(&out_dir);
    let ck = Checkpoint {
        model,
        feature: fspec,
        modalities,
        normalization: stats,
        provenance: Provenance {
            command: "pretrain".into(),
            seed: cfg.seed,
            dataset_sha256: ds.sha256.clone(),
            train_subjects: outcome.train_subjects.clone(),
            steps: outcome.steps,
            best_step: outcome.best_step,
        },
    };
    let (meta_sha, values_sha) = ck.save(&out_dir.join("checkpoint"))?;
    out.record("checkpoint/checkpoint.json", meta_sha);
    out.record("checkpoint/params.bin", values_sha);
    out.bytes("pretrain_curve.csv", &report::curve_csv(&outcome.curve)?)?;
    let report = PretrainReport {
        train_subjects: outcome.train_subjects.clone(),
        validation_subjects: validation,
        steps: outcome.steps,
        best_step: outcome.best_step,
        stopped_early: outcome.stopped_early,
        train_accuracy: recording_accuracy(&ck.model, &tr, cfg.eval_batch)?,
        validation: if val.is_empty() {
            None
        } else {
            Some(seqsleep_core::transfer::evaluate_recordings(
                &ck.model,
                &val,
                cfg.eval_batch,
            )?)
        },
    };
    out.json("pretrain_report.json", &report)?;
    let mut inputs = vec![input(&a.config)?];
    inputs.push(dataset_input(src, &ds));
    manifest("pretrain", &cfg, cfg.seed, inputs).write(&out)?;
    println!(
        "pretrained for {} steps; training accuracy {:.4}; checkpoint in {}",
        report.steps,
        report.train_accuracy,
        out_dir.join("checkpoint").display()
    );
    Ok(())
}

/// Target features shaped and normalized like the checkpoint's inputs.
fn target_features(
    cfg: &ExperimentConfig,
    ck: &Checkpoint,
) -> Result<(Dataset, Vec<RecordingFeatures>)> {
    let ds = Dataset::load(cfg.require_target()?)?;
    let feats = ds.features(cfg.scenario.target_modalities(), &ck.feature)?;
    let feats = normalized(feats, ck.normalization.as_ref())?;
    Ok((ds, feats))
}

#[derive(Serialize)]
struct FoldResult {
    fold: usize,
    train: Vec<String>,
    validation: Vec<String>,
    test: Vec<String>,
    report: TransferReport,
    best_step: Option<usize>,
}

#[derive(Serialize)]
struct TransferSummary {
    scenario: TransferScenario,
    strategy: FinetuneStrategy,
    frozen_groups: GroupSet,
    folds: Vec<FoldResult>,
    pooled_before: EvalReport,
    pooled_after: EvalReport,
}

fn of_subjects<'a>(
    feats: &'a [RecordingFeatures],
    subjects: &[String],
) -> Vec<&'a RecordingFeatures> {
    feats
        .iter()
        .filter(|f| subjects.contains(&f.subject))
        .collect()
}

/// Runs `work` for every index in `0..n` on up to `jobs` threads and
/// returns the results in index order.
fn parallel<T: Send>(
    n: usize,
    jobs: usize,
    work: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let r = work(i);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every index ran"))
        .collect()
}

fn transfer(a: TransferArgs) -> Result<()> {
    let (mut cfg, out_dir) = load_config(&a.run)?;
    if let Some(s) = a.strategy {
        cfg.strategy = s;
    }
    let ck = Checkpoint::load(&a.checkpoint)?;
    let pre = ck.pretrained();
    let (ds, feats) = target_features(&cfg, &ck)?;
    let folds = cfg.folds.fold_spec(&ds.subjects(), cfg.seed)?;
    let results = parallel(folds.folds.len(), a.jobs, |i| {
        let f = &folds.folds[i];
        let splits = TargetSplits {
            train: of_subjects(&feats, &f.train),
            validation: of_subjects(&feats, &f.validation),
            test: of_subjects(&feats, &f.test),
        };
        run_transfer(
            &pre,
            &splits,
            cfg.scenario,
            cfg.strategy,
            &cfg.finetune_config(i),
        )
        .map(|r| (r.report, r.outcome))
        .map_err(Error::from)
    })?;
    let mut out = Outputs::new(&out_dir);
    out.json("folds.json", &folds)?;
    let mut fold_results = Vec::with_capacity(results.len());
    for (i, (report, outcome)) in results.into_iter().enumerate() {
        if let Some(o) = &outcome {
            out.bytes(
                &format!("curves/fold_{i:02}.csv"),
                &report::curve_csv(&o.curve)?,
            )?;
        }
        let f = &folds.folds[i];
        fold_results.push(FoldResult {
            fold: i,
            train: f.train.clone(),
            validation: f.validation.clone(),
            test: f.test.clone(),
            best_step: outcome.as_ref().map(|o: &TrainOutcome| o.best_step),
            report,
        });
    }
    let pool = |pick: fn(&TransferReport) -> &EvalReport| {
        EvalReport::pool(
            &fold_results
                .iter()
                .map(|f| pick(&f.report).clone())
                .collect::<Vec<_>>(),
        )
    };
    let summary = TransferSummary {
        scenario: cfg.scenario,
        strategy: cfg.strategy,
        frozen_groups: frozen_groups(cfg.strategy),
        pooled_before: pool(|r| &r.metrics_before)?,
        pooled_after: pool(|r| &r.metrics_after)?,
        folds: fold_results,
    };
    out.json("transfer_report.json", &summary)?;
    let mut inputs = vec![input(&a.run.config)?];
    inputs.extend(checkpoint_inputs(&a.checkpoint)?);
    inputs.push(dataset_input(cfg.require_target()?, &ds));
    manifest("transfer", &cfg, cfg.seed, inputs).write(&out)?;
    println!(
        "{} {} over {} folds: accuracy {:.4} -> {:.4}",
        cfg.scenario.label(),
        cfg.strategy.as_str(),
        summary.folds.len(),
        summary.pooled_before.accuracy,
        summary.pooled_after.accuracy
    );
    Ok(())
}

#[derive(Serialize)]
struct EvaluateArgsRecord<'a> {
    checkpoint: String,
    dataset: String,
    folds: Option<String>,
    modalities: &'a [Modality],
    batch: usize,
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    if a.batch == 0 {
        return Err(Error::Config("--batch must be positive".into()));
    }
    let ck = Checkpoint::load(&a.checkpoint)?;
    let src = DatasetSource::Prepared {
        path: a.dataset.clone(),
    };
    let ds = Dataset::load(&src)?;
    let modalities = if a.modalities.is_empty() {
        ck.modalities.clone()
    } else {
        a.modalities.clone()
    };
    let feats = normalized(
        ds.features(&modalities, &ck.feature)?,
        ck.normalization.as_ref(),
    )?;
    let test_sets: Vec<Vec<String>> = match &a.folds {
        Some(p) => {
            let spec: FoldSpec = read_json(p)?;
            spec.validate()?;
            spec.folds.into_iter().map(|f| f.test).collect()
        }
        None => vec![ds.subjects()],
    };
    let mut predictions = Vec::new();
    let mut per_fold = Vec::with_capacity(test_sets.len());
    for test in &test_sets {
        let mut truth = Vec::new();
        let mut pred = Vec::new();
        for f in of_subjects(&feats, test) {
            let p = predict_features(&ck.model, f, a.batch, Fusion::Multiplicative)?;
            truth.extend_from_slice(&f.labels);
            pred.extend_from_slice(&p.labels);
            predictions.push((f, p));
        }
        per_fold.push(compute_metrics(&truth, &pred)?);
    }
    let cv = CrossValidationReport {
        pooled: EvalReport::pool(&per_fold)?,
        per_fold,
    };
    let rows: Vec<_> = predictions.iter().map(|(f, p)| (*f, p)).collect();
    let mut out = Outputs::new(&a.out);
    out.bytes("predictions.csv", &report::predictions_csv(&rows)?)?;
    out.json("metrics.json", &cv)?;
    let mut inputs = checkpoint_inputs(&a.checkpoint)?;
    inputs.push(dataset_input(&src, &ds));
    if let Some(p) = &a.folds {
        inputs.push(input(p)?);
    }
    let record = EvaluateArgsRecord {
        checkpoint: a.checkpoint.display().to_string(),
        dataset: a.dataset.display().to_string(),
        folds: a.folds.as_ref().map(|p| p.display().to_string()),
        modalities: &modalities,
        batch: a.batch,
    };
    manifest("evaluate", &record, ck.provenance.seed, inputs).write(&out)?;
    print_eval(&cv);
    Ok(())
}

fn print_eval(cv: &CrossValidationReport) {
    let p = &cv.pooled;
    println!(
        "{} epochs: accuracy {:.4}, macro F1 {:.4}, kappa {:.4}",
        p.n_epochs, p.accuracy, p.macro_f1, p.kappa
    );
}

#[derive(Serialize)]
struct SweepSummary {
    strategy: FinetuneStrategy,
    test_subjects: Vec<String>,
    curves: Vec<SweepCurve>,
}

fn sweep(a: SweepArgs) -> Result<()> {
    let (mut cfg, out_dir) = load_config(&a.run)?;
    if let Some(s) = a.strategy {
        cfg.strategy = s;
    }
    if !a.counts.is_empty() {
        cfg.sweep.counts = a.counts.clone();
    }
    cfg.validate()?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (ds, feats) = target_features(&cfg, &ck)?;
    let test_subjects = choose_subjects(&ds.subjects(), cfg.sweep.n_test, cfg.seed)?;
    let (test, pool): (Vec<&RecordingFeatures>, Vec<&RecordingFeatures>) = feats
        .iter()
        .partition(|f| test_subjects.contains(&f.subject));
    let curves = subject_count_sweep(
        &Pretrained::from(&ck.model),
        &pool,
        &test,
        &cfg.sweep.counts,
        cfg.strategy,
        &cfg.finetune_config(0),
    )?;
    let mut out = Outputs::new(&out_dir);
    for (i, c) in curves.iter().enumerate() {
        out.bytes(
            &format!("curves/{i:02}_n{}.csv", c.n_subjects),
            &report::sweep_csv(c)?,
        )?;
    }
    let summary = SweepSummary {
        strategy: cfg.strategy,
        test_subjects,
        curves,
    };
    out.json("sweep_report.json", &summary)?;
    let mut inputs = vec![input(&a.run.config)?];
    inputs.extend(checkpoint_inputs(&a.checkpoint)?);
    inputs.push(dataset_input(cfg.require_target()?, &ds));
    manifest("sweep", &cfg, cfg.seed, inputs).write(&out)?;
    for c in &summary.curves {
        let last = c.points.last().map_or(0.0, |p| p.value);
        println!("{} subject(s): final test accuracy {last:.4}", c.n_subjects);
    }
    Ok(())
}
