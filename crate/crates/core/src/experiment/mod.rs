//! Experiment runs and their artifact directories.
//!
//! A run directory holds:
//!
//! ```text
//! config.toml          effective configuration
//! run.json             kind, config hash, seed
//! records.jsonl        one IterationRecord per iteration (or training cycle)
//! metrics.jsonl        deterministic training log
//! timings.jsonl        wall-clock durations (excluded from replay)
//! checkpoints/         iter-XXX.ckpt
//! explanations/        iter-XXX/<id>.json for queried instances
//! final_metrics.json   best iteration by validation AUPRC
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DataKind, ExperimentConfig};
use crate::dal::{
    run_dal, IterationRecord, Learner, LoopObserver, Oracle, Phase, ProtoLearner, SimulatedOracle, StopReason,
};
use crate::data::{make_source_synthetic, make_synthetic, split_stratified, DatasetManifest, Instance, SplitDataset};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalMetrics};
use crate::model::{BaselineModel, ProtoModel};
use crate::proto::Explanation;
use crate::search::{QueryRanking, StrategyKind};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::rng::{RngStream, StreamPurpose};
use crate::train::{predictions, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    /// The active-learning loop with the configured strategy.
    Dal,
    /// Plain classifier on the full train split.
    Vanilla,
    /// Prototype model on the full train split, no querying.
    ProtopnetFull,
    /// The loop with random querying.
    ProtoalRandom,
}

impl RunKind {
    pub const BASELINES: [RunKind; 3] = [RunKind::Vanilla, RunKind::ProtopnetFull, RunKind::ProtoalRandom];

    pub fn as_str(self) -> &'static str {
        match self {
            RunKind::Dal => "dal",
            RunKind::Vanilla => "vanilla",
            RunKind::ProtopnetFull => "protopnet_full",
            RunKind::ProtoalRandom => "protoal_random",
        }
    }
}

impl fmt::Display for RunKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RunKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [RunKind::Dal, RunKind::Vanilla, RunKind::ProtopnetFull, RunKind::ProtoalRandom]
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown run kind {s:?}; expected one of dal, vanilla, protopnet_full, protoal_random"
                ))
            })
    }
}

/// Contents of `run.json`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMeta {
    pub run_id: String,
    pub kind: RunKind,
    pub config_hash: String,
    pub seed: u64,
}

/// Contents of `final_metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub kind: RunKind,
    pub config_hash: String,
    /// Iteration with the highest validation AUPRC. Ties go to higher
    /// validation accuracy, then to the earliest iteration.
    pub best_iteration: usize,
    pub validation: EvalMetrics,
    pub test: Option<EvalMetrics>,
    pub labeled: usize,
    pub labeled_fraction: f64,
    pub iterations: usize,
    pub cumulative_steps: usize,
    pub stop: Option<StopReason>,
}

impl FinalMetrics {
    pub fn from_records(meta: &RunMeta, records: &[IterationRecord]) -> Result<Self> {
        let best = records
            .iter()
            .fold(None::<&IterationRecord>, |b, r| match b {
                Some(b) if (b.validation.auprc, b.validation.accuracy) >= (r.validation.auprc, r.validation.accuracy) => {
                    Some(b)
                }
                _ => Some(r),
            })
            .ok_or_else(|| Error::invalid("no iteration records"))?;
        let last = records.last().expect("nonempty");
        Ok(FinalMetrics {
            kind: meta.kind,
            config_hash: meta.config_hash.clone(),
            best_iteration: best.iteration,
            validation: best.validation,
            test: best.test,
            labeled: best.cumulative_labeled,
            labeled_fraction: best.labeled_fraction,
            iterations: records.len(),
            cumulative_steps: last.cumulative_steps,
            stop: last.stop,
        })
    }
}

/// Decodes or generates the dataset and splits it.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<SplitDataset> {
    let d = &cfg.data;
    let [train, val, test] = d.split;
    let (data, labels) = match d.kind {
        DataKind::Synthetic => {
            let per_class = d.per_class.ok_or_else(|| Error::Config("data.per_class is required".into()))?;
            let (_, data) = make_synthetic(per_class, d.image_size, d.seed)?;
            let labels = data.instances().iter().map(|i| i.label).collect::<Vec<_>>();
            (data, labels)
        }
        DataKind::Manifest => {
            let path = d.manifest.as_ref().ok_or_else(|| Error::Config("data.manifest is required".into()))?;
            let m = DatasetManifest::read(path)?;
            let labels = m.labels(d.grade_threshold)?;
            (m.load(d.image_size, d.grade_threshold)?, labels)
        }
    };
    let splits = split_stratified(&labels, (train, val, test), d.seed)?;
    let out = SplitDataset { data, splits };
    out.check(cfg.model.prototypes.num_classes)?;
    Ok(out)
}

/// The configuration a run of `kind` actually executes.
pub fn effective_config(cfg: &ExperimentConfig, kind: RunKind) -> ExperimentConfig {
    let mut out = cfg.clone();
    if kind == RunKind::ProtoalRandom {
        out.dal.strategy = StrategyKind::Random;
    }
    out
}

pub fn run_id(cfg: &ExperimentConfig, kind: RunKind) -> String {
    let eff = effective_config(cfg, kind);
    match kind {
        RunKind::Dal => eff.run_id(),
        _ => format!("{}-{kind}-{}", eff.experiment.name, &eff.hash()[..8]),
    }
}

/// Everything read back from a finished run directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Artifact {
    pub dir: PathBuf,
    pub meta: RunMeta,
    pub config: ExperimentConfig,
    pub records: Vec<IterationRecord>,
    pub final_metrics: Option<FinalMetrics>,
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

impl Artifact {
    pub fn open(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("run.json");
        let meta: RunMeta = serde_json::from_slice(&std::fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?)?;
        let cfg_path = dir.join("config.toml");
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config = ExperimentConfig::from_toml(&text)?;
        if config.hash() != meta.config_hash {
            return Err(Error::invalid(format!(
                "{}: config.toml hashes to {}, run.json says {}",
                dir.display(),
                config.hash(),
                meta.config_hash
            )));
        }
        let rec_path = dir.join("records.jsonl");
        let records = if rec_path.exists() { read_jsonl(&rec_path)? } else { Vec::new() };
        let fm_path = dir.join("final_metrics.json");
        let final_metrics = if fm_path.exists() {
            Some(serde_json::from_slice(&std::fs::read(&fm_path).map_err(|e| Error::io(&fm_path, e))?)?)
        } else {
            None
        };
        Ok(Artifact {
            dir: dir.to_path_buf(),
            meta,
            config,
            records,
            final_metrics,
        })
    }

    /// SHA-256 of `metrics.jsonl`.
    pub fn metrics_hash(&self) -> Result<String> {
        sha256_file(&self.dir.join("metrics.jsonl"))
    }

    pub fn records_hash(&self) -> Result<String> {
        sha256_file(&self.dir.join("records.jsonl"))
    }
}

/// Creates an empty run directory, writing `config.toml` and `run.json`.
pub fn prepare_run_dir(dir: &Path, cfg: &ExperimentConfig, kind: RunKind, overwrite: bool) -> Result<RunMeta> {
    let eff = effective_config(cfg, kind);
    eff.validate()?;
    if dir.exists() {
        let nonempty = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if nonempty && !overwrite {
            return Err(Error::invalid(format!(
                "{} already exists; pass --overwrite to replace it",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = RunMeta {
        run_id: run_id(cfg, kind),
        kind,
        config_hash: eff.hash(),
        seed: eff.experiment.seed,
    };
    let cfg_path = dir.join("config.toml");
    std::fs::write(&cfg_path, eff.to_toml()?).map_err(|e| Error::io(&cfg_path, e))?;
    write_json(&dir.join("run.json"), &meta)?;
    Ok(meta)
}

/// Appends each record to `records.jsonl` as it arrives, then forwards to
/// an inner observer.
struct RecordWriter<'a> {
    path: PathBuf,
    inner: &'a mut dyn LoopObserver,
}

impl LoopObserver for RecordWriter<'_> {
    fn before_iteration(&mut self, iteration: usize) -> Result<()> {
        self.inner.before_iteration(iteration)
    }

    fn phase(&mut self, iteration: usize, phase: Phase) {
        self.inner.phase(iteration, phase)
    }

    fn ranking(&mut self, iteration: usize, ranking: &QueryRanking) {
        self.inner.ranking(iteration, ranking)
    }

    fn queries(&mut self, iteration: usize, ids: &[usize], explanations: &[Explanation]) {
        self.inner.queries(iteration, ids, explanations)
    }

    fn record(&mut self, record: &IterationRecord) -> Result<()> {
        append_record(&self.path, record)?;
        self.inner.record(record)
    }
}

fn append_record(path: &Path, record: &IterationRecord) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_string(record)?;
    line.push('\n');
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Trains a plain classifier on the source task and returns its
/// checkpoint. Depends only on the pretrain section and the backbone shape,
/// so every seed of an experiment starts from the same trunk.
pub fn pretrain_backbone(cfg: &ExperimentConfig) -> Result<Option<Checkpoint>> {
    let Some(p) = &cfg.pretrain else {
        return Ok(None);
    };
    let source = make_source_synthetic(p.per_class, cfg.data.image_size, p.seed)?;
    let mut rng = RngStream::new(p.seed, StreamPurpose::WeightInit).substream(1);
    let mut model = BaselineModel::new(cfg.model.backbone.clone(), 2, &mut rng)?;
    let mut tc = cfg.train.clone();
    tc.lr.backbone = p.lr;
    tc.lr.head = p.lr;
    tc.lr_decay = 1.0;
    let mut trainer = Trainer::new(tc, cfg.loss, p.seed)?;
    let refs: Vec<&Instance> = source.instances().iter().collect();
    trainer.fit_baseline(&mut model, &refs, p.epochs)?;
    Ok(Some(model.to_checkpoint("")))
}

fn build_proto(cfg: &ExperimentConfig, pretrained: Option<&Checkpoint>) -> Result<(ProtoModel, Trainer)> {
    let seed = cfg.experiment.seed;
    let mut model = ProtoModel::new(cfg.model.clone(), &mut RngStream::new(seed, StreamPurpose::WeightInit))?;
    if let Some(ck) = pretrained {
        model.import_backbone(ck)?;
    }
    let trainer = Trainer::new(cfg.train.clone(), cfg.loss, seed)?;
    Ok((model, trainer))
}

fn truth(data: &SplitDataset) -> Vec<(usize, usize)> {
    data.splits
        .train
        .iter()
        .map(|&id| (id, data.data.label(id).expect("split ids exist")))
        .collect()
}

/// Runs `kind` into `dir`. The loop kinds use `oracle` when given and a
/// simulated oracle otherwise.
pub fn run_in(
    cfg: &ExperimentConfig,
    kind: RunKind,
    data: &SplitDataset,
    dir: &Path,
    overwrite: bool,
    oracle: Option<&mut dyn Oracle>,
    observer: &mut dyn LoopObserver,
) -> Result<Artifact> {
    let meta = prepare_run_dir(dir, cfg, kind, overwrite)?;
    let eff = effective_config(cfg, kind);
    let pre = pretrain_backbone(&eff)?;
    let pre = pre.as_ref();
    let records = match kind {
        RunKind::Dal | RunKind::ProtoalRandom => run_loop(&eff, &meta, data, dir, pre, oracle, observer)?,
        RunKind::ProtopnetFull => run_full_proto(&eff, &meta, data, dir, pre, observer)?,
        RunKind::Vanilla => run_vanilla(&eff, &meta, data, dir, pre, observer)?,
    };
    let fm = FinalMetrics::from_records(&meta, &records)?;
    write_json(&dir.join("final_metrics.json"), &fm)?;
    Artifact::open(dir)
}

/// Runs `kind` into `<root>/<run id>` with a simulated oracle.
pub fn run(cfg: &ExperimentConfig, kind: RunKind, root: &Path, overwrite: bool) -> Result<Artifact> {
    let data = load_dataset(cfg)?;
    run_in(cfg, kind, &data, &root.join(run_id(cfg, kind)), overwrite, None, &mut ())
}

fn run_loop(
    cfg: &ExperimentConfig,
    meta: &RunMeta,
    data: &SplitDataset,
    dir: &Path,
    pretrained: Option<&Checkpoint>,
    oracle: Option<&mut dyn Oracle>,
    observer: &mut dyn LoopObserver,
) -> Result<Vec<IterationRecord>> {
    let seed = cfg.experiment.seed;
    let (model, trainer) = build_proto(cfg, pretrained)?;
    let mut learner = ProtoLearner::new(model, trainer, data, seed);
    learner.artifact_dir = Some(dir.to_path_buf());
    learner.config_hash = meta.config_hash.clone();
    let mut simulated;
    let oracle: &mut dyn Oracle = match oracle {
        Some(o) => o,
        None => {
            simulated = SimulatedOracle::new(truth(data));
            &mut simulated
        }
    };
    let mut writer = RecordWriter {
        path: dir.join("records.jsonl"),
        inner: observer,
    };
    let out = run_dal(&cfg.dal, seed, &data.splits.train, &mut learner, oracle, &mut writer)?;
    Ok(out.records)
}

/// `full_cycles` training cycles on the whole train split; one record per
/// cycle.
fn run_full_proto(
    cfg: &ExperimentConfig,
    meta: &RunMeta,
    data: &SplitDataset,
    dir: &Path,
    pretrained: Option<&Checkpoint>,
    observer: &mut dyn LoopObserver,
) -> Result<Vec<IterationRecord>> {
    let seed = cfg.experiment.seed;
    let (model, trainer) = build_proto(cfg, pretrained)?;
    let mut learner = ProtoLearner::new(model, trainer, data, seed);
    learner.artifact_dir = Some(dir.to_path_buf());
    learner.config_hash = meta.config_hash.clone();
    let all = truth(data);
    let n = all.len();
    let path = dir.join("records.jsonl");
    let mut records = Vec::new();
    for cycle in 1..=cfg.train.full_cycles {
        observer.before_iteration(cycle)?;
        let start = learner.params_hash();
        observer.phase(cycle, Phase::Training);
        let steps = learner.train(cycle, &all, &all)?;
        observer.phase(cycle, Phase::Evaluating);
        let validation = learner
            .evaluate(crate::dal::EvalSplit::Validation)?
            .ok_or_else(|| Error::invalid("the run needs a validation split"))?;
        let test = learner.evaluate(crate::dal::EvalSplit::Test)?;
        let checkpoint = learner.checkpoint(cycle)?;
        let last = cycle == cfg.train.full_cycles;
        if last && !data.splits.val.is_empty() {
            let ids: Vec<usize> = data.splits.val.iter().copied().take(cfg.dal.query_size).collect();
            learner.explain(cycle, &ids)?;
        }
        let record = IterationRecord {
            iteration: cycle,
            train_size: n,
            cumulative_labeled: n,
            labeled_fraction: 1.0,
            queried_ids: Vec::new(),
            skipped_ids: Vec::new(),
            validation,
            test,
            params_hash_start: start,
            params_hash_end: learner.params_hash(),
            cumulative_steps: steps,
            checkpoint,
            stop: last.then_some(StopReason::Exhausted),
        };
        append_record(&path, &record)?;
        observer.record(&record)?;
        records.push(record);
    }
    observer.phase(cfg.train.full_cycles, Phase::Done);
    Ok(records)
}

fn eval_baseline(model: &BaselineModel, data: &SplitDataset, ids: &[usize], batch: usize) -> Result<Option<EvalMetrics>> {
    if ids.is_empty() {
        return Ok(None);
    }
    let refs = data.data.select(ids)?;
    evaluate(&predictions(&refs, batch, |x| model.predict_proba(x))?).map(Some)
}

/// The plain classifier trained for `baseline_epochs`, evaluated every
/// ten epochs and at the end.
fn run_vanilla(
    cfg: &ExperimentConfig,
    meta: &RunMeta,
    data: &SplitDataset,
    dir: &Path,
    pretrained: Option<&Checkpoint>,
    observer: &mut dyn LoopObserver,
) -> Result<Vec<IterationRecord>> {
    let seed = cfg.experiment.seed;
    let mut model = BaselineModel::new(
        cfg.model.backbone.clone(),
        cfg.model.prototypes.num_classes,
        &mut RngStream::new(seed, StreamPurpose::WeightInit),
    )?;
    if let Some(ck) = pretrained {
        model.import_backbone(ck)?;
    }
    let mut trainer = Trainer::new(cfg.train.clone(), cfg.loss, seed)?;
    let train = data.data.select(&data.splits.train)?;
    let batch = cfg.train.batch_size;
    let path = dir.join("records.jsonl");
    let mut records = Vec::new();
    let total = cfg.train.baseline_epochs.max(1);
    let mut done = 0;
    let mut chunk = 0;
    while done < total {
        chunk += 1;
        observer.before_iteration(chunk)?;
        let epochs = 10.min(total - done);
        let start = model.params_hash();
        observer.phase(chunk, Phase::Training);
        trainer.fit_baseline(&mut model, &train, epochs)?;
        done += epochs;
        let log = trainer.take_log();
        let timings = trainer.take_timings();
        append_rows(&dir.join("metrics.jsonl"), &log)?;
        append_rows(&dir.join("timings.jsonl"), &timings)?;
        observer.phase(chunk, Phase::Evaluating);
        let validation = eval_baseline(&model, data, &data.splits.val, batch)?
            .ok_or_else(|| Error::invalid("the run needs a validation split"))?;
        let test = eval_baseline(&model, data, &data.splits.test, batch)?;
        let rel = format!("checkpoints/iter-{chunk:03}.ckpt");
        let mut ck = model.to_checkpoint(&meta.config_hash);
        ck.streams = trainer.streams();
        ck.save(&dir.join(&rel))?;
        let record = IterationRecord {
            iteration: chunk,
            train_size: train.len(),
            cumulative_labeled: train.len(),
            labeled_fraction: 1.0,
            queried_ids: Vec::new(),
            skipped_ids: Vec::new(),
            validation,
            test,
            params_hash_start: start,
            params_hash_end: model.params_hash(),
            cumulative_steps: trainer.steps,
            checkpoint: Some(rel),
            stop: (done == total).then_some(StopReason::Exhausted),
        };
        append_record(&path, &record)?;
        observer.record(&record)?;
        records.push(record);
    }
    observer.phase(chunk, Phase::Done);
    Ok(records)
}

fn append_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut buf = String::new();
    for r in rows {
        buf.push_str(&serde_json::to_string(r)?);
        buf.push('\n');
    }
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Evaluates a run's best checkpoint on its test split (or on `ids`).
pub fn eval_artifact(artifact: &Artifact, ids: Option<&[usize]>) -> Result<EvalMetrics> {
    let fm = artifact
        .final_metrics
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("{} has no final_metrics.json", artifact.dir.display())))?;
    let record = artifact
        .records
        .iter()
        .find(|r| r.iteration == fm.best_iteration)
        .ok_or_else(|| Error::invalid("best iteration missing from records"))?;
    let rel = record
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::invalid("best iteration has no checkpoint"))?;
    let ck = Checkpoint::load(&artifact.dir.join(rel))?;
    let cfg = &artifact.config;
    let data = load_dataset(cfg)?;
    let ids = ids.unwrap_or(&data.splits.test);
    if ids.is_empty() {
        return Err(Error::invalid("nothing to evaluate: the test split is empty"));
    }
    let refs: Vec<&Instance> = data.data.select(ids)?;
    let batch = cfg.train.batch_size;
    let mut rng = RngStream::new(cfg.experiment.seed, StreamPurpose::WeightInit);
    let preds = if artifact.meta.kind == RunKind::Vanilla {
        let mut m = BaselineModel::new(cfg.model.backbone.clone(), cfg.model.prototypes.num_classes, &mut rng)?;
        m.load_checkpoint(&ck)?;
        predictions(&refs, batch, |x| m.predict_proba(x))?
    } else {
        let mut m = ProtoModel::new(cfg.model.clone(), &mut rng)?;
        m.load_checkpoint(&ck)?;
        predictions(&refs, batch, |x| m.predict_proba(x))?
    };
    evaluate(&preds)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub original_metrics_hash: String,
    pub replay_metrics_hash: String,
    pub original_records_hash: String,
    pub replay_records_hash: String,
}

impl ReplayReport {
    pub fn identical(&self) -> bool {
        self.original_metrics_hash == self.replay_metrics_hash && self.original_records_hash == self.replay_records_hash
    }
}

/// Re-runs an artifact from its embedded config into `scratch` and compares
/// the metrics log and the iteration records.
pub fn replay(artifact: &Artifact, scratch: &Path) -> Result<ReplayReport> {
    let kind = artifact.meta.kind;
    let cfg = &artifact.config;
    let data = load_dataset(cfg)?;
    let again = run_in(cfg, kind, &data, scratch, true, None, &mut ())?;
    Ok(ReplayReport {
        original_metrics_hash: artifact.metrics_hash()?,
        replay_metrics_hash: again.metrics_hash()?,
        original_records_hash: artifact.records_hash()?,
        replay_records_hash: again.records_hash()?,
    })
}

/// Labels spent before validation AUPRC first reached `target`.
pub fn labels_to_target(records: &[IterationRecord], target: f64) -> Option<usize> {
    records
        .iter()
        .find(|r| r.validation.auprc >= target)
        .map(|r| r.cumulative_labeled)
}

/// `(cumulative steps, validation AUPRC)` series as CSV rows with a header.
pub fn export_curves(artifacts: &[Artifact]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "run_id",
        "kind",
        "iteration",
        "cumulative_steps",
        "cumulative_labeled",
        "labeled_fraction",
        "val_auprc",
    ])?;
    for a in artifacts {
        if a.records.is_empty() {
            return Err(Error::invalid(format!("{} has no iteration records", a.dir.display())));
        }
        for r in &a.records {
            w.write_record([
                a.meta.run_id.clone(),
                a.meta.kind.to_string(),
                r.iteration.to_string(),
                r.cumulative_steps.to_string(),
                r.cumulative_labeled.to_string(),
                r.labeled_fraction.to_string(),
                r.validation.auprc.to_string(),
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Axes of a grid search. Omitted axes keep the base config's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxes {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<Vec<u64>>,
    /// `T`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc_passes: Option<Vec<usize>>,
    /// `n`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_size: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<Vec<usize>>,
    /// `e`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_epochs: Option<Vec<usize>>,
}

impl GridAxes {
    /// The grid searched in the original study.
    pub fn reference() -> Self {
        GridAxes {
            seed: Some(vec![0, 1, 2, 5, 10, 12, 42, 123, 1234, 12345]),
            mc_passes: Some(vec![10, 30, 50]),
            query_size: Some(vec![10, 20, 30]),
            batch_size: Some(vec![32, 64]),
            joint_epochs: Some(vec![5, 10, 20]),
        }
    }
}

/// A grid file: the base config (relative to the grid file) and its axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub name: String,
    pub base: PathBuf,
    #[serde(default)]
    pub axes: GridAxes,
}

impl GridSpec {
    pub fn load(path: &Path) -> Result<(Self, ExperimentConfig)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: GridSpec = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base_path = if spec.base.is_relative() {
            path.parent().unwrap_or(Path::new(".")).join(&spec.base)
        } else {
            spec.base.clone()
        };
        let base = ExperimentConfig::load(&base_path)?;
        Ok((spec, base))
    }
}

fn axis<T: Copy + Ord + fmt::Debug>(name: &str, values: &Option<Vec<T>>, base: T) -> Result<Vec<T>> {
    let Some(v) = values else {
        return Ok(vec![base]);
    };
    if v.is_empty() {
        return Err(Error::Config(format!("grid axis {name} is empty")));
    }
    let mut seen = BTreeSet::new();
    for x in v {
        if !seen.insert(*x) {
            return Err(Error::Config(format!("grid axis {name} repeats the value {x:?}")));
        }
    }
    Ok(v.clone())
}

/// Cartesian product of the axes applied to `base`, seeds outermost.
/// Every configuration is validated.
pub fn enumerate_grid(base: &ExperimentConfig, axes: &GridAxes) -> Result<Vec<ExperimentConfig>> {
    let seeds = axis("seed", &axes.seed, base.experiment.seed)?;
    let passes = axis("mc_passes", &axes.mc_passes, base.dal.mc_passes)?;
    let queries = axis("query_size", &axes.query_size, base.dal.query_size)?;
    let batches = axis("batch_size", &axes.batch_size, base.train.batch_size)?;
    let epochs = axis("joint_epochs", &axes.joint_epochs, base.train.joint_epochs)?;
    let mut out = Vec::with_capacity(seeds.len() * passes.len() * queries.len() * batches.len() * epochs.len());
    for &s in &seeds {
        for &t in &passes {
            for &n in &queries {
                for &b in &batches {
                    for &e in &epochs {
                        let mut c = base.clone();
                        c.experiment.seed = s;
                        c.dal.mc_passes = t;
                        c.dal.query_size = n;
                        c.train.batch_size = b;
                        c.train.joint_epochs = e;
                        c.validate()?;
                        out.push(c);
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run_id: String,
    pub seed: u64,
    pub mc_passes: usize,
    pub query_size: usize,
    pub batch_size: usize,
    pub joint_epochs: usize,
    pub best_iteration: usize,
    pub labeled: usize,
    pub val_auprc: f64,
    pub test_auprc: Option<f64>,
    pub test_f1: Option<f64>,
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    /// Sorted by run id.
    pub rows: Vec<SummaryRow>,
    /// Index of the row with the highest validation AUPRC.
    pub best: Option<usize>,
}

impl GridSummary {
    /// Builds the table from finished run directories alone.
    pub fn from_artifacts(artifacts: &[Artifact]) -> Result<Self> {
        let mut rows = Vec::with_capacity(artifacts.len());
        for a in artifacts {
            let fm = a
                .final_metrics
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("{} is unfinished", a.dir.display())))?;
            let c = &a.config;
            rows.push(SummaryRow {
                run_id: a.meta.run_id.clone(),
                seed: c.experiment.seed,
                mc_passes: c.dal.mc_passes,
                query_size: c.dal.query_size,
                batch_size: c.train.batch_size,
                joint_epochs: c.train.joint_epochs,
                best_iteration: fm.best_iteration,
                labeled: fm.labeled,
                val_auprc: fm.validation.auprc,
                test_auprc: fm.test.as_ref().map(|t| t.auprc),
                test_f1: fm.test.as_ref().map(|t| t.f1),
                test_accuracy: fm.test.as_ref().map(|t| t.accuracy),
            });
        }
        rows.sort_by(|a, b| a.run_id.cmp(&b.run_id));
        let best = (0..rows.len()).fold(None::<usize>, |b, i| match b {
            Some(b) if rows[b].val_auprc >= rows[i].val_auprc => Some(b),
            _ => Some(i),
        });
        Ok(GridSummary { rows, best })
    }

    /// Reads every run under `<grid dir>/runs`.
    pub fn from_dir(grid_dir: &Path) -> Result<Self> {
        let runs = grid_dir.join("runs");
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(&runs)
            .map_err(|e| Error::io(&runs, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("final_metrics.json").exists())
            .collect();
        dirs.sort();
        let artifacts = dirs.iter().map(|d| Artifact::open(d)).collect::<Result<Vec<_>>>()?;
        Self::from_artifacts(&artifacts)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Writes each grid configuration to `<grid dir>/configs/<run id>.toml` and
/// returns `(run id, config path)` pairs in enumeration order.
pub fn materialize_grid(grid_dir: &Path, configs: &[ExperimentConfig]) -> Result<Vec<(String, PathBuf)>> {
    let dir = grid_dir.join("configs");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut out = Vec::with_capacity(configs.len());
    let mut seen = BTreeSet::new();
    for c in configs {
        let id = c.run_id();
        if !seen.insert(id.clone()) {
            return Err(Error::Config(format!("grid produced duplicate run {id}")));
        }
        let path = dir.join(format!("{id}.toml"));
        std::fs::write(&path, c.to_toml()?).map_err(|e| Error::io(&path, e))?;
        out.push((id, path));
    }
    Ok(out)
}
