use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;

use super::{DalConfig, EvalSplit, Learner};
use crate::data::{Instance, SplitDataset};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalMetrics};
use crate::model::ProtoModel;
use crate::proto::{explain, Explanation};
use crate::search::{embedding_distance_scores, mc_dropout_scores, QueryRanking, StrategyKind};
use crate::tensor::rng::{RngStream, StreamPurpose};
use crate::train::{predictions, Trainer};

/// Prototype model plus trainer, bound to one split dataset. When
/// `artifact_dir` is set, training logs are appended to `metrics.jsonl` and
/// `timings.jsonl` and a checkpoint is written per iteration.
pub struct ProtoLearner<'a> {
    pub model: ProtoModel,
    pub trainer: Trainer,
    pub data: &'a SplitDataset,
    pub config_hash: String,
    pub artifact_dir: Option<PathBuf>,
    mc_rng: RngStream,
}

fn append_jsonl<T: serde::Serialize>(path: &std::path::Path, rows: &[T]) -> Result<()> {
    let mut f = OpenOptions::new()
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

impl<'a> ProtoLearner<'a> {
    pub fn new(model: ProtoModel, trainer: Trainer, data: &'a SplitDataset, seed: u64) -> Self {
        ProtoLearner {
            model,
            trainer,
            data,
            config_hash: String::new(),
            artifact_dir: None,
            mc_rng: RngStream::new(seed, StreamPurpose::Dropout).substream(u64::MAX),
        }
    }

    fn relabeled(&self, pairs: &[(usize, usize)]) -> Result<Vec<Instance>> {
        pairs
            .iter()
            .map(|&(id, label)| {
                let inst = self
                    .data
                    .data
                    .get(id)
                    .ok_or_else(|| Error::invalid(format!("unknown instance id {id}")))?;
                Ok(Instance {
                    id,
                    image: inst.image.clone(),
                    label,
                })
            })
            .collect()
    }

    fn flush_logs(&mut self) -> Result<()> {
        let log = self.trainer.take_log();
        let timings = self.trainer.take_timings();
        if let Some(dir) = &self.artifact_dir {
            append_jsonl(&dir.join("metrics.jsonl"), &log)?;
            append_jsonl(&dir.join("timings.jsonl"), &timings)?;
        }
        Ok(())
    }

    pub fn evaluate_ids(&self, ids: &[usize]) -> Result<EvalMetrics> {
        let refs = self.data.data.select(ids)?;
        let preds = predictions(&refs, self.trainer.config.batch_size, |x| self.model.predict_proba(x))?;
        evaluate(&preds)
    }
}

impl Learner for ProtoLearner<'_> {
    fn train(&mut self, iteration: usize, train: &[(usize, usize)], labeled: &[(usize, usize)]) -> Result<usize> {
        let train = self.relabeled(train)?;
        let labeled = self.relabeled(labeled)?;
        let train_refs: Vec<&Instance> = train.iter().collect();
        let labeled_refs: Vec<&Instance> = labeled.iter().collect();
        let result = self
            .trainer
            .run_iteration(&mut self.model, iteration, &train_refs, &labeled_refs);
        self.flush_logs()?;
        Ok(result?.cumulative_steps)
    }

    fn evaluate(&mut self, split: EvalSplit) -> Result<Option<EvalMetrics>> {
        let ids = match split {
            EvalSplit::Validation => &self.data.splits.val,
            EvalSplit::Test => &self.data.splits.test,
        };
        if ids.is_empty() {
            return Ok(None);
        }
        self.evaluate_ids(ids).map(Some)
    }

    fn rank(
        &mut self,
        config: &DalConfig,
        iteration: usize,
        candidates: &[usize],
        labeled: &[usize],
    ) -> Result<QueryRanking> {
        let pool = self.data.data.select(candidates)?;
        let batch = self.trainer.config.batch_size;
        match config.strategy {
            StrategyKind::McDropout => {
                let mut rng = self.mc_rng.substream(iteration as u64);
                mc_dropout_scores(&self.model, &pool, config.mc_passes, config.uncertainty, batch, &mut rng)
            }
            StrategyKind::Embedding => {
                let l = self.data.data.select(labeled)?;
                embedding_distance_scores(&self.model, &pool, &l, batch)
            }
            StrategyKind::Random => Err(Error::invalid("random ranking needs no model")),
        }
    }

    fn params_hash(&self) -> String {
        self.model.params_hash()
    }

    fn explain(&mut self, iteration: usize, ids: &[usize]) -> Result<Vec<Explanation>> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            let inst = self
                .data
                .data
                .get(id)
                .ok_or_else(|| Error::invalid(format!("unknown instance id {id}")))?;
            let e = explain(&self.model, id, &inst.image)?;
            if let Some(dir) = &self.artifact_dir {
                let sub = dir.join(format!("explanations/iter-{iteration:03}"));
                std::fs::create_dir_all(&sub).map_err(|err| Error::io(&sub, err))?;
                let path = sub.join(format!("{id}.json"));
                std::fs::write(&path, serde_json::to_vec_pretty(&e)?).map_err(|err| Error::io(&path, err))?;
            }
            out.push(e);
        }
        Ok(out)
    }

    fn checkpoint(&mut self, iteration: usize) -> Result<Option<String>> {
        let Some(dir) = &self.artifact_dir else {
            return Ok(None);
        };
        let rel = format!("checkpoints/iter-{iteration:03}.ckpt");
        let mut ck = self.model.to_checkpoint(&self.config_hash);
        ck.streams = self.trainer.streams();
        ck.save(&dir.join(&rel))?;
        Ok(Some(rel))
    }
}
