//! Query strategies: rank the unlabeled pool, most informative first.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::Instance;
use crate::error::{Error, Result};
use crate::model::{PassOptions, ProtoModel};
use crate::tensor::rng::RngStream;
use crate::tensor::{softmax_rows, DropoutMode, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    McDropout,
    Random,
    Embedding,
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StrategyKind::McDropout => "mc_dropout",
            StrategyKind::Random => "random",
            StrategyKind::Embedding => "embedding",
        })
    }
}

/// How the T Monte-Carlo softmax outputs are reduced to one score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Uncertainty {
    /// Entropy of the mean distribution.
    #[default]
    Entropy,
    /// Variance across passes of each pass's largest probability.
    VarianceOfMax,
    /// `1 − max` of the mean distribution.
    LeastConfidence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRanking {
    pub strategy: StrategyKind,
    /// `(instance id, score)`, score descending, ties by ascending id.
    pub entries: Vec<(usize, f64)>,
    pub passes: Option<usize>,
    /// Counter of the consuming rng stream after scoring.
    pub rng_counter: Option<u128>,
}

impl QueryRanking {
    pub fn new(strategy: StrategyKind, mut entries: Vec<(usize, f64)>) -> Self {
        entries.sort_by(|a, b| match b.1.total_cmp(&a.1) {
            Ordering::Equal => a.0.cmp(&b.0),
            o => o,
        });
        QueryRanking {
            strategy,
            entries,
            passes: None,
            rng_counter: None,
        }
    }

    pub fn ids(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.0).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// The first `min(n, len)` ids.
pub fn select_top(ranking: &QueryRanking, n: usize) -> Vec<usize> {
    ranking.entries.iter().take(n).map(|e| e.0).collect()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Per-instance MC statistics: running mean of the softmax outputs plus the
/// per-pass maxima.
#[derive(Clone, Debug, PartialEq)]
pub struct McSummary {
    pub mean: Vec<f64>,
    pub pass_max: Vec<f64>,
}

impl McSummary {
    pub fn score(&self, stat: Uncertainty) -> f64 {
        match stat {
            Uncertainty::Entropy => entropy(&self.mean),
            Uncertainty::LeastConfidence => 1.0 - self.mean.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Uncertainty::VarianceOfMax => {
                let t = self.pass_max.len() as f64;
                let mu = self.pass_max.iter().sum::<f64>() / t;
                self.pass_max.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / t
            }
        }
    }
}

/// Reduces T softmax rows per instance. The mean is accumulated as
/// `m += (x − m)/k`, so identical passes reproduce the single pass exactly.
pub fn summarize(passes: &[Vec<f64>]) -> McSummary {
    let mut mean = vec![0.0; passes.first().map_or(0, Vec::len)];
    for (k, p) in passes.iter().enumerate() {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += (x - *m) / (k + 1) as f64;
        }
    }
    McSummary {
        mean,
        pass_max: passes
            .iter()
            .map(|p| p.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect(),
    }
}

fn stack(batch: &[&Instance]) -> Result<Tensor> {
    Tensor::stack(&batch.iter().map(|i| &i.image).collect::<Vec<_>>())
}

/// T stochastic forward passes per instance with dropout active and every
/// parameter fixed. Returns one summary per instance, in input order.
pub fn mc_summaries(
    model: &ProtoModel,
    pool: &[&Instance],
    passes: usize,
    batch_size: usize,
    rng: &mut RngStream,
) -> Result<Vec<McSummary>> {
    if passes < 1 {
        return Err(Error::invalid("mc.passes (T) must be >= 1"));
    }
    if model.config.backbone.dropout_sites.is_empty() {
        return Err(Error::Config(
            "mc_dropout needs at least one entry in model.backbone.dropout_sites".into(),
        ));
    }
    let mut out = Vec::with_capacity(pool.len());
    for chunk in pool.chunks(batch_size.max(1)) {
        let x = stack(chunk)?;
        let mut per_pass: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(passes); chunk.len()];
        for _ in 0..passes {
            let mut opts = PassOptions::stochastic(DropoutMode::McActive, rng);
            let pass = model.forward(&x, None, &mut opts)?;
            let probs = softmax_rows(pass.graph.value(pass.logits));
            let c = probs.shape()[1];
            for (b, row) in probs.data().chunks(c).enumerate() {
                per_pass[b].push(row.to_vec());
            }
        }
        out.extend(per_pass.iter().map(|p| summarize(p)));
    }
    Ok(out)
}

pub fn mc_dropout_scores(
    model: &ProtoModel,
    pool: &[&Instance],
    passes: usize,
    stat: Uncertainty,
    batch_size: usize,
    rng: &mut RngStream,
) -> Result<QueryRanking> {
    let summaries = mc_summaries(model, pool, passes, batch_size, rng)?;
    let entries = pool.iter().zip(&summaries).map(|(i, s)| (i.id, s.score(stat))).collect();
    let mut r = QueryRanking::new(StrategyKind::McDropout, entries);
    r.passes = Some(passes);
    r.rng_counter = Some(rng.counter());
    Ok(r)
}

/// I.i.d. uniform scores drawn in ascending-id order.
pub fn random_scores(ids: &[usize], rng: &mut RngStream) -> QueryRanking {
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    let entries = sorted.into_iter().map(|id| (id, rng.next_f64())).collect();
    let mut r = QueryRanking::new(StrategyKind::Random, entries);
    r.rng_counter = Some(rng.counter());
    r
}

/// Global-average-pooled latent vectors, one per instance.
pub fn pooled_latents(model: &ProtoModel, data: &[&Instance], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch_size.max(1)) {
        let z = model.features(&stack(chunk)?)?;
        let (d, hw) = (z.shape()[1], z.shape()[2] * z.shape()[3]);
        for b in 0..chunk.len() {
            let img = &z.data()[b * d * hw..(b + 1) * d * hw];
            out.push(img.chunks(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect());
        }
    }
    Ok(out)
}

/// Mean Euclidean distance from each unlabeled vector to every labeled one.
pub fn distance_scores(unlabeled: &[(usize, Vec<f64>)], labeled: &[Vec<f64>]) -> Result<QueryRanking> {
    if labeled.is_empty() {
        return Err(Error::invalid("embedding strategy needs a nonempty labeled set"));
    }
    let entries = unlabeled
        .iter()
        .map(|(id, u)| {
            let total: f64 = labeled
                .iter()
                .map(|l| u.iter().zip(l).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                .sum();
            (*id, total / labeled.len() as f64)
        })
        .collect();
    Ok(QueryRanking::new(StrategyKind::Embedding, entries))
}

pub fn embedding_distance_scores(
    model: &ProtoModel,
    pool: &[&Instance],
    labeled: &[&Instance],
    batch_size: usize,
) -> Result<QueryRanking> {
    if labeled.is_empty() {
        return Err(Error::invalid("embedding strategy needs a nonempty labeled set"));
    }
    let u = pooled_latents(model, pool, batch_size)?;
    let l = pooled_latents(model, labeled, batch_size)?;
    let u: Vec<(usize, Vec<f64>)> = pool.iter().map(|i| i.id).zip(u).collect();
    distance_scores(&u, &l)
}
