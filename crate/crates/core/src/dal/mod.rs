//! The online active-learning loop: pool bookkeeping, training-set
//! construction, querying and stop rules.

mod learner;
mod oracle;
mod pool;

pub use learner::ProtoLearner;
pub use oracle::{Answer, Oracle, SimulatedOracle};
pub use pool::{cumulative_labeled, partition_count, total_iterations, DatasetPool, LabeledEntry};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::EvalMetrics;
use crate::proto::Explanation;
use crate::search::{random_scores, select_top, QueryRanking, StrategyKind, Uncertainty};
use crate::tensor::rng::{RngStream, StreamPurpose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DalConfig {
    #[serde(default = "default_init")]
    pub init_size: usize,
    /// `n`: instances queried per iteration.
    #[serde(default = "default_query")]
    pub query_size: usize,
    /// `p`: fraction of previously labeled ids re-used each iteration.
    #[serde(default = "default_partition")]
    pub partition: f64,
    #[serde(default = "default_strategy")]
    pub strategy: StrategyKind,
    /// `T`: stochastic passes per instance for MC dropout.
    #[serde(default = "default_passes")]
    pub mc_passes: usize,
    #[serde(default)]
    pub uncertainty: Uncertainty,
    /// Stop once this many instances are labeled.
    #[serde(default)]
    pub budget: Option<usize>,
    /// Stop once validation AUPRC reaches this value.
    #[serde(default)]
    pub target_auprc: Option<f64>,
}

fn default_init() -> usize {
    100
}
fn default_query() -> usize {
    30
}
fn default_partition() -> f64 {
    0.875
}
fn default_strategy() -> StrategyKind {
    StrategyKind::McDropout
}
fn default_passes() -> usize {
    10
}

impl Default for DalConfig {
    fn default() -> Self {
        DalConfig {
            init_size: default_init(),
            query_size: default_query(),
            partition: default_partition(),
            strategy: default_strategy(),
            mc_passes: default_passes(),
            uncertainty: Uncertainty::default(),
            budget: None,
            target_auprc: None,
        }
    }
}

impl DalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.init_size == 0 {
            return Err(Error::Config("dal.init_size must be >= 1".into()));
        }
        if self.query_size == 0 {
            return Err(Error::Config("dal.query_size must be >= 1".into()));
        }
        if !(self.partition > 0.0 && self.partition <= 1.0) {
            return Err(Error::Config(format!("dal.partition must lie in (0, 1], got {}", self.partition)));
        }
        if self.strategy == StrategyKind::McDropout && self.mc_passes == 0 {
            return Err(Error::Config("dal.mc_passes must be >= 1".into()));
        }
        if self.budget.is_some_and(|b| b < self.init_size) {
            return Err(Error::Config("dal.budget is smaller than dal.init_size".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Initializing,
    Training,
    Evaluating,
    Scoring,
    AwaitingLabels,
    Paused,
    Done,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Exhausted,
    Budget,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// `|L|` for this iteration.
    pub train_size: usize,
    /// Labeled instances when this iteration trained.
    pub cumulative_labeled: usize,
    pub labeled_fraction: f64,
    /// Ids sent to the oracle after this iteration's evaluation.
    pub queried_ids: Vec<usize>,
    pub skipped_ids: Vec<usize>,
    pub validation: EvalMetrics,
    pub test: Option<EvalMetrics>,
    pub params_hash_start: String,
    pub params_hash_end: String,
    /// Optimizer steps (plus pushes) since the run began.
    pub cumulative_steps: usize,
    pub checkpoint: Option<String>,
    pub stop: Option<StopReason>,
}

/// The trainable model as seen by the loop.
pub trait Learner {
    /// Runs one iteration's schedule. `train` is `L`, `labeled` the whole
    /// history (push candidates). Returns cumulative optimizer steps.
    fn train(&mut self, iteration: usize, train: &[(usize, usize)], labeled: &[(usize, usize)]) -> Result<usize>;

    fn evaluate(&mut self, split: EvalSplit) -> Result<Option<EvalMetrics>>;

    /// Model-based rankings (MC dropout, embedding distance).
    fn rank(
        &mut self,
        config: &DalConfig,
        iteration: usize,
        candidates: &[usize],
        labeled: &[usize],
    ) -> Result<QueryRanking>;

    fn params_hash(&self) -> String;

    /// Evidence for instances about to be sent to the oracle.
    fn explain(&mut self, _iteration: usize, _ids: &[usize]) -> Result<Vec<Explanation>> {
        Ok(Vec::new())
    }

    fn checkpoint(&mut self, _iteration: usize) -> Result<Option<String>> {
        Ok(None)
    }
}

/// Hooks for progress reporting and external control.
pub trait LoopObserver {
    /// Called before each iteration; may block (e.g. while paused).
    fn before_iteration(&mut self, _iteration: usize) -> Result<()> {
        Ok(())
    }

    fn phase(&mut self, _iteration: usize, _phase: Phase) {}

    fn ranking(&mut self, _iteration: usize, _ranking: &QueryRanking) {}

    /// The ids about to be queried with whatever evidence the learner gave.
    fn queries(&mut self, _iteration: usize, _ids: &[usize], _explanations: &[Explanation]) {}

    fn record(&mut self, _record: &IterationRecord) -> Result<()> {
        Ok(())
    }
}

impl LoopObserver for () {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DalOutcome {
    pub records: Vec<IterationRecord>,
    pub pool: DatasetPool,
}

fn ask(
    oracle: &mut dyn Oracle,
    pool: &mut DatasetPool,
    iteration: usize,
    ids: &[usize],
) -> Result<(Vec<usize>, Vec<usize>)> {
    let answers = oracle.query(iteration, ids)?;
    if answers.len() != ids.len() {
        return Err(Error::Oracle(format!(
            "oracle answered {} of {} queries",
            answers.len(),
            ids.len()
        )));
    }
    let mut labels = Vec::new();
    let mut skipped = Vec::new();
    for (&id, a) in ids.iter().zip(&answers) {
        match a {
            Answer::Label(y) => labels.push((id, *y)),
            Answer::Skipped => skipped.push(id),
        }
    }
    pool.record_labels(&labels, iteration)?;
    for &id in &skipped {
        pool.skip(id)?;
    }
    Ok((labels.into_iter().map(|l| l.0).collect(), skipped))
}

/// Runs the loop until U is exhausted or a configured stop rule fires.
pub fn run_dal(
    config: &DalConfig,
    seed: u64,
    train_ids: &[usize],
    learner: &mut dyn Learner,
    oracle: &mut dyn Oracle,
    observer: &mut dyn LoopObserver,
) -> Result<DalOutcome> {
    config.validate()?;
    let mut pool = DatasetPool::new(train_ids)?;
    let base = RngStream::new(seed, StreamPurpose::PoolSampling);
    let mut partition_rng = base.substream(1);
    let mut random_rng = base.substream(2);

    observer.phase(0, Phase::Initializing);
    let init = pool.draw_initial(config.init_size, &mut base.substream(0))?;
    observer.phase(0, Phase::AwaitingLabels);
    let (mut new_ids, _) = ask(oracle, &mut pool, 1, &init)?;

    let mut records = Vec::new();
    let mut iteration = 1;
    loop {
        observer.before_iteration(iteration)?;
        let set = pool.next_training_set(&new_ids, config.partition, &mut partition_rng)?;
        let train: Vec<(usize, usize)> = set
            .iter()
            .map(|&id| (id, pool.label_of(id).expect("training ids are labeled")))
            .collect();
        let cumulative = pool.history().len();
        let labeled_fraction = pool.labeled_fraction();

        let params_hash_start = learner.params_hash();
        observer.phase(iteration, Phase::Training);
        let steps = learner.train(iteration, &train, &pool.labeled_pairs())?;
        observer.phase(iteration, Phase::Evaluating);
        let validation = learner
            .evaluate(EvalSplit::Validation)?
            .ok_or_else(|| Error::invalid("the loop needs a validation split"))?;
        let test = learner.evaluate(EvalSplit::Test)?;
        let params_hash_end = learner.params_hash();
        let checkpoint = learner.checkpoint(iteration)?;

        let candidates = pool.candidates();
        let stop = if config.target_auprc.is_some_and(|t| validation.auprc >= t) {
            Some(StopReason::Target)
        } else if candidates.is_empty() {
            Some(StopReason::Exhausted)
        } else if config.budget.is_some_and(|b| cumulative >= b) {
            Some(StopReason::Budget)
        } else {
            None
        };

        let (mut queried_ids, mut skipped_ids) = (Vec::new(), Vec::new());
        new_ids = Vec::new();
        if stop.is_none() {
            let want = config
                .budget
                .map_or(config.query_size, |b| config.query_size.min(b - cumulative));
            observer.phase(iteration, Phase::Scoring);
            let ranking = match config.strategy {
                StrategyKind::Random => random_scores(&candidates, &mut random_rng),
                _ => learner.rank(config, iteration, &candidates, &pool.labeled_ids())?,
            };
            observer.ranking(iteration, &ranking);
            queried_ids = select_top(&ranking, want);
            let evidence = learner.explain(iteration, &queried_ids)?;
            observer.queries(iteration, &queried_ids, &evidence);
            observer.phase(iteration, Phase::AwaitingLabels);
            let (labeled, skipped) = ask(oracle, &mut pool, iteration + 1, &queried_ids)?;
            new_ids = labeled;
            skipped_ids = skipped;
        }

        let record = IterationRecord {
            iteration,
            train_size: set.len(),
            cumulative_labeled: cumulative,
            labeled_fraction,
            queried_ids,
            skipped_ids,
            validation,
            test,
            params_hash_start,
            params_hash_end,
            cumulative_steps: steps,
            checkpoint,
            stop,
        };
        observer.record(&record)?;
        records.push(record);
        if stop.is_some() {
            break;
        }
        iteration += 1;
    }
    observer.phase(iteration, Phase::Done);
    Ok(DalOutcome { records, pool })
}

#[cfg(test)]
mod tests;
