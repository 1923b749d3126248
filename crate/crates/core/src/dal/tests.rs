use super::*;
use crate::data::{make_synthetic, split_stratified, SplitDataset};
use crate::metrics::Confusion;
use crate::model::{ModelConfig, ProtoModel};
use crate::proto::LossWeights;
use crate::train::{TrainConfig, Trainer};
use std::collections::HashSet;

/// Learner whose "parameters" are a counter and whose validation AUPRC
/// climbs by 0.1 per iteration.
struct Stub {
    version: usize,
    trained_on: Vec<Vec<(usize, usize)>>,
}

impl Stub {
    fn new() -> Self {
        Stub {
            version: 0,
            trained_on: Vec::new(),
        }
    }
}

fn metrics(auprc: f64) -> EvalMetrics {
    EvalMetrics {
        auprc,
        f1: 0.0,
        precision: 0.0,
        recall: 0.0,
        accuracy: 0.0,
        confusion: Confusion::default(),
    }
}

impl Learner for Stub {
    fn train(&mut self, _iteration: usize, train: &[(usize, usize)], _labeled: &[(usize, usize)]) -> Result<usize> {
        self.version += 1;
        self.trained_on.push(train.to_vec());
        Ok(self.version * 3)
    }

    fn evaluate(&mut self, split: EvalSplit) -> Result<Option<EvalMetrics>> {
        Ok(match split {
            EvalSplit::Validation => Some(metrics((0.4 + 0.1 * self.version as f64).min(1.0))),
            EvalSplit::Test => None,
        })
    }

    fn rank(&mut self, _: &DalConfig, _: usize, candidates: &[usize], _: &[usize]) -> Result<QueryRanking> {
        // prefer high ids
        Ok(QueryRanking::new(
            StrategyKind::McDropout,
            candidates.iter().map(|&i| (i, i as f64)).collect(),
        ))
    }

    fn params_hash(&self) -> String {
        format!("v{}", self.version)
    }
}

fn truth(n: usize) -> SimulatedOracle {
    SimulatedOracle::new((0..n).map(|i| (i, i % 2)))
}

fn config(init: usize, n: usize) -> DalConfig {
    DalConfig {
        init_size: init,
        query_size: n,
        ..Default::default()
    }
}

#[test]
fn toy_geometry_runs_four_iterations() {
    let ids: Vec<usize> = (0..40).collect();
    let mut oracle = truth(40);
    let out = run_dal(&config(10, 10), 0, &ids, &mut Stub::new(), &mut oracle, &mut ()).unwrap();
    let cum: Vec<usize> = out.records.iter().map(|r| r.cumulative_labeled).collect();
    assert_eq!(cum, vec![10, 20, 30, 40]);
    assert_eq!(out.records.last().unwrap().stop, Some(StopReason::Exhausted));
    assert_eq!(oracle.calls(), 40);
    assert!(out.pool.unlabeled().is_empty());
    out.pool.check_invariants().unwrap();
    for w in out.records.windows(2) {
        assert_eq!(w[0].params_hash_end, w[1].params_hash_start);
        assert!(w[1].cumulative_labeled > w[0].cumulative_labeled);
        assert_eq!(w[1].cumulative_labeled, w[0].cumulative_labeled + w[0].queried_ids.len());
    }
}

#[test]
fn paper_geometry_with_stub_learner() {
    let ids: Vec<usize> = (0..759).collect();
    let mut oracle = truth(759);
    let out = run_dal(&config(100, 30), 3, &ids, &mut Stub::new(), &mut oracle, &mut ()).unwrap();
    assert_eq!(out.records.len(), total_iterations(759, 100, 30).unwrap());
    assert_eq!(out.records.len(), 23);
    let r17 = &out.records[16];
    assert_eq!(r17.cumulative_labeled, 580);
    assert!((r17.labeled_fraction - 580.0 / 759.0).abs() < 1e-15);
    assert_eq!(out.records[22].queried_ids.len(), 0);
    assert_eq!(out.records[21].queried_ids.len(), 29);
    assert_eq!(oracle.calls(), 759);
}

#[test]
fn training_sets_follow_the_partition_rule() {
    let ids: Vec<usize> = (0..200).collect();
    let mut stub = Stub::new();
    run_dal(&config(100, 30), 1, &ids, &mut stub, &mut truth(200), &mut ()).unwrap();
    assert_eq!(stub.trained_on[0].len(), 100);
    assert_eq!(stub.trained_on[1].len(), 30 + 87);
    assert_eq!(stub.trained_on[2].len(), 30 + partition_count(0.875, 130));
    for set in &stub.trained_on {
        assert!(set.iter().all(|&(id, y)| y == id % 2));
    }
}

#[test]
fn target_rule_stops_queries() {
    let ids: Vec<usize> = (0..100).collect();
    let mut cfg = config(10, 10);
    cfg.target_auprc = Some(0.7);
    let mut oracle = truth(100);
    let out = run_dal(&cfg, 0, &ids, &mut Stub::new(), &mut oracle, &mut ()).unwrap();
    // version k scores 0.4 + 0.1k, so iteration 3 hits the target
    assert_eq!(out.records.len(), 3);
    assert_eq!(out.records[2].stop, Some(StopReason::Target));
    assert!(out.records[2].queried_ids.is_empty());
    assert_eq!(oracle.calls(), 30);
}

#[test]
fn budget_truncates_the_last_query() {
    let ids: Vec<usize> = (0..40).collect();
    let mut cfg = config(10, 10);
    cfg.budget = Some(25);
    let mut oracle = truth(40);
    let out = run_dal(&cfg, 0, &ids, &mut Stub::new(), &mut oracle, &mut ()).unwrap();
    let cum: Vec<usize> = out.records.iter().map(|r| r.cumulative_labeled).collect();
    assert_eq!(cum, vec![10, 20, 25]);
    assert_eq!(out.records[2].stop, Some(StopReason::Budget));
    assert_eq!(oracle.calls(), 25);
}

#[test]
fn whole_pool_initially_means_one_iteration() {
    let ids: Vec<usize> = (0..12).collect();
    let out = run_dal(&config(12, 5), 0, &ids, &mut Stub::new(), &mut truth(12), &mut ()).unwrap();
    assert_eq!(out.records.len(), 1);
    assert_eq!(out.records[0].stop, Some(StopReason::Exhausted));
}

#[test]
fn random_strategy_replays() {
    let ids: Vec<usize> = (0..60).collect();
    let mut cfg = config(10, 7);
    cfg.strategy = StrategyKind::Random;
    let run = |seed| {
        let out = run_dal(&cfg, seed, &ids, &mut Stub::new(), &mut truth(60), &mut ()).unwrap();
        out.records.into_iter().map(|r| r.queried_ids).collect::<Vec<_>>()
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

struct Skipper {
    inner: SimulatedOracle,
    skip: HashSet<usize>,
}

impl Oracle for Skipper {
    fn query(&mut self, iteration: usize, ids: &[usize]) -> Result<Vec<Answer>> {
        let mut out = self.inner.query(iteration, ids)?;
        for (a, id) in out.iter_mut().zip(ids) {
            if self.skip.contains(id) {
                *a = Answer::Skipped;
            }
        }
        Ok(out)
    }

    fn calls(&self) -> usize {
        self.inner.calls()
    }
}

#[test]
fn skipped_instances_are_not_asked_again() {
    let ids: Vec<usize> = (0..30).collect();
    let mut oracle = Skipper {
        inner: truth(30),
        skip: [29, 28, 5].into_iter().collect(),
    };
    let out = run_dal(&config(5, 5), 2, &ids, &mut Stub::new(), &mut oracle, &mut ()).unwrap();
    assert_eq!(out.records.last().unwrap().stop, Some(StopReason::Exhausted));
    assert_eq!(oracle.calls(), 30);
    let skipped: usize = out.records.iter().map(|r| r.skipped_ids.len()).sum();
    assert!(skipped <= 3);
    assert_eq!(out.pool.history().len() + out.pool.skipped().len(), 30);
    out.pool.check_invariants().unwrap();
}

struct Failing;

impl Oracle for Failing {
    fn query(&mut self, _: usize, _: &[usize]) -> Result<Vec<Answer>> {
        Err(Error::Oracle("offline".into()))
    }

    fn calls(&self) -> usize {
        0
    }
}

#[test]
fn oracle_failure_aborts() {
    let ids: Vec<usize> = (0..10).collect();
    let err = run_dal(&config(5, 5), 0, &ids, &mut Stub::new(), &mut Failing, &mut ()).unwrap_err();
    assert!(matches!(err, Error::Oracle(_)));
}

#[derive(Default)]
struct Phases(Vec<Phase>, usize);

impl LoopObserver for Phases {
    fn phase(&mut self, _: usize, p: Phase) {
        self.0.push(p);
    }

    fn record(&mut self, _: &IterationRecord) -> Result<()> {
        self.1 += 1;
        Ok(())
    }
}

#[test]
fn observer_sees_every_phase() {
    let ids: Vec<usize> = (0..20).collect();
    let mut obs = Phases::default();
    run_dal(&config(10, 10), 0, &ids, &mut Stub::new(), &mut truth(20), &mut obs).unwrap();
    assert_eq!(obs.1, 2);
    assert_eq!(obs.0.first(), Some(&Phase::Initializing));
    assert_eq!(obs.0.last(), Some(&Phase::Done));
    assert!(obs.0.contains(&Phase::AwaitingLabels) && obs.0.contains(&Phase::Scoring));
}

#[test]
fn config_validation() {
    assert!(DalConfig::default().validate().is_ok());
    let mut c = DalConfig::default();
    c.partition = 1.5;
    assert!(c.validate().is_err());
    let mut c = DalConfig::default();
    c.budget = Some(10);
    assert!(c.validate().is_err());
    let ids: Vec<usize> = (0..5).collect();
    assert!(run_dal(&config(6, 1), 0, &ids, &mut Stub::new(), &mut truth(5), &mut ()).is_err());
}

#[test]
fn prototype_learner_runs_the_loop_with_mc_queries() {
    let (_, data) = make_synthetic(20, 32, 3).unwrap();
    let labels: Vec<usize> = data.instances().iter().map(|i| i.label).collect();
    let splits = split_stratified(&labels, (24, 8, 8), 3).unwrap();
    let split = SplitDataset { data, splits };
    let train = TrainConfig {
        batch_size: 8,
        warm_epochs: 1,
        joint_epochs: 1,
        last_layer_steps: 2,
        ..Default::default()
    };
    let model = ProtoModel::new(ModelConfig::toy(), &mut RngStream::new(3, StreamPurpose::WeightInit)).unwrap();
    let trainer = Trainer::new(train, LossWeights::default(), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut learner = ProtoLearner::new(model, trainer, &split, 3);
    learner.artifact_dir = Some(dir.path().to_path_buf());
    let mut cfg = config(8, 8);
    cfg.mc_passes = 3;
    let mut oracle = SimulatedOracle::new(split.splits.train.iter().map(|&i| (i, split.data.label(i).unwrap())));
    let out = run_dal(&cfg, 3, &split.splits.train, &mut learner, &mut oracle, &mut ()).unwrap();
    assert_eq!(out.records.len(), 3);
    assert_eq!(oracle.calls(), 24);
    for w in out.records.windows(2) {
        assert_eq!(w[0].params_hash_end, w[1].params_hash_start);
        assert!(w[1].cumulative_steps > w[0].cumulative_steps);
    }
    assert!(out.records.iter().all(|r| r.test.is_some()));
    let ck = out.records[2].checkpoint.as_ref().unwrap();
    let loaded = crate::tensor::checkpoint::Checkpoint::load(&dir.path().join(ck)).unwrap();
    assert_eq!(loaded.params_hash(), out.records[2].params_hash_end);
    let log = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert!(log.lines().count() > 5);
}
