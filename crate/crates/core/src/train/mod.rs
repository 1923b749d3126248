//! Staged optimisation: warm-up, joint training, push and last-layer tuning,
//! plus the plain training loop used by the vanilla baseline.

mod plan;

pub use plan::{decay_lr, plan_for_iteration, PlanStep, Schedule, StagePlan};

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentationSpec, Instance};
use crate::error::{Error, Result};
use crate::metrics::Prediction;
use crate::model::{BaselineModel, ParamGroup, PassOptions, ProtoModel, Stage};
use crate::proto::{self, LossWeights};
use crate::tensor::adam::Adam;
use crate::tensor::rng::{RngStream, StreamPurpose, StreamState};
use crate::tensor::{DropoutMode, Graph, Tensor, Var};

/// Base learning rate of each parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningRates {
    pub backbone: f64,
    pub add_on: f64,
    pub prototypes: f64,
    pub last_layer: f64,
    pub head: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            backbone: 1e-4,
            add_on: 3e-3,
            prototypes: 3e-3,
            last_layer: 1e-4,
            head: 1e-3,
        }
    }
}

impl LearningRates {
    pub fn get(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Backbone => self.backbone,
            ParamGroup::AddOn => self.add_on,
            ParamGroup::Prototypes => self.prototypes,
            ParamGroup::LastLayer => self.last_layer,
            ParamGroup::Head => self.head,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_warm")]
    pub warm_epochs: usize,
    /// `e`: joint epochs per iteration.
    #[serde(default = "default_joint")]
    pub joint_epochs: usize,
    #[serde(default = "default_last")]
    pub last_layer_steps: usize,
    /// Per-epoch exponential decay factor γ.
    #[serde(default = "default_decay")]
    pub lr_decay: f64,
    /// Whether the decay exponent counts epochs since the run began or
    /// since the current iteration began.
    #[serde(default)]
    pub lr_decay_scope: DecayScope,
    #[serde(default)]
    pub lr: LearningRates,
    #[serde(default = "AugmentationSpec::identity")]
    pub augmentation: AugmentationSpec,
    /// Training cycles for the full-data prototype baseline.
    #[serde(default = "default_full_cycles")]
    pub full_cycles: usize,
    /// Epochs for the vanilla baseline.
    #[serde(default = "default_baseline_epochs")]
    pub baseline_epochs: usize,
}

fn default_batch() -> usize {
    32
}
fn default_warm() -> usize {
    5
}
fn default_joint() -> usize {
    10
}
fn default_last() -> usize {
    15
}
fn default_decay() -> f64 {
    0.95
}
fn default_full_cycles() -> usize {
    3
}
fn default_baseline_epochs() -> usize {
    30
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: default_batch(),
            warm_epochs: default_warm(),
            joint_epochs: default_joint(),
            last_layer_steps: default_last(),
            lr_decay: default_decay(),
            lr_decay_scope: DecayScope::default(),
            lr: LearningRates::default(),
            augmentation: AugmentationSpec::identity(),
            full_cycles: default_full_cycles(),
            baseline_epochs: default_baseline_epochs(),
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Schedule {
        Schedule {
            warm_epochs: self.warm_epochs,
            joint_epochs: self.joint_epochs,
            last_layer_steps: self.last_layer_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if self.warm_epochs == 0 || self.joint_epochs == 0 || self.last_layer_steps == 0 {
            return Err(Error::Config(
                "train.warm_epochs, train.joint_epochs and train.last_layer_steps must be >= 1".into(),
            ));
        }
        decay_lr(1.0, self.lr_decay, 0)?;
        let lr = &self.lr;
        for (name, v) in [
            ("backbone", lr.backbone),
            ("add_on", lr.add_on),
            ("prototypes", lr.prototypes),
            ("last_layer", lr.last_layer),
            ("head", lr.head),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("train.lr.{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.full_cycles == 0 {
            return Err(Error::Config("train.full_cycles must be >= 1".into()));
        }
        self.augmentation.validate()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayScope {
    Run,
    #[default]
    Iteration,
}

fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Warm => "warm",
        Stage::Joint => "joint",
        Stage::LastOnly => "last_only",
    }
}

/// One line of the metrics log. Deterministic given seed and config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub stage: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    pub instances: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cross_entropy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cluster: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub separation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub lr: BTreeMap<String, f64>,
    /// Mean squared distance travelled by the prototypes (push only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub push_moved: Option<f64>,
    pub cumulative_steps: usize,
}

/// Wall-clock duration of one logged unit, kept apart from the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub iteration: usize,
    pub stage: String,
    pub index: usize,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Totals {
    loss: f64,
    ce: f64,
    cluster: f64,
    separation: f64,
    l1: f64,
    correct: usize,
    n: usize,
}

impl Totals {
    fn add(&mut self, other: &Totals, weight: usize) {
        let w = weight as f64;
        self.loss += other.loss * w;
        self.ce += other.ce * w;
        self.cluster += other.cluster * w;
        self.separation += other.separation * w;
        self.l1 += other.l1 * w;
        self.correct += other.correct;
        self.n += other.n;
    }

    fn mean(&self) -> Totals {
        let n = self.n.max(1) as f64;
        Totals {
            loss: self.loss / n,
            ce: self.ce / n,
            cluster: self.cluster / n,
            separation: self.separation / n,
            l1: self.l1 / n,
            ..*self
        }
    }
}

fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row.iter().enumerate().fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            best == y
        })
        .count()
}

/// Models whose parameters the optimizer can address by name.
pub trait NamedParams {
    fn named_param_mut(&mut self, name: &str) -> Option<&mut Tensor>;
}

impl NamedParams for ProtoModel {
    fn named_param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.param_mut(name)
    }
}

impl NamedParams for BaselineModel {
    fn named_param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.param_mut(name)
    }
}

/// Summary of one iteration's training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationTraining {
    pub final_loss: f64,
    pub push_moved: f64,
    pub cumulative_steps: usize,
}

/// Owns the optimizer state, the schedule position and the random streams
/// for data order, dropout and augmentation.
pub struct Trainer {
    pub config: TrainConfig,
    pub loss: LossWeights,
    adam: Adam,
    /// Epochs completed across the whole run; drives lr decay.
    pub epochs_elapsed: usize,
    /// Mini-batch steps plus one per push.
    pub steps: usize,
    data_order: RngStream,
    dropout: RngStream,
    augmentation: RngStream,
    log: Vec<LogRecord>,
    timings: Vec<TimingRecord>,
}

impl Trainer {
    pub fn new(config: TrainConfig, loss: LossWeights, seed: u64) -> Result<Self> {
        config.validate()?;
        loss.validate()?;
        Ok(Trainer {
            config,
            loss,
            adam: Adam::default(),
            epochs_elapsed: 0,
            steps: 0,
            data_order: RngStream::new(seed, StreamPurpose::DataOrder),
            dropout: RngStream::new(seed, StreamPurpose::Dropout),
            augmentation: RngStream::new(seed, StreamPurpose::Augmentation),
            log: Vec::new(),
            timings: Vec::new(),
        })
    }

    pub fn adam(&self) -> &Adam {
        &self.adam
    }

    pub fn streams(&self) -> BTreeMap<String, StreamState> {
        [
            ("data_order", &self.data_order),
            ("dropout", &self.dropout),
            ("augmentation", &self.augmentation),
        ]
        .into_iter()
        .map(|(k, s)| (k.to_string(), s.state()))
        .collect()
    }

    /// Records emitted since the last call.
    pub fn take_log(&mut self) -> Vec<LogRecord> {
        std::mem::take(&mut self.log)
    }

    pub fn take_timings(&mut self) -> Vec<TimingRecord> {
        std::mem::take(&mut self.timings)
    }

    fn lr(&self, group: ParamGroup) -> Result<f64> {
        decay_lr(self.config.lr.get(group), self.config.lr_decay, self.epochs_elapsed)
    }

    fn lr_table(&self, groups: &[ParamGroup]) -> Result<BTreeMap<String, f64>> {
        groups
            .iter()
            .map(|&g| {
                let key = serde_json::to_value(g)?.as_str().unwrap_or_default().to_string();
                Ok((key, self.lr(g)?))
            })
            .collect()
    }

    fn batch_images(&mut self, batch: &[&Instance]) -> Result<Tensor> {
        let spec = &self.config.augmentation;
        if spec.enabled {
            let imgs: Vec<Tensor> = batch
                .iter()
                .map(|i| augment(&i.image, spec, &mut self.augmentation))
                .collect();
            Tensor::stack(&imgs.iter().collect::<Vec<_>>())
        } else {
            Tensor::stack(&batch.iter().map(|i| &i.image).collect::<Vec<_>>())
        }
    }

    fn shuffled<'a>(&mut self, data: &[&'a Instance]) -> Vec<&'a Instance> {
        let mut order = data.to_vec();
        self.data_order.shuffle(&mut order);
        order
    }

    /// Applies one Adam update to every parameter registered on the graph.
    fn apply(
        &mut self,
        graph: &Graph,
        params: &[(String, Var)],
        group_of: impl Fn(&str) -> ParamGroup,
        model: &mut impl NamedParams,
    ) -> Result<()> {
        for (name, var) in params {
            let grad = graph
                .grad(*var)
                .ok_or_else(|| Error::invalid(format!("no gradient for {name}")))?;
            let lr = self.lr(group_of(name))?;
            let target = model
                .named_param_mut(name)
                .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
            self.adam.step(name, target, grad, lr)?;
        }
        Ok(())
    }

    /// One mini-batch update of the prototype model in `stage`.
    fn proto_step(&mut self, model: &mut ProtoModel, stage: Stage, batch: &[&Instance]) -> Result<Totals> {
        let x = self.batch_images(batch)?;
        let labels: Vec<usize> = batch.iter().map(|i| i.label).collect();
        let pass = {
            let mut opts = PassOptions::stochastic(DropoutMode::Train, &mut self.dropout);
            model.forward(&x, Some(stage), &mut opts)?
        };
        let mut g = pass.graph;
        let ce = g.softmax_cross_entropy(pass.logits, &labels)?;
        let mut t = Totals {
            correct: correct(g.value(pass.logits), &labels),
            n: batch.len(),
            ..Default::default()
        };
        let loss = match stage {
            Stage::Warm | Stage::Joint => {
                let cl = proto::cluster_cost(&mut g, pass.min_distances, &labels, &model.bank)?;
                let sep = proto::separation_cost(&mut g, pass.min_distances, &labels, &model.bank)?;
                t.cluster = g.value(cl).item();
                t.separation = g.value(sep).item();
                let a = g.scale(cl, self.loss.cluster);
                let b = g.scale(sep, -self.loss.separation);
                let s = g.add(ce, a)?;
                g.add(s, b)?
            }
            Stage::LastOnly => {
                let l1 = proto::last_layer_l1(&mut g, pass.last_layer, &model.bank)?;
                t.l1 = g.value(l1).item();
                let a = g.scale(l1, self.loss.l1);
                g.add(ce, a)?
            }
        };
        t.ce = g.value(ce).item();
        t.loss = g.value(loss).item();
        if !t.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                stage: stage_name(stage).into(),
                batch_ids: batch.iter().map(|i| i.id).collect(),
            });
        }
        g.backward(loss)?;
        let groups: BTreeMap<String, ParamGroup> = model
            .named_params()
            .into_iter()
            .map(|(n, grp, _)| (n.to_string(), grp))
            .collect();
        self.apply(&g, &pass.params, |n| groups[n], model)?;
        self.steps += 1;
        Ok(t)
    }

    fn stage_groups(stage: Stage) -> Vec<ParamGroup> {
        use ParamGroup::*;
        [Backbone, AddOn, Prototypes, LastLayer]
            .into_iter()
            .filter(|g| stage.trains(*g))
            .collect()
    }

    /// Full passes over `data` in a warm or joint stage.
    pub fn run_epochs(
        &mut self,
        model: &mut ProtoModel,
        stage: Stage,
        epochs: usize,
        data: &[&Instance],
        iteration: usize,
    ) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::invalid(format!("{} stage has no training data", stage_name(stage))));
        }
        let mut last = f64::NAN;
        for epoch in 0..epochs {
            let started = Instant::now();
            let lr = self.lr_table(&Self::stage_groups(stage))?;
            let order = self.shuffled(data);
            let mut totals = Totals::default();
            for batch in order.chunks(self.config.batch_size) {
                let t = self.proto_step(model, stage, batch)?;
                totals.add(&t, batch.len());
            }
            let m = totals.mean();
            last = m.loss;
            self.log.push(LogRecord {
                iteration,
                stage: stage_name(stage).into(),
                epoch: Some(epoch + 1),
                step: None,
                instances: data.len(),
                loss: Some(m.loss),
                cross_entropy: Some(m.ce),
                cluster: Some(m.cluster),
                separation: Some(m.separation),
                l1: None,
                train_accuracy: Some(m.correct as f64 / m.n as f64),
                lr,
                push_moved: None,
                cumulative_steps: self.steps,
            });
            self.timings.push(TimingRecord {
                iteration,
                stage: stage_name(stage).into(),
                index: epoch + 1,
                seconds: started.elapsed().as_secs_f64(),
            });
            self.epochs_elapsed += 1;
        }
        Ok(last)
    }

    /// `steps` mini-batch updates of the last layer, cycling through
    /// reshuffled passes of `data`.
    pub fn run_last_layer(
        &mut self,
        model: &mut ProtoModel,
        steps: usize,
        data: &[&Instance],
        iteration: usize,
    ) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::invalid("last_only stage has no training data"));
        }
        let bs = self.config.batch_size;
        let mut order = Vec::new();
        let mut pos = 0;
        let mut last = f64::NAN;
        for step in 0..steps {
            if pos >= order.len() {
                order = self.shuffled(data);
                pos = 0;
            }
            let batch = &order[pos..(pos + bs).min(order.len())];
            pos += bs;
            let started = Instant::now();
            let lr = self.lr_table(&[ParamGroup::LastLayer])?;
            let t = self.proto_step(model, Stage::LastOnly, batch)?;
            last = t.loss;
            self.log.push(LogRecord {
                iteration,
                stage: "last_only".into(),
                epoch: None,
                step: Some(step + 1),
                instances: batch.len(),
                loss: Some(t.loss),
                cross_entropy: Some(t.ce),
                cluster: None,
                separation: None,
                l1: Some(t.l1),
                train_accuracy: Some(t.correct as f64 / t.n as f64),
                lr,
                push_moved: None,
                cumulative_steps: self.steps,
            });
            self.timings.push(TimingRecord {
                iteration,
                stage: "last_only".into(),
                index: step + 1,
                seconds: started.elapsed().as_secs_f64(),
            });
        }
        Ok(last)
    }

    pub fn run_push(&mut self, model: &mut ProtoModel, data: &[&Instance], iteration: usize) -> Result<f64> {
        let started = Instant::now();
        let report = proto::push(model, data, self.config.batch_size)?;
        let moved = report.moved.iter().sum::<f64>() / report.moved.len() as f64;
        self.steps += 1;
        self.log.push(LogRecord {
            iteration,
            stage: "push".into(),
            epoch: None,
            step: None,
            instances: data.len(),
            loss: None,
            cross_entropy: None,
            cluster: None,
            separation: None,
            l1: None,
            train_accuracy: None,
            lr: BTreeMap::new(),
            push_moved: Some(moved),
            cumulative_steps: self.steps,
        });
        self.timings.push(TimingRecord {
            iteration,
            stage: "push".into(),
            index: 1,
            seconds: started.elapsed().as_secs_f64(),
        });
        Ok(moved)
    }

    /// Executes the plan of `iteration`: stages train on `train_set`, push
    /// projects onto `push_set`.
    pub fn run_iteration(
        &mut self,
        model: &mut ProtoModel,
        iteration: usize,
        train_set: &[&Instance],
        push_set: &[&Instance],
    ) -> Result<IterationTraining> {
        let plan = plan_for_iteration(iteration, &self.config.schedule())?;
        if self.config.lr_decay_scope == DecayScope::Iteration {
            self.epochs_elapsed = 0;
        }
        let mut final_loss = f64::NAN;
        let mut push_moved = 0.0;
        for step in plan.steps {
            match step {
                PlanStep::Warm { epochs } => {
                    final_loss = self.run_epochs(model, Stage::Warm, epochs, train_set, iteration)?;
                }
                PlanStep::Joint { epochs } => {
                    final_loss = self.run_epochs(model, Stage::Joint, epochs, train_set, iteration)?;
                }
                PlanStep::Push => push_moved = self.run_push(model, push_set, iteration)?,
                PlanStep::LastOnly { steps } => {
                    final_loss = self.run_last_layer(model, steps, train_set, iteration)?;
                }
            }
        }
        Ok(IterationTraining {
            final_loss,
            push_moved,
            cumulative_steps: self.steps,
        })
    }

    /// Cross-entropy training of the plain classifier, every parameter
    /// trainable.
    pub fn fit_baseline(&mut self, model: &mut BaselineModel, data: &[&Instance], epochs: usize) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::invalid("baseline training has no data"));
        }
        let mut last = f64::NAN;
        for epoch in 0..epochs {
            let started = Instant::now();
            let lr = self.lr_table(&[ParamGroup::Backbone, ParamGroup::Head])?;
            let order = self.shuffled(data);
            let mut totals = Totals::default();
            for batch in order.chunks(self.config.batch_size) {
                let x = self.batch_images(batch)?;
                let labels: Vec<usize> = batch.iter().map(|i| i.label).collect();
                let pass = {
                    let mut opts = PassOptions::stochastic(DropoutMode::Train, &mut self.dropout);
                    model.forward(&x, true, &mut opts)?
                };
                let mut g = pass.graph;
                let ce = g.softmax_cross_entropy(pass.logits, &labels)?;
                let t = Totals {
                    loss: g.value(ce).item(),
                    ce: g.value(ce).item(),
                    correct: correct(g.value(pass.logits), &labels),
                    n: batch.len(),
                    ..Default::default()
                };
                if !t.loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        stage: "baseline".into(),
                        batch_ids: batch.iter().map(|i| i.id).collect(),
                    });
                }
                g.backward(ce)?;
                let group_of = |n: &str| {
                    if n.starts_with("head.") {
                        ParamGroup::Head
                    } else {
                        ParamGroup::Backbone
                    }
                };
                self.apply(&g, &pass.params, group_of, model)?;
                self.steps += 1;
                totals.add(&t, batch.len());
            }
            let m = totals.mean();
            last = m.loss;
            self.log.push(LogRecord {
                iteration: 1,
                stage: "baseline".into(),
                epoch: Some(epoch + 1),
                step: None,
                instances: data.len(),
                loss: Some(m.loss),
                cross_entropy: Some(m.ce),
                cluster: None,
                separation: None,
                l1: None,
                train_accuracy: Some(m.correct as f64 / m.n as f64),
                lr,
                push_moved: None,
                cumulative_steps: self.steps,
            });
            self.timings.push(TimingRecord {
                iteration: 1,
                stage: "baseline".into(),
                index: epoch + 1,
                seconds: started.elapsed().as_secs_f64(),
            });
            self.epochs_elapsed += 1;
        }
        Ok(last)
    }
}

/// Batched inference turning class probabilities into predictions.
pub fn predictions(
    data: &[&Instance],
    batch_size: usize,
    mut proba: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch_size.max(1)) {
        let x = Tensor::stack(&chunk.iter().map(|i| &i.image).collect::<Vec<_>>())?;
        let p = proba(&x)?;
        let c = p.shape()[1];
        for (inst, row) in chunk.iter().zip(p.data().chunks(c)) {
            let predicted = row.iter().enumerate().fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            out.push(Prediction {
                id: inst.id,
                truth: inst.label,
                predicted,
                score: row[1],
            });
        }
    }
    Ok(out)
}
