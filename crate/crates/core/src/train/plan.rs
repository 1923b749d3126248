use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Stage;

/// One entry of an iteration's schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum PlanStep {
    Warm { epochs: usize },
    Joint { epochs: usize },
    Push,
    LastOnly { steps: usize },
}

impl PlanStep {
    pub fn stage(&self) -> Option<Stage> {
        match self {
            PlanStep::Warm { .. } => Some(Stage::Warm),
            PlanStep::Joint { .. } => Some(Stage::Joint),
            PlanStep::LastOnly { .. } => Some(Stage::LastOnly),
            PlanStep::Push => None,
        }
    }

    /// Epochs for warm/joint, steps for last_only, `None` for push.
    pub fn duration(&self) -> Option<usize> {
        match *self {
            PlanStep::Warm { epochs } | PlanStep::Joint { epochs } => Some(epochs),
            PlanStep::LastOnly { steps } => Some(steps),
            PlanStep::Push => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub iteration: usize,
    pub steps: Vec<PlanStep>,
}

/// Stage lengths shared by every iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub warm_epochs: usize,
    pub joint_epochs: usize,
    pub last_layer_steps: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            warm_epochs: 5,
            joint_epochs: 10,
            last_layer_steps: 15,
        }
    }
}

/// Warm-up runs only in the first iteration; every iteration then trains
/// jointly, pushes once and tunes the last layer.
pub fn plan_for_iteration(iteration: usize, schedule: &Schedule) -> Result<StagePlan> {
    if iteration < 1 {
        return Err(Error::invalid("iterations are numbered from 1"));
    }
    let s = schedule;
    if s.joint_epochs == 0 || s.last_layer_steps == 0 || (iteration == 1 && s.warm_epochs == 0) {
        return Err(Error::Config("stage durations must be > 0".into()));
    }
    let mut steps = Vec::with_capacity(4);
    if iteration == 1 {
        steps.push(PlanStep::Warm { epochs: s.warm_epochs });
    }
    steps.push(PlanStep::Joint { epochs: s.joint_epochs });
    steps.push(PlanStep::Push);
    steps.push(PlanStep::LastOnly { steps: s.last_layer_steps });
    Ok(StagePlan { iteration, steps })
}

/// `lr · γ^epochs`.
pub fn decay_lr(lr: f64, gamma: f64, epochs: usize) -> Result<f64> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Config(format!("train.lr_decay must lie in (0, 1], got {gamma}")));
    }
    Ok(lr * gamma.powi(epochs as i32))
}
