//! The loop-side halves of the service: an oracle that waits for human
//! answers and an observer that publishes progress.

use std::collections::BTreeSet;
use std::sync::Arc;

use protolab_core::dal::{Answer, IterationRecord, LoopObserver, Oracle, Phase};
use protolab_core::error::{Error, Result};
use protolab_core::proto::Explanation;

use crate::state::Shared;

/// Answers come from `POST /labels`, or from the journal when a restarted
/// loop asks for an instance that was answered before the restart.
pub struct HumanOracle {
    shared: Arc<Shared>,
    asked: BTreeSet<usize>,
}

impl HumanOracle {
    pub fn new(shared: Arc<Shared>) -> Self {
        HumanOracle {
            shared,
            asked: BTreeSet::new(),
        }
    }
}

impl Oracle for HumanOracle {
    fn query(&mut self, round: usize, ids: &[usize]) -> Result<Vec<Answer>> {
        for (i, id) in ids.iter().enumerate() {
            if self.shared.data().get(*id).is_none() {
                return Err(Error::Oracle(format!("unknown instance {id}")));
            }
            if self.asked.contains(id) || ids[..i].contains(id) {
                return Err(Error::Oracle(format!("instance {id} was already queried")));
            }
        }
        let answers = self.shared.collect(round, ids, self.shared.journal().replayed());
        self.asked.extend(ids.iter().copied());
        Ok(answers)
    }

    fn calls(&self) -> usize {
        self.asked.len()
    }
}

/// Mirrors loop progress into the shared state and holds the loop between
/// iterations while paused.
pub struct ServiceObserver {
    shared: Arc<Shared>,
}

impl ServiceObserver {
    pub fn new(shared: Arc<Shared>) -> Self {
        ServiceObserver { shared }
    }
}

impl LoopObserver for ServiceObserver {
    fn before_iteration(&mut self, _iteration: usize) -> Result<()> {
        self.shared.wait_unpaused();
        Ok(())
    }

    fn phase(&mut self, iteration: usize, phase: Phase) {
        self.shared.set_phase(iteration, phase);
    }

    fn queries(&mut self, _iteration: usize, _ids: &[usize], explanations: &[Explanation]) {
        self.shared.add_explanations(explanations);
    }

    fn record(&mut self, record: &IterationRecord) -> Result<()> {
        self.shared.push_record(record);
        Ok(())
    }
}
