use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The oracle's reply for one queried instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    Label(usize),
    Skipped,
}

/// Label source consulted by the loop. `query` receives each id at most once
/// per experiment; the returned answers are in request order.
pub trait Oracle {
    fn query(&mut self, iteration: usize, ids: &[usize]) -> Result<Vec<Answer>>;

    /// Ids answered so far.
    fn calls(&self) -> usize;
}

/// Ground-truth lookup.
#[derive(Clone, Debug, Default)]
pub struct SimulatedOracle {
    truth: BTreeMap<usize, usize>,
    asked: HashSet<usize>,
}

impl SimulatedOracle {
    pub fn new(truth: impl IntoIterator<Item = (usize, usize)>) -> Self {
        SimulatedOracle {
            truth: truth.into_iter().collect(),
            asked: HashSet::new(),
        }
    }

    pub fn was_asked(&self, id: usize) -> bool {
        self.asked.contains(&id)
    }
}

impl Oracle for SimulatedOracle {
    fn query(&mut self, _iteration: usize, ids: &[usize]) -> Result<Vec<Answer>> {
        for (i, id) in ids.iter().enumerate() {
            if !self.truth.contains_key(id) {
                return Err(Error::Oracle(format!("unknown instance {id}")));
            }
            if self.asked.contains(id) || ids[..i].contains(id) {
                return Err(Error::Oracle(format!("instance {id} was already queried")));
            }
        }
        self.asked.extend(ids.iter().copied());
        Ok(ids.iter().map(|id| Answer::Label(self.truth[id])).collect())
    }

    fn calls(&self) -> usize {
        self.asked.len()
    }
}
