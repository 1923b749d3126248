use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledEntry {
    pub id: usize,
    pub label: usize,
    /// Iteration whose training set first contained the instance.
    pub iteration: usize,
}

/// Labeled history, unlabeled set U and the current training set L.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetPool {
    all_ids: Vec<usize>,
    labeled: Vec<LabeledEntry>,
    unlabeled: BTreeSet<usize>,
    current: Vec<usize>,
    /// Members of U the oracle declined; they are not offered again.
    skipped: BTreeSet<usize>,
}

/// `1 + ceil((N − init)/n)`.
pub fn total_iterations(n_train: usize, init: usize, n: usize) -> Result<usize> {
    if init > n_train {
        return Err(Error::Pool(format!("init size {init} exceeds the {n_train} training ids")));
    }
    if n == 0 {
        return Err(Error::Pool("query size n must be >= 1".into()));
    }
    Ok(1 + (n_train - init).div_ceil(n))
}

/// Labeled count when iteration `k` trains, absent skips and early stops.
pub fn cumulative_labeled(iteration: usize, n_train: usize, init: usize, n: usize) -> usize {
    (init + iteration.saturating_sub(1) * n).min(n_train)
}

/// `floor(p·previous)`, guarded against products like `0.29·100` landing a
/// hair under an integer.
pub fn partition_count(p: f64, previous: usize) -> usize {
    ((p * previous as f64 + 1e-9).floor() as usize).min(previous)
}

impl DatasetPool {
    /// Every id unlabeled.
    pub fn new(ids: &[usize]) -> Result<Self> {
        let unlabeled: BTreeSet<usize> = ids.iter().copied().collect();
        if unlabeled.len() != ids.len() {
            return Err(Error::Pool("duplicate ids in the training split".into()));
        }
        Ok(DatasetPool {
            all_ids: unlabeled.iter().copied().collect(),
            labeled: Vec::new(),
            unlabeled,
            current: Vec::new(),
            skipped: BTreeSet::new(),
        })
    }

    /// `init_size` ids drawn uniformly without replacement, sorted.
    pub fn draw_initial(&self, init_size: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
        if init_size > self.all_ids.len() {
            return Err(Error::Pool(format!(
                "init size {init_size} exceeds the {} training ids",
                self.all_ids.len()
            )));
        }
        let mut ids = rng.sample(&self.all_ids, init_size);
        ids.sort_unstable();
        Ok(ids)
    }

    pub fn all_ids(&self) -> &[usize] {
        &self.all_ids
    }

    pub fn history(&self) -> &[LabeledEntry] {
        &self.labeled
    }

    pub fn labeled_ids(&self) -> Vec<usize> {
        self.labeled.iter().map(|e| e.id).collect()
    }

    pub fn labeled_pairs(&self) -> Vec<(usize, usize)> {
        self.labeled.iter().map(|e| (e.id, e.label)).collect()
    }

    pub fn unlabeled(&self) -> &BTreeSet<usize> {
        &self.unlabeled
    }

    pub fn skipped(&self) -> &BTreeSet<usize> {
        &self.skipped
    }

    /// Members of U that may still be queried.
    pub fn candidates(&self) -> Vec<usize> {
        self.unlabeled.difference(&self.skipped).copied().collect()
    }

    pub fn current(&self) -> &[usize] {
        &self.current
    }

    pub fn label_of(&self, id: usize) -> Option<usize> {
        self.labeled.iter().find(|e| e.id == id).map(|e| e.label)
    }

    pub fn labeled_fraction(&self) -> f64 {
        if self.all_ids.is_empty() {
            return 1.0;
        }
        self.labeled.len() as f64 / self.all_ids.len() as f64
    }

    /// Moves `(id, label)` pairs from U to the history. All-or-nothing.
    pub fn record_labels(&mut self, answers: &[(usize, usize)], iteration: usize) -> Result<()> {
        let mut seen = HashSet::new();
        for &(id, _) in answers {
            if !self.unlabeled.contains(&id) {
                return Err(Error::Pool(format!("instance {id} is not in the unlabeled pool")));
            }
            if !seen.insert(id) {
                return Err(Error::Pool(format!("instance {id} labeled twice in one batch")));
            }
        }
        for &(id, label) in answers {
            self.unlabeled.remove(&id);
            self.skipped.remove(&id);
            self.labeled.push(LabeledEntry { id, label, iteration });
        }
        Ok(())
    }

    pub fn skip(&mut self, id: usize) -> Result<()> {
        if !self.unlabeled.contains(&id) {
            return Err(Error::Pool(format!("instance {id} is not in the unlabeled pool")));
        }
        self.skipped.insert(id);
        Ok(())
    }

    /// `new ∪ sample(floor(p·|previous|))`, where previous is every id
    /// labeled before `new`. The sample is drawn fresh on every call.
    pub fn next_training_set(&mut self, new_ids: &[usize], p: f64, rng: &mut RngStream) -> Result<Vec<usize>> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::Config(format!("dal.partition must lie in (0, 1], got {p}")));
        }
        let new: HashSet<usize> = new_ids.iter().copied().collect();
        let known: HashSet<usize> = self.labeled.iter().map(|e| e.id).collect();
        if let Some(id) = new_ids.iter().find(|id| !known.contains(id)) {
            return Err(Error::Pool(format!("instance {id} has no label yet")));
        }
        let previous: Vec<usize> = self
            .labeled
            .iter()
            .map(|e| e.id)
            .filter(|id| !new.contains(id))
            .collect();
        let k = partition_count(p, previous.len());
        let mut set = new_ids.to_vec();
        set.extend(rng.sample(&previous, k));
        self.current = set.clone();
        Ok(set)
    }

    /// Conservation and uniqueness; called after every mutation in tests.
    pub fn check_invariants(&self) -> Result<()> {
        let labeled: HashSet<usize> = self.labeled.iter().map(|e| e.id).collect();
        if labeled.len() != self.labeled.len() {
            return Err(Error::Pool("an id appears twice in the labeled history".into()));
        }
        if labeled.len() + self.unlabeled.len() != self.all_ids.len() {
            return Err(Error::Pool("labeled and unlabeled counts do not cover the pool".into()));
        }
        if self.unlabeled.iter().any(|id| labeled.contains(id)) {
            return Err(Error::Pool("an id is both labeled and unlabeled".into()));
        }
        if self.current.iter().any(|id| !labeled.contains(id)) {
            return Err(Error::Pool("training set contains an unlabeled id".into()));
        }
        if !self.skipped.is_subset(&self.unlabeled) {
            return Err(Error::Pool("a skipped id left the unlabeled pool".into()));
        }
        Ok(())
    }
}
