use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::rng::{RngStream, StreamPurpose};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Disjoint train/val/test id lists of exactly the requested sizes,
/// stratified by class.
///
/// Each class is shuffled, then all ids are interleaved by their relative
/// position `(rank + 0.5)/class_size`; every prefix of the interleaving is
/// close to the overall class balance, and the splits are consecutive runs
/// of it.
pub fn split_stratified(labels: &[usize], sizes: (usize, usize, usize), seed: u64) -> Result<Splits> {
    let (train, val, test) = sizes;
    let total = train + val + test;
    if total > labels.len() {
        return Err(Error::invalid(format!(
            "split sizes {train}+{val}+{test} exceed {} records",
            labels.len()
        )));
    }
    let mut rng = RngStream::new(seed, StreamPurpose::Split);
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(labels.len());
    for c in 0..classes {
        let mut ids: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        rng.shuffle(&mut ids);
        let n = ids.len() as f64;
        keyed.extend(ids.into_iter().enumerate().map(|(r, id)| ((r as f64 + 0.5) / n, c, id)));
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let order: Vec<usize> = keyed.into_iter().map(|(_, _, id)| id).collect();
    Ok(Splits {
        train: order[..train].to_vec(),
        val: order[train..train + val].to_vec(),
        test: order[train + val..total].to_vec(),
    })
}
