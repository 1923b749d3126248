//! Binary classification metrics. The positive class is 1 ("diseased").

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: usize,
    pub truth: usize,
    pub predicted: usize,
    /// Probability of the positive class.
    pub score: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(preds: &[Prediction]) -> Self {
        let mut c = Confusion::default();
        for p in preds {
            match (p.truth == 1, p.predicted == 1) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision(), self.recall())
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Nearest whole number of correct predictions behind a reported accuracy.
pub fn accuracy_count_check(accuracy: f64, n: usize) -> usize {
    (accuracy * n as f64).round() as usize
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrCurveArea {
    /// Step-wise average precision.
    #[default]
    AveragePrecision,
    /// Trapezoids between (recall, precision) points, starting at (0, 1).
    Trapezoidal,
}

/// `(recall, precision)` after each group of equal scores, highest first.
pub fn pr_points(scores: &[f64], truth: &[usize]) -> Result<Vec<(f64, f64)>> {
    if scores.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} scores for {} labels",
            scores.len(),
            truth.len()
        )));
    }
    let pos = truth.iter().filter(|&&t| t == 1).count();
    if pos == 0 || pos == truth.len() {
        return Err(Error::invalid("precision-recall area needs both classes in the ground truth"));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::invalid(format!("non-finite score {s}")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if truth[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((tp as f64 / pos as f64, tp as f64 / (tp + fp) as f64));
    }
    Ok(points)
}

pub fn auprc_with(scores: &[f64], truth: &[usize], area: PrCurveArea) -> Result<f64> {
    let points = pr_points(scores, truth)?;
    let mut prev = (0.0, 1.0);
    let mut total = 0.0;
    for &(r, p) in &points {
        total += match area {
            PrCurveArea::AveragePrecision => (r - prev.0) * p,
            PrCurveArea::Trapezoidal => (r - prev.0) * (p + prev.1) / 2.0,
        };
        prev = (r, p);
    }
    Ok(total)
}

/// Average precision over ranked positive-class scores.
pub fn auprc(scores: &[f64], truth: &[usize]) -> Result<f64> {
    auprc_with(scores, truth, PrCurveArea::AveragePrecision)
}

/// All reported values for one evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub auprc: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub confusion: Confusion,
}

pub fn evaluate(preds: &[Prediction]) -> Result<EvalMetrics> {
    evaluate_with(preds, PrCurveArea::default())
}

pub fn evaluate_with(preds: &[Prediction], area: PrCurveArea) -> Result<EvalMetrics> {
    if preds.is_empty() {
        return Err(Error::invalid("no predictions to evaluate"));
    }
    let mut ids = HashSet::new();
    for p in preds {
        if !ids.insert(p.id) {
            return Err(Error::invalid(format!("duplicate prediction for instance {}", p.id)));
        }
        if !(0.0..=1.0).contains(&p.score) {
            return Err(Error::invalid(format!("score {} for instance {} outside [0, 1]", p.score, p.id)));
        }
    }
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let truth: Vec<usize> = preds.iter().map(|p| p.truth).collect();
    let c = Confusion::from_predictions(preds);
    Ok(EvalMetrics {
        auprc: auprc_with(&scores, &truth, area)?,
        f1: c.f1(),
        precision: c.precision(),
        recall: c.recall(),
        accuracy: c.accuracy(),
        confusion: c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Sweeps every threshold t from the score set: predict positive iff
    /// score ≥ t, and sum recall increments times precision.
    fn sweep_oracle(scores: &[f64], truth: &[usize]) -> f64 {
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let pos = truth.iter().filter(|&&t| t == 1).count() as f64;
        let mut prev_r = 0.0;
        let mut ap = 0.0;
        for t in thresholds {
            let tp = scores.iter().zip(truth).filter(|(s, y)| **s >= t && **y == 1).count() as f64;
            let predicted = scores.iter().filter(|s| **s >= t).count() as f64;
            let r = tp / pos;
            ap += (r - prev_r) * (tp / predicted);
            prev_r = r;
        }
        ap
    }

    fn preds(truth: &[usize], predicted: &[usize]) -> Vec<Prediction> {
        truth
            .iter()
            .zip(predicted)
            .enumerate()
            .map(|(id, (&t, &p))| Prediction {
                id,
                truth: t,
                predicted: p,
                score: p as f64,
            })
            .collect()
    }

    #[test]
    fn f1_from_reported_precision_recall() {
        assert!((f1(0.9067, 0.8359) - 0.8699).abs() < 5e-4);
        assert!((f1(0.8684, 0.7734) - 0.8181).abs() < 5e-4);
        assert_eq!(f1(0.0, 0.0), 0.0);
    }

    #[test]
    fn accuracy_counts() {
        assert_eq!(accuracy_count_check(0.8655, 238), 206);
        assert_eq!(accuracy_count_check(0.8151, 238), 194);
        assert_eq!(accuracy_count_check(1.0, 238), 238);
    }

    #[test]
    fn perfect_predictions() {
        let m = evaluate(&preds(&[1, 0, 1, 0], &[1, 0, 1, 0])).unwrap();
        assert_eq!((m.precision, m.recall, m.f1, m.accuracy, m.auprc), (1.0, 1.0, 1.0, 1.0, 1.0));
        assert_eq!(m.confusion, Confusion { tp: 2, fp: 0, tn: 2, fn_: 0 });
    }

    #[test]
    fn no_positive_predictions_give_zero_f1() {
        let c = Confusion::from_predictions(&preds(&[1, 0, 1], &[0, 0, 0]));
        assert_eq!((c.precision(), c.recall(), c.f1()), (0.0, 0.0, 0.0));
    }

    #[test]
    fn hand_enumerated_step_curve() {
        let ap = auprc(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0]).unwrap();
        assert!((ap - (0.5 + 2.0 / 3.0 * 0.5)).abs() < 1e-15);
        assert_eq!(auprc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
    }

    #[test]
    fn tied_scores_are_one_threshold() {
        // one group containing a positive and a negative
        let ap = auprc(&[0.5, 0.5, 0.1], &[1, 0, 1]).unwrap();
        assert!((ap - (0.5 * 0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn single_class_truth_is_undefined() {
        assert!(auprc(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(auprc(&[0.1, 0.2], &[0, 0]).is_err());
        assert!(evaluate(&[]).is_err());
    }

    #[test]
    fn trapezoidal_flag() {
        let a = auprc_with(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0], PrCurveArea::Trapezoidal).unwrap();
        // the vertical drop at recall 0.5 adds no area
        let expect = 0.5 + 0.5 * (0.5 + 2.0 / 3.0) / 2.0;
        assert!((a - expect).abs() < 1e-15);
    }

    #[test]
    fn duplicate_ids_and_bad_scores_rejected() {
        let mut p = preds(&[1, 0], &[1, 0]);
        p[1].id = 0;
        assert!(evaluate(&p).is_err());
        let mut p = preds(&[1, 0], &[1, 0]);
        p[0].score = 1.5;
        assert!(evaluate(&p).is_err());
    }

    fn fixture() -> impl Strategy<Value = (Vec<f64>, Vec<usize>)> {
        (4usize..30).prop_flat_map(|n| {
            (
                prop::collection::vec((0u32..8).prop_map(|k| k as f64 / 8.0), n),
                prop::collection::vec(0usize..2, n),
            )
                .prop_filter("both classes", |(_, t)| t.contains(&0) && t.contains(&1))
        })
    }

    proptest! {
        #[test]
        fn matches_threshold_sweep((scores, truth) in fixture()) {
            let ap = auprc(&scores, &truth).unwrap();
            prop_assert!((ap - sweep_oracle(&scores, &truth)).abs() < 1e-12);
            prop_assert!(ap > 0.0 && ap <= 1.0 + 1e-15);
        }

        #[test]
        fn invariant_under_monotone_transform((scores, truth) in fixture()) {
            let t: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(auprc(&scores, &truth).unwrap(), auprc(&t, &truth).unwrap());
        }

        #[test]
        fn invariant_under_permutation((scores, truth) in fixture(), rot in 0usize..30) {
            let n = scores.len();
            let k = rot % n;
            let mut s2 = scores.clone();
            let mut t2 = truth.clone();
            s2.rotate_left(k);
            t2.rotate_left(k);
            prop_assert!((auprc(&scores, &truth).unwrap() - auprc(&s2, &t2).unwrap()).abs() < 1e-15);
        }

        #[test]
        fn informative_ranker_beats_prevalence(truth in prop::collection::vec(0usize..2, 4..40)) {
            prop_assume!(truth.contains(&0) && truth.contains(&1));
            let scores: Vec<f64> = truth.iter().map(|&t| t as f64).collect();
            let prevalence = truth.iter().sum::<usize>() as f64 / truth.len() as f64;
            prop_assert!(auprc(&scores, &truth).unwrap() >= prevalence);
        }
    }
}
