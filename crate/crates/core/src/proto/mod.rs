//! Prototype bank, patch distances, auxiliary losses, push projection and
//! explanations.
//!
//! Distances are squared L2 between a prototype and every latent window;
//! similarity is `log((d + 1)/(d + ε))`, which is strictly decreasing in `d`
//! and equals `ln(1/ε)` at an exact match.

mod explain;
mod push;

pub use explain::{explain, Explanation, PrototypeEvidence};
pub use push::{push, PushReport};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::rng::RngStream;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrototypeConfig {
    #[serde(default = "default_per_class")]
    pub per_class: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "one")]
    pub height: usize,
    #[serde(default = "one")]
    pub width: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Initial last-layer weight from a prototype to its own class.
    #[serde(default = "default_own_weight")]
    pub own_class_weight: f64,
    /// Initial last-layer weight to every other class.
    #[serde(default = "default_other_weight")]
    pub other_class_weight: f64,
}

fn default_per_class() -> usize {
    6
}
fn default_classes() -> usize {
    2
}
fn one() -> usize {
    1
}
fn default_epsilon() -> f64 {
    1e-4
}
fn default_own_weight() -> f64 {
    1.0
}
fn default_other_weight() -> f64 {
    -0.5
}

impl Default for PrototypeConfig {
    fn default() -> Self {
        PrototypeConfig {
            per_class: default_per_class(),
            num_classes: default_classes(),
            height: 1,
            width: 1,
            epsilon: default_epsilon(),
            own_class_weight: default_own_weight(),
            other_class_weight: default_other_weight(),
        }
    }
}

impl PrototypeConfig {
    pub fn total(&self) -> usize {
        self.per_class * self.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_class == 0 || self.num_classes < 2 {
            return Err(Error::Config(
                "prototypes need per_class >= 1 and num_classes >= 2".into(),
            ));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("prototype height/width must be >= 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "prototypes.epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Training instance and latent cell a prototype was projected onto.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub instance_id: usize,
    /// `[row, col]` of the top-left latent cell of the patch.
    pub cell: [usize; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    /// `m×D×H₁×W₁`.
    pub prototypes: Tensor,
    pub class_of: Vec<usize>,
    pub epsilon: f64,
    pub provenance: Vec<Option<Provenance>>,
}

impl PrototypeBank {
    /// Prototypes drawn uniformly from (0, 1), the range of the latent grid.
    /// Class `c` owns prototypes `c·per_class .. (c+1)·per_class`.
    pub fn random(cfg: &PrototypeConfig, depth: usize, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let m = cfg.total();
        let prototypes = Tensor::from_fn(&[m, depth, cfg.height, cfg.width], |_| rng.next_f64());
        Ok(PrototypeBank {
            prototypes,
            class_of: (0..m).map(|j| j / cfg.per_class).collect(),
            epsilon: cfg.epsilon,
            provenance: vec![None; m],
        })
    }

    pub fn len(&self) -> usize {
        self.class_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_of.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.prototypes.shape()[1]
    }

    pub fn patch_shape(&self) -> (usize, usize) {
        (self.prototypes.shape()[2], self.prototypes.shape()[3])
    }

    pub fn prototype(&self, j: usize) -> &[f64] {
        let n = self.prototypes.numel() / self.len();
        &self.prototypes.data()[j * n..(j + 1) * n]
    }

    pub fn has_provenance(&self) -> bool {
        self.provenance.iter().all(Option::is_some)
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        for &y in labels {
            if !self.class_of.contains(&y) {
                return Err(Error::invalid(format!("class {y} owns no prototypes")));
            }
            if self.class_of.iter().all(|&c| c == y) {
                return Err(Error::invalid(format!(
                    "every prototype belongs to class {y}; separation is undefined"
                )));
            }
        }
        Ok(())
    }

    fn own_mask(&self, labels: &[usize]) -> Vec<bool> {
        labels
            .iter()
            .flat_map(|&y| self.class_of.iter().map(move |&c| c == y))
            .collect()
    }
}

/// Weights of the auxiliary terms in the training objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub cluster: f64,
    pub separation: f64,
    pub l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cluster: 0.8,
            separation: 0.08,
            l1: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("cluster", self.cluster),
            ("separation", self.separation),
            ("l1", self.l1),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("loss.{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// `m×C` last layer: `own` to the prototype's class, `other` elsewhere.
pub fn init_last_layer_with(bank: &PrototypeBank, classes: usize, own: f64, other: f64) -> Tensor {
    let m = bank.len();
    Tensor::from_fn(&[m, classes], |i| {
        if bank.class_of[i / classes] == i % classes {
            own
        } else {
            other
        }
    })
}

pub fn init_last_layer(bank: &PrototypeBank, classes: usize) -> Tensor {
    init_last_layer_with(bank, classes, default_own_weight(), default_other_weight())
}

/// `log((d + 1)/(d + ε))` for a single non-negative distance.
pub fn similarity(d: f64, eps: f64) -> Result<f64> {
    if !(d >= 0.0) {
        return Err(Error::invalid(format!("similarity of negative distance {d}")));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("similarity epsilon {eps} must be positive")));
    }
    Ok(crate::tensor::graph_similarity(d, eps))
}

/// `B×m×H'×W'` squared distances between each prototype and each latent window.
pub fn patch_distances(latent: &Tensor, bank: &PrototypeBank) -> Result<Tensor> {
    if latent.ndim() != 4 || latent.shape()[1] != bank.depth() {
        return Err(Error::Shape {
            op: "patch_distances",
            left: latent.shape().to_vec(),
            right: bank.prototypes.shape().to_vec(),
        });
    }
    let mut g = Graph::new();
    let z = g.constant(latent.clone());
    let p = g.constant(bank.prototypes.clone());
    let d = g.patch_distances(z, p)?;
    Ok(g.value(d).clone())
}

/// Logits `scores · W` (no bias); softmax is applied downstream.
pub fn prototype_logits(scores: &Tensor, last_layer: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let s = g.constant(scores.clone());
    let w = g.constant(last_layer.clone());
    let l = g.dense(s, w, None)?;
    Ok(g.value(l).clone())
}

/// Mean over the batch of the smallest distance to an own-class prototype.
pub fn cluster_cost(g: &mut Graph, min_dists: Var, labels: &[usize], bank: &PrototypeBank) -> Result<Var> {
    bank.check_labels(labels)?;
    let mask = bank.own_mask(labels);
    let per_row = g.masked_row_min(min_dists, &mask)?;
    Ok(g.mean(per_row))
}

/// Mean over the batch of the smallest distance to an other-class
/// prototype. Larger is better; it enters the objective with a minus sign.
pub fn separation_cost(g: &mut Graph, min_dists: Var, labels: &[usize], bank: &PrototypeBank) -> Result<Var> {
    bank.check_labels(labels)?;
    let mask: Vec<bool> = bank.own_mask(labels).into_iter().map(|b| !b).collect();
    let per_row = g.masked_row_min(min_dists, &mask)?;
    Ok(g.mean(per_row))
}

/// L1 norm of last-layer entries connecting a prototype to a class other
/// than its own.
pub fn last_layer_l1(g: &mut Graph, last_layer: Var, bank: &PrototypeBank) -> Result<Var> {
    let classes = g.shape(last_layer)[1];
    let mask: Vec<bool> = (0..bank.len() * classes)
        .map(|i| bank.class_of[i / classes] != i % classes)
        .collect();
    g.masked_l1(last_layer, &mask)
}

/// Value-level helpers over plain tensors.
pub mod eval {
    use super::*;

    pub fn cluster_cost(min_dists: &Tensor, labels: &[usize], bank: &PrototypeBank) -> Result<f64> {
        let mut g = Graph::new();
        let d = g.constant(min_dists.clone());
        let c = super::cluster_cost(&mut g, d, labels, bank)?;
        Ok(g.value(c).item())
    }

    pub fn separation_cost(min_dists: &Tensor, labels: &[usize], bank: &PrototypeBank) -> Result<f64> {
        let mut g = Graph::new();
        let d = g.constant(min_dists.clone());
        let c = super::separation_cost(&mut g, d, labels, bank)?;
        Ok(g.value(c).item())
    }

    pub fn last_layer_l1(last_layer: &Tensor, bank: &PrototypeBank) -> Result<f64> {
        let mut g = Graph::new();
        let w = g.constant(last_layer.clone());
        let c = super::last_layer_l1(&mut g, w, bank)?;
        Ok(g.value(c).item())
    }
}
