use serde::{Deserialize, Serialize};

use super::Provenance;
use crate::data::imaging::resize_bilinear;
use crate::error::Result;
use crate::model::{PassOptions, ProtoModel};
use crate::tensor::{softmax_rows, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeEvidence {
    pub prototype_id: usize,
    pub class: usize,
    /// Global max of `activation_map`.
    pub score: f64,
    /// `[x, y, w, h]` in input pixels: receptive field of the best cell.
    #[serde(rename = "box")]
    pub bbox: [usize; 4],
    /// `[row, col]` of the best latent cell.
    pub cell: [usize; 2],
    /// Similarity map over the latent grid, row-major.
    pub activation_map: Vec<Vec<f64>>,
    pub source: Option<Provenance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub instance_id: usize,
    pub predicted_class: usize,
    pub probabilities: Vec<f64>,
    /// Set when the bank has not been pushed yet, so `source` is empty.
    pub provenance_missing: bool,
    pub prototypes: Vec<PrototypeEvidence>,
}

impl Explanation {
    /// Activation map of prototype `j`, bilinearly upsampled to the input
    /// resolution.
    pub fn upsampled_map(&self, j: usize, size: usize) -> Vec<f64> {
        let map = &self.prototypes[j].activation_map;
        let (h, w) = (map.len(), map.first().map_or(0, Vec::len));
        let flat: Vec<f64> = map.iter().flatten().copied().collect();
        resize_bilinear(&flat, h, w, size, size)
    }

    /// Evidence sorted by score, strongest first.
    pub fn ranked(&self) -> Vec<&PrototypeEvidence> {
        let mut v: Vec<_> = self.prototypes.iter().collect();
        v.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.prototype_id.cmp(&b.prototype_id)));
        v
    }
}

/// Prototype evidence for one `C×H×W` image.
pub fn explain(model: &ProtoModel, instance_id: usize, image: &Tensor) -> Result<Explanation> {
    let batch = Tensor::stack(&[image])?;
    let pass = model.forward(&batch, None, &mut PassOptions::eval())?;
    let g = &pass.graph;
    let maps = g.value(pass.activations);
    let scores = g.value(pass.scores);
    let probs = softmax_rows(g.value(pass.logits)).into_data();
    let (gh, gw) = (maps.shape()[2], maps.shape()[3]);
    let (ph, pw) = model.bank.patch_shape();
    let rf = model.config.backbone.receptive_field();
    let size = model.config.backbone.input_size;

    let prototypes = (0..model.bank.len())
        .map(|j| {
            let map = &maps.data()[j * gh * gw..(j + 1) * gh * gw];
            // first maximum in row-major order, matching global max pooling
            let best = map
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > map[b] { i } else { b });
            let (row, col) = (best / gw, best % gw);
            PrototypeEvidence {
                prototype_id: j,
                class: model.bank.class_of[j],
                score: scores.data()[j],
                bbox: rf.cell_box(row, col, ph, pw, size),
                cell: [row, col],
                activation_map: map.chunks(gw).map(<[f64]>::to_vec).collect(),
                source: model.bank.provenance[j],
            }
        })
        .collect();
    let predicted_class = probs
        .iter()
        .enumerate()
        .fold(0, |b, (i, &p)| if p > probs[b] { i } else { b });
    Ok(Explanation {
        instance_id,
        predicted_class,
        probabilities: probs,
        provenance_missing: !model.bank.has_provenance(),
        prototypes,
    })
}
