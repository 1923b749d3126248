use serde::{Deserialize, Serialize};

use super::Provenance;
use crate::data::Instance;
use crate::error::{Error, Result};
use crate::model::ProtoModel;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PushReport {
    /// Squared distance each prototype travelled.
    pub moved: Vec<f64>,
    pub provenance: Vec<Provenance>,
}

/// Latent grids for `data`, computed in batches with dropout off.
pub(crate) fn latents(model: &ProtoModel, data: &[&Instance], batch_size: usize) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch_size.max(1)) {
        let images: Vec<&Tensor> = chunk.iter().map(|i| &i.image).collect();
        let z = model.features(&Tensor::stack(&images)?)?;
        out.extend((0..chunk.len()).map(|b| z.index_outer(b)));
    }
    Ok(out)
}

/// Replaces every prototype by the nearest latent patch among the labeled
/// instances of its own class. Ties keep the first candidate in
/// `(instance order, row, col)` order.
pub fn push(model: &mut ProtoModel, data: &[&Instance], batch_size: usize) -> Result<PushReport> {
    let classes = model.num_classes();
    if let Some(c) = (0..classes).find(|c| !data.iter().any(|i| i.label == *c)) {
        return Err(Error::EmptyClass(c));
    }
    let z = latents(model, data, batch_size)?;
    let bank = &model.bank;
    let (ph, pw) = bank.patch_shape();
    let depth = bank.depth();
    let (h, w) = (z[0].shape()[1], z[0].shape()[2]);
    let mut moved = Vec::with_capacity(bank.len());
    let mut provenance = Vec::with_capacity(bank.len());
    let mut updated = bank.prototypes.clone();
    let stride = depth * ph * pw;

    for j in 0..bank.len() {
        let proto = bank.prototype(j);
        let mut best: Option<(f64, usize, usize, usize)> = None;
        for (n, inst) in data.iter().enumerate() {
            if inst.label != bank.class_of[j] {
                continue;
            }
            let zd = z[n].data();
            for y in 0..=h - ph {
                for x in 0..=w - pw {
                    let mut dist = 0.0;
                    for d in 0..depth {
                        for dy in 0..ph {
                            for dx in 0..pw {
                                let diff = zd[(d * h + y + dy) * w + x + dx] - proto[(d * ph + dy) * pw + dx];
                                dist += diff * diff;
                            }
                        }
                    }
                    if best.is_none_or(|b| dist < b.0) {
                        best = Some((dist, n, y, x));
                    }
                }
            }
        }
        let (dist, n, y, x) = best.expect("class has instances");
        let zd = z[n].data();
        let dst = &mut updated.data_mut()[j * stride..(j + 1) * stride];
        for d in 0..depth {
            for dy in 0..ph {
                for dx in 0..pw {
                    dst[(d * ph + dy) * pw + dx] = zd[(d * h + y + dy) * w + x + dx];
                }
            }
        }
        moved.push(dist);
        provenance.push(Provenance {
            instance_id: data[n].id,
            cell: [y, x],
        });
    }
    model.bank.prototypes = updated;
    model.bank.provenance = provenance.iter().copied().map(Some).collect();
    Ok(PushReport { moved, provenance })
}
