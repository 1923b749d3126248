//! Desk-scale stand-in for fundus images.
//!
//! Every image is textured noise. Diseased images (class 1) carry a compact
//! cluster of warm bright blobs at a random position; healthy images carry
//! one or two cool blue blobs instead, so brightness alone does not separate
//! the classes but a red-channel detector does.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{imaging, Dataset, DatasetManifest, Instance, ManifestRecord};
use crate::error::{Error, Result};
use crate::tensor::rng::{RngStream, StreamPurpose};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_per_class: usize,
    pub size: usize,
    pub seed: u64,
}

fn add_blob(img: &mut [f64], size: usize, cy: f64, cx: f64, sigma: f64, color: [f64; 3]) {
    let r = (3.0 * sigma).ceil() as isize;
    let (iy, ix) = (cy.round() as isize, cx.round() as isize);
    for y in (iy - r).max(0)..(iy + r + 1).min(size as isize) {
        for x in (ix - r).max(0)..(ix + r + 1).min(size as isize) {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            let a = (-d2 / (2.0 * sigma * sigma)).exp();
            for (c, &col) in color.iter().enumerate() {
                img[(c * size + y as usize) * size + x as usize] += a * col;
            }
        }
    }
}

fn render(label: usize, size: usize, rng: &mut RngStream) -> Tensor {
    let base: Vec<f64> = (0..3).map(|_| rng.uniform(0.25, 0.45)).collect();
    let (fy, fx, phase) = (rng.uniform(0.1, 0.4), rng.uniform(0.1, 0.4), rng.uniform(0.0, 6.3));
    let mut img = vec![0.0; 3 * size * size];
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let texture = 0.05 * (fy * y as f64 + fx * x as f64 + phase).sin();
                img[(c * size + y) * size + x] = base[c] + texture + rng.uniform(-0.12, 0.12);
            }
        }
    }
    let margin = 4.0;
    let hi = size as f64 - 1.0 - margin;
    if label == 1 {
        let (cy, cx) = (rng.uniform(margin, hi), rng.uniform(margin, hi));
        let offsets = [(0.0, 0.0), (-2.0, 2.0), (2.0, 1.0), (1.0, -2.0)];
        let count = 3 + rng.below(2);
        for &(dy, dx) in &offsets[..count] {
            add_blob(&mut img, size, cy + dy, cx + dx, 0.9, [0.7, 0.45, 0.0]);
        }
    } else {
        for _ in 0..1 + rng.below(2) {
            let (cy, cx) = (rng.uniform(margin, hi), rng.uniform(margin, hi));
            add_blob(&mut img, size, cy, cx, 1.1, [0.0, 0.25, 0.6]);
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Tensor::new(vec![3, size, size], img).expect("sized")
}

/// Source-task image: blobs of a random hue, either one broad blob (class
/// 0) or a tight cluster of small ones (class 1). Used to pretrain the trunk
/// on a task disjoint from the target one.
fn render_source(label: usize, size: usize, rng: &mut RngStream) -> Tensor {
    let mut img: Vec<f64> = (0..3 * size * size).map(|_| rng.uniform(0.2, 0.5)).collect();
    let margin = 4.0;
    let hi = size as f64 - 1.0 - margin;
    let color: [f64; 3] = std::array::from_fn(|_| rng.uniform(-0.3, 0.6));
    let (cy, cx) = (rng.uniform(margin, hi), rng.uniform(margin, hi));
    if label == 1 {
        for _ in 0..3 + rng.below(2) {
            let (dy, dx) = (rng.uniform(-2.5, 2.5), rng.uniform(-2.5, 2.5));
            add_blob(&mut img, size, cy + dy, cx + dx, 0.8, color);
        }
    } else {
        add_blob(&mut img, size, cy, cx, 1.8, color);
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Tensor::new(vec![3, size, size], img).expect("sized")
}

/// Balanced source-task dataset for backbone pretraining.
pub fn make_source_synthetic(n_per_class: usize, size: usize, seed: u64) -> Result<Dataset> {
    if size < 16 {
        return Err(Error::invalid(format!("synthetic image size {size} is below 16")));
    }
    let mut rng = RngStream::new(seed, StreamPurpose::Synthetic).substream(1);
    let instances = (0..2 * n_per_class)
        .map(|i| Instance {
            id: i,
            image: render_source(i % 2, size, &mut rng),
            label: i % 2,
        })
        .collect();
    Ok(Dataset::new(instances))
}

/// Balanced synthetic dataset (class 0 first, then class 1, interleaved).
/// Healthy images get grade 0, diseased images a grade in 1..=3.
pub fn make_synthetic(n_per_class: usize, size: usize, seed: u64) -> Result<(Vec<ManifestRecord>, Dataset)> {
    if size < 16 {
        return Err(Error::invalid(format!("synthetic image size {size} is below 16")));
    }
    let mut rng = RngStream::new(seed, StreamPurpose::Synthetic);
    let mut records = Vec::with_capacity(2 * n_per_class);
    let mut instances = Vec::with_capacity(2 * n_per_class);
    for i in 0..2 * n_per_class {
        let label = i % 2;
        let grade = if label == 0 { 0 } else { 1 + rng.below(3) as i64 };
        let image = render(label, size, &mut rng);
        records.push(ManifestRecord {
            path: format!("images/{i:05}.png"),
            grade,
            source: Some("synthetic".into()),
        });
        instances.push(Instance { id: i, image, label });
    }
    Ok((records, Dataset::new(instances)))
}

/// Writes the images as PNGs plus `manifest.csv` under `dir`.
pub fn write_synthetic(dir: &Path, n_per_class: usize, size: usize, seed: u64) -> Result<DatasetManifest> {
    let (records, data) = make_synthetic(n_per_class, size, seed)?;
    std::fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    for (r, inst) in records.iter().zip(data.instances()) {
        imaging::save_png(&dir.join(&r.path), &inst.image)?;
    }
    let manifest = DatasetManifest::new(dir, records)?;
    manifest.write(&dir.join("manifest.csv"))?;
    Ok(manifest)
}
