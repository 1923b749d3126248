//! Manifest-driven datasets, label binarization, stratified splits,
//! augmentation and a synthetic generator.

mod augment;
pub mod imaging;
mod split;
mod synthetic;

pub use augment::{augment, AugmentationSpec};
pub use split::{split_stratified, Splits};
pub use synthetic::{make_source_synthetic, make_synthetic, write_synthetic, SyntheticSpec};

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Grades below `threshold` are healthy (0), the rest diseased (1).
pub fn binarize(grade: i64, threshold: i64) -> Result<usize> {
    if grade < 0 {
        return Err(Error::invalid(format!("negative grade {grade}")));
    }
    Ok(usize::from(grade >= threshold))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    pub grade: i64,
    #[serde(default)]
    pub source: Option<String>,
}

/// CSV manifest with a `path,grade[,source]` header. Relative paths resolve
/// against the manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<ManifestRecord>) -> Result<Self> {
        let m = DatasetManifest {
            root: root.into(),
            records,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
        let records = reader
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestRecord>, _>>()?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(root, records)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        if self.records.is_empty() {
            w.write_record(["path", "grade"])?;
        }
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(&r.path) {
                return Err(Error::invalid(format!("duplicate manifest path {}", r.path)));
            }
            if r.grade < 0 {
                return Err(Error::invalid(format!("negative grade {} for {}", r.grade, r.path)));
            }
        }
        Ok(())
    }

    pub fn labels(&self, threshold: i64) -> Result<Vec<usize>> {
        self.records.iter().map(|r| binarize(r.grade, threshold)).collect()
    }

    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    pub fn split(&self, sizes: (usize, usize, usize), threshold: i64, seed: u64) -> Result<Splits> {
        split_stratified(&self.labels(threshold)?, sizes, seed)
    }

    /// Decodes every image at `size×size`. Instance ids follow manifest order.
    pub fn load(&self, size: usize, threshold: i64) -> Result<Dataset> {
        let labels = self.labels(threshold)?;
        let instances = self
            .records
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(id, (r, label))| {
                let image = imaging::load_and_resize(&self.resolve(r), size)?;
                Ok(Instance { id, image, label })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset::new(instances))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub id: usize,
    /// `C×H×W`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
}

/// Every decoded instance, addressable by id (`id == position`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    instances: Vec<Instance>,
}

impl Dataset {
    pub fn new(mut instances: Vec<Instance>) -> Self {
        for (i, inst) in instances.iter_mut().enumerate() {
            inst.id = i;
        }
        Dataset { instances }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&Instance> {
        self.instances.get(id)
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn select(&self, ids: &[usize]) -> Result<Vec<&Instance>> {
        ids.iter()
            .map(|&id| {
                self.get(id)
                    .ok_or_else(|| Error::invalid(format!("unknown instance id {id}")))
            })
            .collect()
    }

    pub fn label(&self, id: usize) -> Option<usize> {
        self.get(id).map(|i| i.label)
    }
}

/// A dataset with its three splits.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub data: Dataset,
    pub splits: Splits,
}

impl SplitDataset {
    pub fn check(&self, classes: usize) -> Result<()> {
        for c in 0..classes {
            if !self.splits.train.iter().any(|&id| self.data.label(id) == Some(c)) {
                return Err(Error::invalid(format!("class {c} is absent from the train split")));
            }
        }
        Ok(())
    }
}
