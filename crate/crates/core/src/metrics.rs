//! Dataset merging, class-balance statistics and segmentation evaluation.
//!
//! Class counts are image-level: a class is counted once for every image that
//! contains it. Void pixels never contribute to any statistic.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ClassId, DatasetIndex, LabelMask, LabelSchema, VOID};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("sample id {0} exists in both datasets")]
    IdCollision(String),
    #[error("datasets use different label schemas")]
    SchemaMismatch,
    #[error("all class counts are zero")]
    ZeroCounts,
    #[error("prediction is {pred:?} but ground truth is {gt:?}")]
    DimensionMismatch { pred: (u32, u32), gt: (u32, u32) },
    #[error("confusion matrices have different sizes ({0} vs {1})")]
    SizeMismatch(usize, usize),
    #[error("mask value {0} does not fit a {1}-class confusion matrix")]
    OutOfRange(u8, usize),
    #[error("no class has a defined IoU")]
    NoDefinedClass,
}

/// `origin` followed by `gen`.
pub fn merge_datasets(origin: &DatasetIndex, gen: &DatasetIndex) -> Result<DatasetIndex, MetricsError> {
    if origin.schema != gen.schema {
        return Err(MetricsError::SchemaMismatch);
    }
    let ids: HashSet<&str> = origin.ids().collect();
    if let Some(dup) = gen.ids().find(|id| ids.contains(id)) {
        return Err(MetricsError::IdCollision(dup.to_string()));
    }
    let mut merged = origin.clone();
    merged.samples.extend(gen.samples.iter().cloned());
    Ok(merged)
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassCounts(pub BTreeMap<ClassId, u64>);

impl ClassCounts {
    pub fn from_counts(counts: impl IntoIterator<Item = u64>) -> Self {
        Self(counts.into_iter().enumerate().map(|(i, c)| (ClassId(i as u8 + 1), c)).collect())
    }

    pub fn total(&self) -> u64 {
        self.0.values().sum()
    }

    pub fn get(&self, class: ClassId) -> u64 {
        self.0.get(&class).copied().unwrap_or(0)
    }

    pub fn add(&self, other: &ClassCounts) -> ClassCounts {
        let mut out = self.clone();
        for (&c, &n) in &other.0 {
            *out.0.entry(c).or_default() += n;
        }
        out
    }
}

/// Images per foreground schema class; classes absent from the index count zero.
pub fn class_counts(index: &DatasetIndex) -> ClassCounts {
    let mut counts: BTreeMap<ClassId, u64> = index.schema.foreground().map(|c| (c, 0)).collect();
    for sample in &index.samples {
        for &c in &sample.classes {
            *counts.entry(c).or_default() += 1;
        }
    }
    ClassCounts(counts)
}

/// Shannon entropy in bits of the normalized counts.
pub fn entropy(counts: &ClassCounts) -> Result<f64, MetricsError> {
    let total = counts.total();
    if total == 0 {
        return Err(MetricsError::ZeroCounts);
    }
    let total = total as f64;
    Ok(counts
        .0
        .values()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum())
}

/// Coefficient of variation (population σ / μ) of the counts, zeros included.
pub fn imbalance_ratio(counts: &ClassCounts) -> Result<f64, MetricsError> {
    if counts.total() == 0 {
        return Err(MetricsError::ZeroCounts);
    }
    let n = counts.0.len() as f64;
    let mean = counts.total() as f64 / n;
    let var = counts.0.values().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt() / mean)
}

/// Rows are ground truth, columns prediction. Ground-truth void pixels are
/// skipped; predicted void on a labelled pixel is a miss that counts toward
/// the ground-truth row only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    cells: Vec<u64>,
    void_predictions: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self { k, cells: vec![0; k * k], void_predictions: vec![0; k] }
    }

    pub fn for_schema(schema: &LabelSchema) -> Self {
        Self::new(schema.num_slots())
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.cells[gt * self.k + pred]
    }

    pub fn row_total(&self, c: usize) -> u64 {
        (0..self.k).map(|j| self.get(c, j)).sum::<u64>() + self.void_predictions[c]
    }

    pub fn col_total(&self, c: usize) -> u64 {
        (0..self.k).map(|i| self.get(i, c)).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.cells.iter().all(|&c| c == 0) && self.void_predictions.iter().all(|&c| c == 0)
    }

    /// Adds one prediction / ground-truth pair.
    pub fn accumulate(&mut self, pred: &LabelMask, gt: &LabelMask) -> Result<(), MetricsError> {
        if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
            return Err(MetricsError::DimensionMismatch {
                pred: (pred.width(), pred.height()),
                gt: (gt.width(), gt.height()),
            });
        }
        for (&p, &g) in pred.pixels().iter().zip(gt.pixels()) {
            if g == VOID {
                continue;
            }
            let g = g as usize;
            if g >= self.k {
                return Err(MetricsError::OutOfRange(g as u8, self.k));
            }
            if p == VOID {
                self.void_predictions[g] += 1;
                continue;
            }
            if p as usize >= self.k {
                return Err(MetricsError::OutOfRange(p, self.k));
            }
            self.cells[g * self.k + p as usize] += 1;
        }
        Ok(())
    }

    /// Elementwise sum, for sharded accumulation.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), MetricsError> {
        if self.k != other.k {
            return Err(MetricsError::SizeMismatch(self.k, other.k));
        }
        self.cells.iter_mut().zip(&other.cells).for_each(|(a, b)| *a += b);
        self.void_predictions.iter_mut().zip(&other.void_predictions).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

pub fn confusion_matrix(pred: &LabelMask, gt: &LabelMask, k: usize) -> Result<ConfusionMatrix, MetricsError> {
    let mut cm = ConfusionMatrix::new(k);
    cm.accumulate(pred, gt)?;
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class: ClassId,
    /// Percentage; `None` when the class never occurs in prediction or ground truth.
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    pub per_class: Vec<ClassIou>,
    pub miou: f64,
}

/// Per-class IoU (percent) and their mean over classes with a non-zero union.
pub fn miou(cm: &ConfusionMatrix) -> Result<MiouReport, MetricsError> {
    let per_class: Vec<ClassIou> = (0..cm.k)
        .map(|c| {
            let tp = cm.get(c, c);
            let union = cm.row_total(c) + cm.col_total(c) - tp;
            ClassIou { class: ClassId(c as u8), iou: (union > 0).then(|| 100.0 * tp as f64 / union as f64) }
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().filter_map(|c| c.iou).collect();
    if defined.is_empty() {
        return Err(MetricsError::NoDefinedClass);
    }
    let miou = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(MiouReport { per_class, miou })
}

/// Balance statistics of one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub samples: usize,
    pub class_counts: BTreeMap<String, u64>,
    pub entropy: Option<f64>,
    pub imbalance_ratio: Option<f64>,
}

impl DatasetStats {
    pub fn of(index: &DatasetIndex) -> Self {
        Self::from_counts(index.len(), &class_counts(index), &index.schema)
    }

    pub fn from_counts(samples: usize, counts: &ClassCounts, schema: &LabelSchema) -> Self {
        let class_counts = counts
            .0
            .iter()
            .map(|(&c, &n)| (schema.name(c).map(str::to_string).unwrap_or_else(|| c.to_string()), n))
            .collect();
        Self { samples, class_counts, entropy: entropy(counts).ok(), imbalance_ratio: imbalance_ratio(counts).ok() }
    }
}
