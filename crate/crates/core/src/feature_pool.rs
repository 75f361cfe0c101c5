//! Storage pool of historical features for the dynamic re-weighting loop.
//!
//! The pool is a FIFO of `(feature, label)` rows with a fixed capacity (the
//! training-set size). Rows arrive one mini-batch at a time and batch
//! boundaries are remembered, so the oldest batch can be evicted whole even
//! when the final batch of an epoch is ragged.

use std::collections::VecDeque;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{LabeledFeatureSet, VolumeParams};
use crate::imbalance::{imbalance_report_for, DatasetKind, SemanticScaleReport};

/// Dimension of the features stored in the pool.
pub const POOL_FEATURE_DIM: usize = 64;

/// Average-pools each column down to `target_dim` entries with
/// non-overlapping windows of `d / target_dim`.
pub fn reduce_features(batch: &DMatrix<f64>, target_dim: usize) -> Result<DMatrix<f64>> {
    let d = batch.nrows();
    if target_dim == 0 || d == 0 || !d.is_multiple_of(target_dim) {
        return Err(Error::ShapeMismatch(format!(
            "feature dim {d} is not a positive multiple of {target_dim}"
        )));
    }
    let window = d / target_dim;
    if window == 1 {
        return Ok(batch.clone());
    }
    Ok(DMatrix::from_fn(target_dim, batch.ncols(), |r, c| {
        batch.view((r * window, c), (window, 1)).sum() / window as f64
    }))
}

/// Like [`reduce_features`], but first right-pads each column with zeros up to
/// the next multiple of `target_dim`. The flag reports whether padding happened.
pub fn reduce_features_padded(
    batch: &DMatrix<f64>,
    target_dim: usize,
) -> Result<(DMatrix<f64>, bool)> {
    let d = batch.nrows();
    if target_dim == 0 || d == 0 {
        return Err(Error::ShapeMismatch(format!(
            "cannot reduce dim {d} to {target_dim}"
        )));
    }
    let rem = d % target_dim;
    if rem == 0 {
        return reduce_features(batch, target_dim).map(|m| (m, false));
    }
    let padded_dim = d + target_dim - rem;
    let mut padded = DMatrix::zeros(padded_dim, batch.ncols());
    padded.view_mut((0, 0), (d, batch.ncols())).copy_from(batch);
    reduce_features(&padded, target_dim).map(|m| (m, true))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolRow {
    pub feature: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoragePool {
    capacity: usize,
    dim: usize,
    rows: VecDeque<PoolRow>,
    /// Sizes of the stored batches, oldest first. Sums to `rows.len()`.
    batches: VecDeque<usize>,
    inserted: u64,
}

impl StoragePool {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::InvalidParams(format!(
                "pool needs positive capacity and dim, got {capacity} and {dim}"
            )));
        }
        Ok(Self {
            capacity,
            dim,
            rows: VecDeque::with_capacity(capacity),
            batches: VecDeque::new(),
            inserted: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.rows.len() == self.capacity
    }

    /// Total rows ever pushed.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &PoolRow> {
        self.rows.iter()
    }

    pub fn batch_sizes(&self) -> impl ExactSizeIterator<Item = &usize> {
        self.batches.iter()
    }

    /// Appends a batch given as `dim x b` feature columns.
    pub fn push_batch(&mut self, features: &DMatrix<f64>, labels: &[usize]) -> Result<()> {
        let b = features.ncols();
        if b == 0 {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        if features.nrows() != self.dim || labels.len() != b {
            return Err(Error::ShapeMismatch(format!(
                "batch is {}x{} with {} labels, pool dim is {}",
                features.nrows(),
                b,
                labels.len(),
                self.dim
            )));
        }
        if self.rows.len() + b > self.capacity {
            return Err(Error::CapacityExceeded {
                capacity: self.capacity,
                held: self.rows.len(),
                pushed: b,
            });
        }
        for (col, &label) in features.column_iter().zip(labels) {
            self.rows.push_back(PoolRow {
                feature: col.iter().copied().collect(),
                label,
            });
        }
        self.batches.push_back(b);
        self.inserted += b as u64;
        Ok(())
    }

    /// Removes the `count` oldest rows, splitting a stored batch if needed.
    pub fn pop_oldest(&mut self, count: usize) -> Result<()> {
        if count > self.rows.len() {
            return Err(Error::PoolUnderflow {
                requested: count,
                held: self.rows.len(),
            });
        }
        self.rows.drain(..count);
        let mut left = count;
        while left > 0 {
            let front = self.batches.front_mut().expect("batch sizes track rows");
            if *front <= left {
                left -= *front;
                self.batches.pop_front();
            } else {
                *front -= left;
                left = 0;
            }
        }
        Ok(())
    }

    /// Removes the oldest stored batch whole and returns its size.
    pub fn pop_oldest_batch(&mut self) -> Result<usize> {
        let size = *self.batches.front().ok_or(Error::PoolUnderflow {
            requested: 1,
            held: 0,
        })?;
        self.pop_oldest(size)?;
        Ok(size)
    }

    pub fn to_feature_set(&self) -> Result<LabeledFeatureSet> {
        if self.rows.is_empty() {
            return Err(Error::InvalidInput("pool is empty".into()));
        }
        let values = DMatrix::from_fn(self.dim, self.rows.len(), |r, c| self.rows[c].feature[r]);
        LabeledFeatureSet::new(values, self.rows.iter().map(|r| r.label).collect())
    }

    /// CSV dump with header `label,f0,...,f{dim-1}`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label");
        for i in 0..self.dim {
            let _ = write!(out, ",f{i}");
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{}", row.label);
            for v in &row.feature {
                let _ = write!(out, ",{v:?}");
            }
            out.push('\n');
        }
        out
    }
}

/// Per-class semantic scales of the pool contents for classes `0..classes`.
pub fn pool_scales(
    pool: &StoragePool,
    classes: usize,
    alpha: f64,
    params: &VolumeParams,
    kind: DatasetKind,
) -> Result<SemanticScaleReport> {
    let mut counts = vec![0usize; classes];
    for row in pool.rows() {
        if row.label >= classes {
            return Err(Error::InvalidLabel {
                label: row.label,
                classes,
            });
        }
        counts[row.label] += 1;
    }
    if let Some(missing) = counts.iter().position(|&n| n == 0) {
        return Err(Error::MissingClass(missing));
    }
    let set = pool.to_feature_set()?;
    let ids: Vec<usize> = (0..classes).collect();
    imbalance_report_for(&set, &ids, params, alpha, kind)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    /// Epoch 1: fill the pool.
    Fill,
    /// Epochs `2..=n`: refresh the pool under the base loss.
    Refresh,
    /// Epochs `> n`: re-weight the loss from pool scales.
    Reweight,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Fill => 1,
            Stage::Refresh => 2,
            Stage::Reweight => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub warm_epochs: usize,
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self { warm_epochs: 5 }
    }
}

impl StageSchedule {
    /// Stage of a 1-based epoch.
    pub fn stage(&self, epoch: usize) -> Stage {
        if epoch <= 1 {
            Stage::Fill
        } else if epoch <= self.warm_epochs {
            Stage::Refresh
        } else {
            Stage::Reweight
        }
    }
}
