//! Interference-weighted semantic scale and the per-class imbalance report.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{check_finite, feature_volume, LabeledFeatureSet, VolumeParams};
use crate::reweight::dsb_weights;

/// Floor applied to a smoothed weight `W_i` before it multiplies `S'_i`.
pub const SMOOTHED_WEIGHT_FLOOR: f64 = 1e-6;
/// Fraction of the largest raw scale given to degenerate classes.
pub const DEGENERATE_SCALE_FRACTION: f64 = 1e-6;

/// Whether a dataset is long-tailed; selects the default smoothing `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    LongTailed,
    Balanced,
}

impl DatasetKind {
    pub fn default_alpha(self) -> f64 {
        match self {
            DatasetKind::LongTailed => 2.0,
            DatasetKind::Balanced => 1.0,
        }
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "long-tailed" => Ok(Self::LongTailed),
            "balanced" => Ok(Self::Balanced),
            other => Err(Error::InvalidParams(format!(
                "dataset kind must be `long-tailed` or `balanced`, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassCenters {
    pub class_ids: Vec<usize>,
    pub centers: Vec<DVector<f64>>,
}

impl ClassCenters {
    pub fn new(class_ids: Vec<usize>, centers: Vec<DVector<f64>>) -> Result<Self> {
        if centers.is_empty() || centers.len() != class_ids.len() {
            return Err(Error::InvalidInput(format!(
                "{} centers for {} class ids",
                centers.len(),
                class_ids.len()
            )));
        }
        let dim = centers[0].len();
        for c in &centers {
            if c.len() != dim {
                return Err(Error::ShapeMismatch("centers differ in dimension".into()));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput("non-finite center".into()));
            }
        }
        Ok(Self { class_ids, centers })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

/// Mean feature of every class present in the dataset, ordered by class id.
pub fn class_centers(dataset: &LabeledFeatureSet) -> Result<ClassCenters> {
    class_centers_for(dataset, &dataset.class_ids())
}

fn class_centers_for(dataset: &LabeledFeatureSet, class_ids: &[usize]) -> Result<ClassCenters> {
    if class_ids.is_empty() {
        return Err(Error::InvalidInput("no classes".into()));
    }
    let mut centers = Vec::with_capacity(class_ids.len());
    for &id in class_ids {
        let cols = dataset.class_indices(id);
        if cols.is_empty() {
            return Err(Error::InvalidInput(format!("class {id} has no samples")));
        }
        let mut sum = DVector::zeros(dataset.dim());
        for &c in &cols {
            sum += dataset.values().column(c);
        }
        centers.push(sum / cols.len() as f64);
    }
    ClassCenters::new(class_ids.to_vec(), centers)
}

/// `w_i = 1/(C-1) * sum_j |o_i - o_j|_2`.
pub fn interference_weights(centers: &ClassCenters) -> Result<Vec<f64>> {
    let c = centers.len();
    if c < 2 {
        return Err(Error::NeedsTwoClasses(c));
    }
    Ok(centers
        .centers
        .iter()
        .map(|oi| {
            centers
                .centers
                .iter()
                .map(|oj| (oi - oj).norm())
                .sum::<f64>()
                / (c - 1) as f64
        })
        .collect())
}

/// Intermediate and final values of `S = S'_norm ⊙ log2(alpha + w_norm)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedScale {
    pub raw_normalized: Vec<f64>,
    pub weights_normalized: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub combined: Vec<f64>,
    /// Raw scales that were clamped up to the degenerate floor.
    pub degenerate: Vec<bool>,
}

fn max_normalize(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        values.iter().map(|v| v / max).collect()
    } else {
        vec![0.0; values.len()]
    }
}

pub fn combined_scale(raw_scales: &[f64], weights: &[f64], alpha: f64) -> Result<CombinedScale> {
    if !(alpha.is_finite() && alpha >= 1.0) {
        return Err(Error::InvalidParams(format!(
            "alpha must be >= 1, got {alpha}"
        )));
    }
    if raw_scales.len() != weights.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} raw scales, {} weights",
            raw_scales.len(),
            weights.len()
        )));
    }
    if raw_scales.is_empty() {
        return Err(Error::InvalidInput("no classes".into()));
    }
    if raw_scales
        .iter()
        .chain(weights)
        .any(|v| !v.is_finite() || *v < 0.0)
    {
        return Err(Error::InvalidInput(
            "scales and weights must be finite and non-negative".into(),
        ));
    }

    let max_raw = raw_scales.iter().copied().fold(0.0, f64::max);
    let degenerate: Vec<bool> = raw_scales.iter().map(|&s| s <= 0.0).collect();
    let clamped: Vec<f64> = if max_raw > 0.0 {
        raw_scales
            .iter()
            .map(|&s| {
                if s <= 0.0 {
                    DEGENERATE_SCALE_FRACTION * max_raw
                } else {
                    s
                }
            })
            .collect()
    } else {
        // Every class degenerate: nothing distinguishes them.
        vec![1.0; raw_scales.len()]
    };
    let raw_normalized = max_normalize(&clamped);
    let weights_normalized = max_normalize(weights);
    let smoothed: Vec<f64> = weights_normalized
        .iter()
        .map(|w| (alpha + w).log2().max(SMOOTHED_WEIGHT_FLOOR))
        .collect();
    let combined = raw_normalized
        .iter()
        .zip(&smoothed)
        .map(|(s, w)| s * w)
        .collect();
    Ok(CombinedScale {
        raw_normalized,
        weights_normalized,
        smoothed,
        combined,
        degenerate,
    })
}

/// Pearson product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::InvalidInput("need at least two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateInput("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScale {
    pub class_id: usize,
    pub sample_count: usize,
    /// Max-normalized raw scale `S'_i`.
    pub raw_scale: f64,
    /// Raw scale before normalization.
    pub raw_volume: f64,
    pub center: Vec<f64>,
    pub interference_weight: f64,
    pub smoothed_weight: f64,
    pub combined_scale: f64,
    pub loss_weight: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticScaleReport {
    pub alpha: f64,
    pub epsilon: f64,
    pub dataset_kind: DatasetKind,
    pub classes: Vec<ClassScale>,
}

impl SemanticScaleReport {
    pub fn loss_weights(&self) -> Vec<f64> {
        self.classes.iter().map(|c| c.loss_weight).collect()
    }

    pub fn combined_scales(&self) -> Vec<f64> {
        self.classes.iter().map(|c| c.combined_scale).collect()
    }

    pub fn raw_scales(&self) -> Vec<f64> {
        self.classes.iter().map(|c| c.raw_scale).collect()
    }
}

/// Full pipeline over every class present in `dataset`.
pub fn imbalance_report(
    dataset: &LabeledFeatureSet,
    params: &VolumeParams,
    alpha: f64,
    kind: DatasetKind,
) -> Result<SemanticScaleReport> {
    imbalance_report_for(dataset, &dataset.class_ids(), params, alpha, kind)
}

/// Same as [`imbalance_report`] over an explicit, ordered list of class ids;
/// each must have at least one sample.
pub fn imbalance_report_for(
    dataset: &LabeledFeatureSet,
    class_ids: &[usize],
    params: &VolumeParams,
    alpha: f64,
    kind: DatasetKind,
) -> Result<SemanticScaleReport> {
    params.validate()?;
    check_finite(dataset.values())?;
    if class_ids.len() < 2 {
        return Err(Error::NeedsTwoClasses(class_ids.len()));
    }
    let centers = class_centers_for(dataset, class_ids)?;

    // Each class is independent; collect() keeps class order.
    let per_class: Vec<(usize, f64)> = class_ids
        .par_iter()
        .map(|&id| {
            let m = dataset.class_matrix(id);
            feature_volume(&m, params).map(|v| (m.ncols(), v))
        })
        .collect::<Result<_>>()?;
    let raw: Vec<f64> = per_class.iter().map(|p| p.1).collect();

    let w = interference_weights(&centers)?;
    let combined = combined_scale(&raw, &w, alpha)?;
    let weights = dsb_weights(&combined.combined)?;

    let classes = class_ids
        .iter()
        .enumerate()
        .map(|(i, &id)| ClassScale {
            class_id: id,
            sample_count: per_class[i].0,
            raw_scale: combined.raw_normalized[i],
            raw_volume: raw[i],
            center: centers.centers[i].iter().copied().collect(),
            interference_weight: w[i],
            smoothed_weight: combined.smoothed[i],
            combined_scale: combined.combined[i],
            loss_weight: weights.per_class[i],
            degenerate: combined.degenerate[i],
        })
        .collect();
    Ok(SemanticScaleReport {
        alpha,
        epsilon: params.epsilon,
        dataset_kind: kind,
        classes,
    })
}
