//! Semantic-scale-balanced loss weights and the weighted loss family.
//!
//! Every loss here is a base loss multiplied by a per-class factor derived from
//! the inverse combined semantic scale of the sample's class. Losses use the
//! natural logarithm.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalized per-class weights `alpha_i ∝ 1 / S_i` with `sum(alpha) = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsbWeights {
    pub per_class: Vec<f64>,
    pub source_scales: Vec<f64>,
}

/// How a normalized weight is turned into a per-sample loss multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightScaling {
    /// Use `alpha_y` as is.
    Normalized,
    /// Use `C * alpha_y`, so uniform weights give a multiplier of exactly 1.
    MeanOne,
}

impl DsbWeights {
    pub fn uniform(classes: usize) -> Self {
        Self {
            per_class: vec![1.0 / classes as f64; classes],
            source_scales: vec![1.0; classes],
        }
    }

    pub fn len(&self) -> usize {
        self.per_class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_class.is_empty()
    }

    pub fn multiplier(&self, label: usize, scaling: WeightScaling) -> Result<f64> {
        let w = *self.per_class.get(label).ok_or(Error::InvalidLabel {
            label,
            classes: self.len(),
        })?;
        Ok(match scaling {
            WeightScaling::Normalized => w,
            WeightScaling::MeanOne => w * self.len() as f64,
        })
    }

    pub fn multipliers(&self, scaling: WeightScaling) -> Vec<f64> {
        match scaling {
            WeightScaling::Normalized => self.per_class.clone(),
            WeightScaling::MeanOne => {
                let c = self.len() as f64;
                self.per_class.iter().map(|w| w * c).collect()
            }
        }
    }
}

/// `alpha_i = (1 / S_i) / sum_j (1 / S_j)`.
pub fn dsb_weights(scales: &[f64]) -> Result<DsbWeights> {
    if scales.is_empty() {
        return Err(Error::InvalidInput("no scales given".into()));
    }
    if let Some((index, &value)) = scales
        .iter()
        .enumerate()
        .find(|(_, s)| !(s.is_finite() && **s > 0.0))
    {
        return Err(Error::InvalidScale { index, value });
    }
    // Factor out the smallest scale so the inverses stay O(1).
    let min = scales.iter().copied().fold(f64::INFINITY, f64::min);
    let inv: Vec<f64> = scales.iter().map(|s| min / s).collect();
    let total: f64 = inv.iter().sum();
    Ok(DsbWeights {
        per_class: inv.iter().map(|v| v / total).collect(),
        source_scales: scales.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[serde(alias = "ce")]
    CrossEntropy,
    Focal,
    #[serde(alias = "nsm")]
    NormSoftmax,
    #[serde(alias = "st")]
    SoftTriple,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossParams {
    pub kind: LossKind,
    pub focal_gamma: f64,
    /// NormSoftmax temperature.
    pub temperature: f64,
    /// SoftTriple scaling factor.
    pub lambda: f64,
    /// SoftTriple margin.
    pub delta: f64,
    /// SoftTriple entropy scale over the centers of one class.
    pub entropy_scale: f64,
    pub centers_per_class: usize,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            kind: LossKind::CrossEntropy,
            focal_gamma: 2.0,
            temperature: 0.1,
            lambda: 20.0,
            delta: 0.01,
            entropy_scale: 0.1,
            centers_per_class: 1,
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidParams(format!(
                    "{name} must be positive, got {v}"
                )))
            }
        };
        if !(self.focal_gamma.is_finite() && self.focal_gamma >= 0.0) {
            return Err(Error::InvalidParams(format!(
                "focal gamma must be >= 0, got {}",
                self.focal_gamma
            )));
        }
        positive("temperature", self.temperature)?;
        positive("lambda", self.lambda)?;
        positive("entropy scale", self.entropy_scale)?;
        if !self.delta.is_finite() {
            return Err(Error::InvalidParams("delta must be finite".into()));
        }
        if self.centers_per_class == 0 {
            return Err(Error::InvalidParams(
                "centers per class must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// A scalar loss and its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_logits(logits: &[f64], label: usize) -> Result<()> {
    if label >= logits.len() {
        return Err(Error::InvalidLabel {
            label,
            classes: logits.len(),
        });
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::InvalidInput("non-finite logit".into()));
    }
    Ok(())
}

/// `weight * -ln softmax(logits)[label]` and its logit gradient
/// `weight * (softmax - onehot)`.
pub fn weighted_ce(logits: &[f64], label: usize, weight: f64) -> Result<LossGrad> {
    check_logits(logits, label)?;
    let loss = weight * (log_sum_exp(logits) - logits[label]);
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    grad.iter_mut().for_each(|g| *g *= weight);
    Ok(LossGrad { loss, grad })
}

/// Cross-entropy weighted by the normalized class weight `alpha_label`.
pub fn dsb_ce(logits: &[f64], label: usize, weights: &DsbWeights) -> Result<LossGrad> {
    if weights.len() != logits.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logits, {} class weights",
            logits.len(),
            weights.len()
        )));
    }
    weighted_ce(
        logits,
        label,
        weights.multiplier(label, WeightScaling::Normalized)?,
    )
}

/// `weight * (1 - p_t)^gamma * -ln(p_t)`.
pub fn dsb_focal(p_t: f64, gamma: f64, weight: f64) -> Result<f64> {
    if !(p_t > 0.0 && p_t <= 1.0) {
        return Err(Error::InvalidProbability(p_t));
    }
    Ok(weight * (1.0 - p_t).powf(gamma) * -p_t.ln())
}

/// Focal loss composed with softmax, with its logit gradient.
pub fn dsb_focal_logits(logits: &[f64], label: usize, gamma: f64, weight: f64) -> Result<LossGrad> {
    check_logits(logits, label)?;
    let probs = softmax(logits);
    let log_p = logits[label] - log_sum_exp(logits);
    let p = log_p.exp();
    let q = 1.0 - p;
    let loss = weight * q.powf(gamma) * -log_p;

    // d loss / d p, then chain through d p / d z_j = p * (onehot_j - s_j).
    let dl_dp = if q > 0.0 {
        -weight * (gamma * q.powf(gamma - 1.0) * -log_p + q.powf(gamma) / p)
    } else if gamma == 0.0 {
        -weight / p
    } else {
        // (1 - p)^(gamma - 1) * ln p -> 0 as p -> 1.
        0.0
    };
    let grad = probs
        .iter()
        .enumerate()
        .map(|(j, &s)| {
            let onehot = if j == label { 1.0 } else { 0.0 };
            dl_dp * p * (onehot - s)
        })
        .collect();
    Ok(LossGrad { loss, grad })
}

/// Loss and gradients of the weighted NormSoftmax loss.
#[derive(Debug, Clone, PartialEq)]
pub struct NsmOutput {
    pub loss: f64,
    pub grad_embedding: DVector<f64>,
    /// Gradient with respect to the `d x C` class weight matrix.
    pub grad_weights: DMatrix<f64>,
}

fn normalized(v: &DVector<f64>, what: &str) -> Result<(DVector<f64>, f64)> {
    let norm = v.norm();
    if !(norm.is_finite() && norm > 0.0) {
        return Err(Error::DegenerateVector(what.to_string()));
    }
    Ok((v / norm, norm))
}

/// Backpropagates through `u = v / |v|`.
fn unnormalize_grad(g: &DVector<f64>, unit: &DVector<f64>, norm: f64) -> DVector<f64> {
    (g - unit * g.dot(unit)) / norm
}

/// `-weight * log softmax(W_hat^T z_hat / sigma)[label]` over L2-normalized
/// embedding and class weight columns.
pub fn dsb_nsm(
    embedding: &DVector<f64>,
    class_weights: &DMatrix<f64>,
    label: usize,
    temperature: f64,
    weight: f64,
) -> Result<NsmOutput> {
    if embedding.len() != class_weights.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "embedding dim {}, class weights have {} rows",
            embedding.len(),
            class_weights.nrows()
        )));
    }
    let classes = class_weights.ncols();
    if label >= classes {
        return Err(Error::InvalidLabel { label, classes });
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::InvalidParams(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let (z_hat, z_norm) = normalized(embedding, "embedding")?;
    let mut w_hat = Vec::with_capacity(classes);
    for j in 0..classes {
        w_hat.push(normalized(
            &class_weights.column(j).clone_owned(),
            &format!("class weight column {j}"),
        )?);
    }

    let logits: Vec<f64> = w_hat
        .iter()
        .map(|(w, _)| w.dot(&z_hat) / temperature)
        .collect();
    let LossGrad { loss, grad } = weighted_ce(&logits, label, weight)?;

    let mut g_z_hat = DVector::zeros(embedding.len());
    let mut grad_weights = DMatrix::zeros(class_weights.nrows(), classes);
    for (j, (w, w_norm)) in w_hat.iter().enumerate() {
        let g = grad[j] / temperature;
        g_z_hat.axpy(g, w, 1.0);
        let g_w_hat = &z_hat * g;
        grad_weights
            .column_mut(j)
            .copy_from(&unnormalize_grad(&g_w_hat, w, *w_norm));
    }
    Ok(NsmOutput {
        loss,
        grad_embedding: unnormalize_grad(&g_z_hat, &z_hat, z_norm),
        grad_weights,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftTripleParams {
    pub lambda: f64,
    pub delta: f64,
    pub entropy_scale: f64,
}

impl From<&LossParams> for SoftTripleParams {
    fn from(p: &LossParams) -> Self {
        Self {
            lambda: p.lambda,
            delta: p.delta,
            entropy_scale: p.entropy_scale,
        }
    }
}

/// Relaxed similarity of a unit embedding to one class's unit centers (`d x K`).
fn relaxed_similarity(z_hat: &DVector<f64>, centers: &[DVector<f64>], entropy_scale: f64) -> f64 {
    let sims: Vec<f64> = centers.iter().map(|c| z_hat.dot(c)).collect();
    let scaled: Vec<f64> = sims.iter().map(|s| s / entropy_scale).collect();
    softmax(&scaled).iter().zip(&sims).map(|(p, s)| p * s).sum()
}

/// Weighted SoftTriple loss (forward only). `centers[c]` is the `d x K` matrix
/// of class `c`'s centers.
pub fn dsb_soft_triple(
    embedding: &DVector<f64>,
    centers: &[DMatrix<f64>],
    label: usize,
    params: &SoftTripleParams,
    weight: f64,
) -> Result<f64> {
    let classes = centers.len();
    if label >= classes {
        return Err(Error::InvalidLabel { label, classes });
    }
    if !(params.lambda > 0.0 && params.entropy_scale > 0.0) {
        return Err(Error::InvalidParams(
            "lambda and entropy scale must be positive".into(),
        ));
    }
    let (z_hat, _) = normalized(embedding, "embedding")?;
    let mut logits = Vec::with_capacity(classes);
    for (c, m) in centers.iter().enumerate() {
        if m.nrows() != embedding.len() || m.ncols() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "class {c} centers are {}x{}, embedding dim {}",
                m.nrows(),
                m.ncols(),
                embedding.len()
            )));
        }
        let unit: Vec<DVector<f64>> = m
            .column_iter()
            .enumerate()
            .map(|(k, col)| {
                normalized(&col.clone_owned(), &format!("center {k} of class {c}")).map(|x| x.0)
            })
            .collect::<Result<_>>()?;
        let sim = relaxed_similarity(&z_hat, &unit, params.entropy_scale);
        let margin = if c == label { params.delta } else { 0.0 };
        logits.push(params.lambda * (sim - margin));
    }
    Ok(weight * (log_sum_exp(&logits) - logits[label]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn weights_examples() {
        let w = dsb_weights(&[2.5, 2.5, 2.5]).unwrap();
        for v in &w.per_class {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let w = dsb_weights(&[1.0, 3.0]).unwrap();
        assert_abs_diff_eq!(w.per_class[0], 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(w.per_class[1], 0.25, epsilon = 1e-15);
        assert!(matches!(
            dsb_weights(&[0.0, 1.0]),
            Err(Error::InvalidScale { index: 0, .. })
        ));
    }

    #[test]
    fn multipliers() {
        let w = dsb_weights(&[1.0, 3.0]).unwrap();
        assert_eq!(w.multipliers(WeightScaling::MeanOne), vec![1.5, 0.5]);
        assert_eq!(
            DsbWeights::uniform(4).multipliers(WeightScaling::MeanOne),
            vec![1.0; 4]
        );
        assert!(w.multiplier(2, WeightScaling::Normalized).is_err());
    }

    #[test]
    fn ce_uniform_logits() {
        let out = dsb_ce(&[0.3; 4], 2, &DsbWeights::uniform(4)).unwrap();
        assert_abs_diff_eq!(out.loss, 0.25 * 4f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn ce_confident_prediction_vanishes() {
        let out = weighted_ce(&[60.0, 0.0, 0.0], 0, 1.0).unwrap();
        assert!(out.loss < 1e-20);
        assert!(matches!(
            weighted_ce(&[1.0, 2.0], 2, 1.0),
            Err(Error::InvalidLabel { .. })
        ));
    }

    #[test]
    fn focal_examples() {
        assert_eq!(dsb_focal(1.0, 2.0, 3.0).unwrap(), 0.0);
        assert_abs_diff_eq!(
            dsb_focal(0.3, 0.0, 1.0).unwrap(),
            -(0.3f64.ln()),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            dsb_focal(0.5, 2.0, 0.5).unwrap(),
            0.5 * 0.25 * 2f64.ln(),
            epsilon = 1e-15
        );
        assert!(matches!(
            dsb_focal(0.0, 2.0, 1.0),
            Err(Error::InvalidProbability(_))
        ));
        assert!(matches!(
            dsb_focal(1.2, 2.0, 1.0),
            Err(Error::InvalidProbability(_))
        ));
    }

    #[test]
    fn focal_with_zero_gamma_is_ce() {
        let logits = [0.2, -1.0, 0.7];
        let f = dsb_focal_logits(&logits, 1, 0.0, 0.8).unwrap();
        let c = weighted_ce(&logits, 1, 0.8).unwrap();
        assert_abs_diff_eq!(f.loss, c.loss, epsilon = 1e-14);
        for (a, b) in f.grad.iter().zip(&c.grad) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn nsm_identical_columns_is_log_c() {
        let w = DMatrix::from_fn(3, 5, |r, _| [0.2, -0.4, 1.0][r]);
        let z = DVector::from_vec(vec![-3.0, 0.5, 2.0]);
        let out = dsb_nsm(&z, &w, 4, 0.3, 0.7).unwrap();
        assert_abs_diff_eq!(out.loss, 0.7 * 5f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn nsm_large_temperature_compresses_logits() {
        let w = DMatrix::from_column_slice(2, 3, &[1.0, 0.0, 0.0, 1.0, -1.0, 0.2]);
        let z = DVector::from_vec(vec![0.4, 0.9]);
        let out = dsb_nsm(&z, &w, 0, 1e6, 2.0).unwrap();
        assert!((out.loss - 2.0 * 3f64.ln()).abs() < 1e-4);
    }

    #[test]
    fn nsm_rejects_zero_vectors() {
        let w = DMatrix::from_column_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let z = DVector::from_vec(vec![1.0, 1.0]);
        assert!(matches!(
            dsb_nsm(&z, &w, 0, 1.0, 1.0),
            Err(Error::DegenerateVector(_))
        ));
        let w = DMatrix::identity(2, 2);
        let z = DVector::zeros(2);
        assert!(matches!(
            dsb_nsm(&z, &w, 0, 1.0, 1.0),
            Err(Error::DegenerateVector(_))
        ));
    }

    #[test]
    fn soft_triple_single_center_matches_nsm() {
        let w = DMatrix::from_column_slice(3, 3, &[1.0, 0.2, 0.0, -0.3, 1.0, 0.5, 0.1, -0.7, 1.0]);
        let z = DVector::from_vec(vec![0.6, -0.2, 0.9]);
        let lambda = 8.0;
        let centers: Vec<DMatrix<f64>> = (0..3)
            .map(|c| DMatrix::from_column_slice(3, 1, w.column(c).as_slice()))
            .collect();
        let p = SoftTripleParams {
            lambda,
            delta: 0.0,
            entropy_scale: 0.1,
        };
        let st = dsb_soft_triple(&z, &centers, 1, &p, 0.4).unwrap();
        let nsm = dsb_nsm(&z, &w, 1, 1.0 / lambda, 0.4).unwrap();
        assert_abs_diff_eq!(st, nsm.loss, epsilon = 1e-9);
    }

    #[test]
    fn soft_triple_margin_increases_loss() {
        let centers = vec![
            DMatrix::from_column_slice(2, 2, &[1.0, 0.0, 0.8, 0.6]),
            DMatrix::from_column_slice(2, 2, &[0.0, 1.0, -0.6, 0.8]),
        ];
        let z = DVector::from_vec(vec![0.9, 0.3]);
        let mut last = f64::NEG_INFINITY;
        for delta in [0.0, 0.05, 0.1, 0.3] {
            let p = SoftTripleParams {
                lambda: 10.0,
                delta,
                entropy_scale: 0.1,
            };
            let l = dsb_soft_triple(&z, &centers, 0, &p, 1.0).unwrap();
            assert!(l > last);
            last = l;
        }
    }

    #[test]
    fn loss_params_validation() {
        assert!(LossParams::default().validate().is_ok());
        let bad = LossParams {
            temperature: 0.0,
            ..LossParams::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossParams {
            centers_per_class: 0,
            ..LossParams::default()
        };
        assert!(bad.validate().is_err());
    }
}
