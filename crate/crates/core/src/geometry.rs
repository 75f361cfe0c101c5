//! Manifold volumes of feature sets.
//!
//! The central quantity is the log-volume of the subspace spanned by a class's
//! centered feature columns,
//!
//! ```text
//! Vol(Z) = 1/2 * log2 det(I + d / (m * eps^2) * Zc * Zc^T)
//! ```
//!
//! evaluated through a Cholesky factorization of the (always symmetric positive
//! definite) matrix on the smaller of the feature-space (`d x d`) and
//! sample-space (`m x m`) Gram forms. The two forms are equal by Sylvester's
//! determinant identity.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `d x m` matrix of feature columns with one class label per column.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatureSet {
    values: DMatrix<f64>,
    labels: Vec<usize>,
}

impl LabeledFeatureSet {
    pub fn new(values: DMatrix<f64>, labels: Vec<usize>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::InvalidInput(format!(
                "feature matrix must be non-empty, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if labels.len() != values.ncols() {
            return Err(Error::InvalidInput(format!(
                "{} labels for {} samples",
                labels.len(),
                values.ncols()
            )));
        }
        check_finite(&values)?;
        Ok(Self { values, labels })
    }

    /// Builds a set from one feature row per sample (the on-disk orientation).
    pub fn from_samples(samples: &[Vec<f64>], labels: Vec<usize>) -> Result<Self> {
        let dim = samples.first().map(Vec::len).unwrap_or(0);
        if let Some((i, s)) = samples.iter().enumerate().find(|(_, s)| s.len() != dim) {
            return Err(Error::InvalidInput(format!(
                "sample {i} has {} features, expected {dim}",
                s.len()
            )));
        }
        let values = DMatrix::from_fn(dim, samples.len(), |r, c| samples[c][r]);
        Self::new(values, labels)
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Distinct labels in ascending order.
    pub fn class_ids(&self) -> Vec<usize> {
        self.labels
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Column indices carrying `class`, in ascending order.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == class).then_some(i))
            .collect()
    }

    /// The `d x m_class` sub-matrix of one class's columns.
    pub fn class_matrix(&self, class: usize) -> DMatrix<f64> {
        self.values.select_columns(&self.class_indices(class))
    }

    /// Sub-set made of the given columns, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidInput(format!(
                "index {bad} out of range for {} samples",
                self.len()
            )));
        }
        Self::new(
            self.values.select_columns(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn into_parts(self) -> (DMatrix<f64>, Vec<usize>) {
        (self.values, self.labels)
    }
}

/// Sphere-packing radius of the volume measure. The logarithm base is fixed at 2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeParams {
    pub epsilon: f64,
}

impl VolumeParams {
    pub fn new(epsilon: f64) -> Result<Self> {
        let p = Self { epsilon };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::InvalidParams(format!(
                "epsilon must be positive and finite, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

impl Default for VolumeParams {
    fn default() -> Self {
        Self { epsilon: 1.0 }
    }
}

/// Which Gram form the log-determinant is evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeForm {
    /// `det(I_d + c * Zc * Zc^T)`.
    FeatureSpace,
    /// `det(I_m + c * Zc^T * Zc)`.
    SampleSpace,
    /// Whichever of the two is smaller.
    Auto,
}

pub(crate) fn check_finite(m: &DMatrix<f64>) -> Result<()> {
    if let Some(pos) = m.iter().position(|v| !v.is_finite()) {
        let (r, c) = (pos % m.nrows(), pos / m.nrows());
        return Err(Error::InvalidInput(format!(
            "non-finite value {} at row {r}, column {c}",
            m[(r, c)]
        )));
    }
    Ok(())
}

/// Subtracts the per-dimension (row) mean from every column.
pub fn center(features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if features.ncols() == 0 {
        return Err(Error::InvalidInput("cannot center zero samples".into()));
    }
    check_finite(features)?;
    Ok(center_unchecked(features))
}

fn center_unchecked(features: &DMatrix<f64>) -> DMatrix<f64> {
    let m = features.ncols() as f64;
    let mut out = features.clone();
    for mut row in out.row_iter_mut() {
        let mean = row.iter().sum::<f64>() / m;
        row.iter_mut().for_each(|v| *v -= mean);
    }
    out
}

/// Semantic scale `S'` of a feature matrix (one sample per column).
///
/// Returns 0 for a single column or all-identical columns.
pub fn feature_volume(features: &DMatrix<f64>, params: &VolumeParams) -> Result<f64> {
    feature_volume_with(features, params, VolumeForm::Auto)
}

pub fn feature_volume_with(
    features: &DMatrix<f64>,
    params: &VolumeParams,
    form: VolumeForm,
) -> Result<f64> {
    params.validate()?;
    if features.nrows() == 0 || features.ncols() == 0 {
        return Err(Error::InvalidInput(format!(
            "feature matrix must be non-empty, got {}x{}",
            features.nrows(),
            features.ncols()
        )));
    }
    check_finite(features)?;

    let d = features.nrows();
    let m = features.ncols();
    // Column order must not leak into the floating-point sums.
    let canonical = canonical_column_order(features);
    let first = canonical.column(0);
    if canonical.column_iter().all(|c| c == first) {
        return Ok(0.0);
    }

    let centered = center_unchecked(&canonical);
    // Rows that are identically zero after centering contribute an identity
    // block to the determinant; dropping them is exact.
    let live_rows: Vec<usize> = (0..d)
        .filter(|&r| centered.row(r).iter().any(|&v| v != 0.0))
        .collect();
    let centered = if live_rows.len() < d {
        centered.select_rows(&live_rows)
    } else {
        centered
    };

    let coeff = d as f64 / (m as f64 * params.epsilon * params.epsilon);
    let form = match form {
        VolumeForm::Auto if centered.ncols() < centered.nrows() => VolumeForm::SampleSpace,
        VolumeForm::Auto => VolumeForm::FeatureSpace,
        f => f,
    };
    let gram = match form {
        VolumeForm::SampleSpace => centered.tr_mul(&centered),
        _ => {
            let t = centered.transpose();
            t.tr_mul(&t)
        }
    };
    Ok(half_log2_det_identity_plus(gram, coeff).max(0.0))
}

/// Sample volume of pre-flattened raw samples: the same measure with `eps = 1`.
pub fn sample_volume(flattened_samples: &DMatrix<f64>) -> Result<f64> {
    feature_volume(flattened_samples, &VolumeParams::default())
}

/// `1/2 * log2 det(I + coeff * gram)` for a symmetric positive semi-definite `gram`.
fn half_log2_det_identity_plus(gram: DMatrix<f64>, coeff: f64) -> f64 {
    let n = gram.nrows();
    let mut a = gram * coeff;
    for i in 0..n {
        a[(i, i)] += 1.0;
    }
    match Cholesky::new(a.clone()) {
        Some(chol) => chol.l_dirty().diagonal().iter().map(|v| v.log2()).sum(),
        // Only reachable through catastrophic rounding; eigenvalues of I + cG are >= 1.
        None => {
            0.5 * SymmetricEigen::new(a)
                .eigenvalues
                .iter()
                .map(|v| v.max(1.0).log2())
                .sum::<f64>()
        }
    }
}

fn canonical_column_order(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut order: Vec<usize> = (0..m.ncols()).collect();
    order.sort_by(|&a, &b| {
        m.column(a)
            .iter()
            .zip(m.column(b).iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    m.select_columns(&order)
}

/// k-dimensional volume `sqrt(det(Z^T Z))` of the parallelotope spanned by the
/// `k` columns of an `n x k` matrix.
pub fn gram_parallelotope_volume(vectors: &DMatrix<f64>) -> Result<f64> {
    let (n, k) = vectors.shape();
    if k == 0 || k > n {
        return Err(Error::InvalidShape(format!(
            "need 1 <= k <= n spanning vectors, got n={n}, k={k}"
        )));
    }
    check_finite(vectors)?;
    // |det R| of the thin QR equals sqrt(det(Z^T Z)) without squaring the condition number.
    let r = vectors.clone().qr().r();
    Ok(r.diagonal().iter().map(|v| v.abs()).product())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveNumberParams {
    pub beta: f64,
}

impl EffectiveNumberParams {
    pub fn new(beta: f64) -> Result<Self> {
        let p = Self { beta };
        p.validate()?;
        Ok(p)
    }

    /// `beta = (N - 1) / N` for a prototype volume `N >= 1`.
    pub fn from_prototype_volume(volume: f64) -> Result<Self> {
        if !(volume.is_finite() && volume >= 1.0) {
            return Err(Error::InvalidParams(format!(
                "prototype volume must be >= 1, got {volume}"
            )));
        }
        Self::new((volume - 1.0) / volume)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::InvalidParams(format!(
                "beta must lie in [0, 1), got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Effective number of samples `(1 - beta^n) / (1 - beta)`.
///
/// Evaluated as `-expm1(n * ln1p(-(1 - beta))) / (1 - beta)` so that it stays
/// accurate as beta approaches 1.
pub fn effective_sample_number(n: u64, params: &EffectiveNumberParams) -> Result<f64> {
    params.validate()?;
    if n == 0 {
        return Err(Error::InvalidInput("sample count must be >= 1".into()));
    }
    if params.beta == 0.0 || n == 1 {
        return Ok(1.0);
    }
    let gap = 1.0 - params.beta;
    let value = -(n as f64 * (-gap).ln_1p()).exp_m1() / gap;
    Ok(value.clamp(1.0, n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-2.0..2.0))
    }

    /// Independent oracle: `1/2 * sum log2(1 + c * lambda_j)` from a dense eigendecomposition.
    fn eigen_oracle(z: &DMatrix<f64>, eps: f64) -> f64 {
        let (d, m) = z.shape();
        let mut zc = z.clone();
        for r in 0..d {
            let mean: f64 = (0..m).map(|c| z[(r, c)]).sum::<f64>() / m as f64;
            for c in 0..m {
                zc[(r, c)] -= mean;
            }
        }
        let cov = &zc * zc.transpose();
        let coeff = d as f64 / (m as f64 * eps * eps);
        0.5 * SymmetricEigen::new(cov)
            .eigenvalues
            .iter()
            .map(|l| (1.0 + coeff * l.max(0.0)).log2())
            .sum::<f64>()
    }

    #[test]
    fn center_symmetric_pair() {
        let z = DMatrix::from_column_slice(2, 2, &[1.0, 1.0, 3.0, 3.0]);
        let c = center(&z).unwrap();
        assert_eq!(c, DMatrix::from_column_slice(2, 2, &[-1.0, -1.0, 1.0, 1.0]));
    }

    #[test]
    fn center_single_column_is_zero() {
        let z = DMatrix::from_column_slice(3, 1, &[0.3, -7.0, 12.5]);
        assert!(center(&z).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centered_rows_have_zero_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = random_matrix(&mut rng, 4, 7);
        let c = center(&z).unwrap();
        for r in 0..4 {
            let mean: f64 = c.row(r).iter().sum::<f64>() / 7.0;
            assert!(mean.abs() < 1e-12);
        }
    }

    #[test]
    fn center_rejects_non_finite() {
        let z = DMatrix::from_column_slice(2, 1, &[f64::NAN, 1.0]);
        assert!(matches!(center(&z), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn identical_columns_have_zero_volume() {
        for d in [1, 5, 64] {
            let col: Vec<f64> = (0..d).map(|i| i as f64 * 0.1 - 2.0).collect();
            let z = DMatrix::from_fn(d, 2, |r, _| col[r]);
            assert_eq!(feature_volume(&z, &VolumeParams::default()).unwrap(), 0.0);
        }
    }

    #[test]
    fn hand_computed_volumes() {
        let z = DMatrix::from_row_slice(1, 2, &[-1.0, 1.0]);
        assert_abs_diff_eq!(
            feature_volume(&z, &VolumeParams::default()).unwrap(),
            0.5,
            epsilon = 1e-12
        );
        let z = DMatrix::from_column_slice(2, 4, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
        assert_abs_diff_eq!(
            feature_volume(&z, &VolumeParams::default()).unwrap(),
            1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn volume_param_and_input_errors() {
        let z = DMatrix::from_row_slice(1, 2, &[-1.0, 1.0]);
        for eps in [0.0, -1.0, f64::NAN] {
            assert!(matches!(
                feature_volume(&z, &VolumeParams { epsilon: eps }),
                Err(Error::InvalidParams(_))
            ));
        }
        let bad = DMatrix::from_row_slice(1, 2, &[f64::INFINITY, 1.0]);
        assert!(matches!(
            feature_volume(&bad, &VolumeParams::default()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn volume_matches_eigen_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (d, m, eps) in [(3, 10, 1.0), (10, 4, 1.0), (16, 40, 0.5), (8, 8, 3.0)] {
            let z = random_matrix(&mut rng, d, m);
            let got = feature_volume(&z, &VolumeParams { epsilon: eps }).unwrap();
            assert_abs_diff_eq!(got, eigen_oracle(&z, eps), epsilon = 1e-8);
        }
    }

    #[test]
    fn sample_volume_of_flattened_images() {
        let constant = DMatrix::from_element(768, 12, 0.25);
        assert_eq!(sample_volume(&constant).unwrap(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(768);
        let z = random_matrix(&mut rng, 768, 50);
        let vol = sample_volume(&z).unwrap();
        assert_eq!(vol, feature_volume(&z, &VolumeParams::default()).unwrap());
        assert_abs_diff_eq!(vol, eigen_oracle(&z, 1.0), epsilon = 1e-8);
    }

    #[test]
    fn forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = random_matrix(&mut rng, 20, 6);
        let p = VolumeParams::default();
        let a = feature_volume_with(&z, &p, VolumeForm::FeatureSpace).unwrap();
        let b = feature_volume_with(&z, &p, VolumeForm::SampleSpace).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-8);
    }

    #[test]
    fn zero_rows_do_not_change_volume() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = random_matrix(&mut rng, 2, 30);
        let mut padded = DMatrix::zeros(6, 30);
        padded.view_mut((0, 0), (2, 30)).copy_from(&z);
        let p = VolumeParams::default();
        let got = feature_volume(&padded, &p).unwrap();
        assert_abs_diff_eq!(got, eigen_oracle(&padded, 1.0), epsilon = 1e-10);
    }

    #[test]
    fn gram_volume_examples() {
        let z = DMatrix::from_column_slice(3, 2, &[1.0, 2.0, 3.0, 3.0, 2.0, 1.0]);
        assert_abs_diff_eq!(
            gram_parallelotope_volume(&z).unwrap(),
            96f64.sqrt(),
            epsilon = 1e-9
        );
        let ortho = DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_abs_diff_eq!(
            gram_parallelotope_volume(&ortho).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        let single = DMatrix::from_column_slice(2, 1, &[3.0, 4.0]);
        assert_abs_diff_eq!(
            gram_parallelotope_volume(&single).unwrap(),
            5.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn gram_volume_square_case_is_abs_det() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = random_matrix(&mut rng, 4, 4);
        assert_abs_diff_eq!(
            gram_parallelotope_volume(&z).unwrap(),
            z.determinant().abs(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn gram_volume_rejects_too_many_vectors() {
        let z = DMatrix::zeros(2, 3);
        assert!(matches!(
            gram_parallelotope_volume(&z),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn effective_number_examples() {
        let e = |n, b| effective_sample_number(n, &EffectiveNumberParams::new(b).unwrap()).unwrap();
        assert_eq!(e(10, 0.0), 1.0);
        assert_eq!(e(1, 0.9), 1.0);
        assert_abs_diff_eq!(e(3, 0.5), 1.75, epsilon = 1e-15);
        let near_one = e(10_000, 1.0 - 1e-12);
        assert!((near_one - 10_000.0).abs() / 10_000.0 < 1e-6);
    }

    #[test]
    fn effective_number_param_errors() {
        assert!(EffectiveNumberParams::new(1.0).is_err());
        assert!(EffectiveNumberParams::new(-0.1).is_err());
        assert!(effective_sample_number(3, &EffectiveNumberParams { beta: 1.5 }).is_err());
        let p = EffectiveNumberParams::from_prototype_volume(1.0).unwrap();
        assert_eq!(p.beta, 0.0);
        let p = EffectiveNumberParams::from_prototype_volume(4.0).unwrap();
        assert_eq!(p.beta, 0.75);
    }

    #[test]
    fn labeled_set_validation() {
        let v = DMatrix::zeros(2, 3);
        assert!(LabeledFeatureSet::new(v.clone(), vec![0, 1]).is_err());
        let set = LabeledFeatureSet::new(v, vec![2, 0, 2]).unwrap();
        assert_eq!(set.class_ids(), vec![0, 2]);
        assert_eq!(set.class_indices(2), vec![0, 2]);
        assert_eq!(set.class_matrix(2).ncols(), 2);
    }
}
