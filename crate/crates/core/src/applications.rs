//! Procedures built on the semantic scale: marginal-effect curves, long-tail
//! count synthesis, subset selection, collection stopping and hierarchy matching.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{feature_volume, LabeledFeatureSet, VolumeParams};

/// Relative tolerance under which two hierarchy ratios count as tied.
pub const MATCH_TIE_TOLERANCE: f64 = 1e-9;

/// `n_i = round(N * mu^(i / (1 - M)))` for `i = 0..M`, rounding half up and
/// never going below one sample.
pub fn long_tail_counts(classes: usize, max_count: usize, imbalance: f64) -> Result<Vec<usize>> {
    if classes < 2 {
        return Err(Error::InvalidParams(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if max_count < 1 {
        return Err(Error::InvalidParams("max count must be >= 1".into()));
    }
    if !(imbalance.is_finite() && imbalance >= 1.0) {
        return Err(Error::InvalidParams(format!(
            "imbalance factor must be >= 1, got {imbalance}"
        )));
    }
    let denom = 1.0 - classes as f64;
    Ok((0..classes)
        .map(|i| {
            let n = max_count as f64 * imbalance.powf(i as f64 / denom);
            ((n + 0.5).floor() as usize).max(1)
        })
        .collect())
}

/// Seeded random permutation of each class's sample indices, classes in id order.
fn class_permutations(
    dataset: &LabeledFeatureSet,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, Vec<usize>)> {
    dataset
        .class_ids()
        .into_iter()
        .map(|id| {
            let mut idx = dataset.class_indices(id);
            idx.shuffle(rng);
            (id, idx)
        })
        .collect()
}

fn check_class_sizes(perms: &[(usize, Vec<usize>)], per_class: usize) -> Result<()> {
    for (id, idx) in perms {
        if idx.len() < per_class {
            return Err(Error::InsufficientSamples {
                class: *id,
                available: idx.len(),
                requested: per_class,
            });
        }
    }
    Ok(())
}

/// Indices of a uniform random `per_class`-subset of every class, sorted ascending.
pub fn subsample_balanced_indices(
    dataset: &LabeledFeatureSet,
    per_class: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perms = class_permutations(dataset, &mut rng);
    check_class_sizes(&perms, per_class)?;
    let mut out: Vec<usize> = perms
        .into_iter()
        .flat_map(|(_, idx)| idx.into_iter().take(per_class))
        .collect();
    out.sort_unstable();
    Ok(out)
}

pub fn subsample_balanced(
    dataset: &LabeledFeatureSet,
    per_class: usize,
    seed: u64,
) -> Result<LabeledFeatureSet> {
    dataset.select(&subsample_balanced_indices(dataset, per_class, seed)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub sample_count: usize,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCurve {
    pub class_id: usize,
    pub points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalCurve {
    pub classes: Vec<ClassCurve>,
    /// Sum of the per-class scales at each size.
    pub total: Vec<CurvePoint>,
}

impl MarginalCurve {
    /// Successive differences of a curve's scales.
    pub fn increments(points: &[CurvePoint]) -> Vec<f64> {
        points.windows(2).map(|w| w[1].scale - w[0].scale).collect()
    }

    /// Rows `(size, class_id, scale)`; the across-class sum uses class id `None`.
    pub fn rows(&self) -> Vec<(usize, Option<usize>, f64)> {
        let mut out = Vec::new();
        for (i, t) in self.total.iter().enumerate() {
            for c in &self.classes {
                out.push((t.sample_count, Some(c.class_id), c.points[i].scale));
            }
            out.push((t.sample_count, None, t.scale));
        }
        out
    }
}

/// Semantic scale of each class on subsamples of increasing size. With
/// `nested`, every subsample is a prefix of one per-class permutation, so each
/// size's subset contains the previous one; otherwise each size draws afresh.
pub fn marginal_curve(
    dataset: &LabeledFeatureSet,
    sizes: &[usize],
    nested: bool,
    params: &VolumeParams,
    seed: u64,
) -> Result<MarginalCurve> {
    params.validate()?;
    if sizes.is_empty() {
        return Err(Error::InvalidParams("no sizes given".into()));
    }
    if sizes[0] == 0 || sizes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParams(
            "sizes must be positive and strictly increasing".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = class_permutations(dataset, &mut rng);
    check_class_sizes(&base, *sizes.last().unwrap())?;

    // One permutation per (size, class) in the fresh case, drawn up front so the
    // parallel evaluation below stays deterministic.
    let draws: Vec<Vec<(usize, Vec<usize>)>> = sizes
        .iter()
        .map(|_| {
            if nested {
                base.clone()
            } else {
                class_permutations(dataset, &mut rng)
            }
        })
        .collect();

    let classes = base
        .iter()
        .enumerate()
        .map(|(ci, (id, _))| {
            let points = sizes
                .par_iter()
                .zip(draws.par_iter())
                .map(|(&m, perms)| {
                    let sub = dataset.values().select_columns(&perms[ci].1[..m]);
                    feature_volume(&sub, params).map(|scale| CurvePoint {
                        sample_count: m,
                        scale,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ClassCurve {
                class_id: *id,
                points,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let total = sizes
        .iter()
        .enumerate()
        .map(|(i, &m)| CurvePoint {
            sample_count: m,
            scale: classes.iter().map(|c| c.points[i].scale).sum(),
        })
        .collect();
    Ok(MarginalCurve { classes, total })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PizzaSelection {
    /// Selected column indices, ascending.
    pub indices: Vec<usize>,
    pub scale: f64,
    /// 0-based trial that produced the selection.
    pub trial: usize,
}

/// Draws `trials` uniform random `budget`-subsets of the columns and keeps the
/// one with the largest semantic scale; ties go to the lowest trial.
pub fn pizza_select(
    class_samples: &DMatrix<f64>,
    budget: usize,
    trials: usize,
    params: &VolumeParams,
    seed: u64,
) -> Result<PizzaSelection> {
    params.validate()?;
    let n = class_samples.ncols();
    if budget == 0 {
        return Err(Error::InvalidParams("budget must be >= 1".into()));
    }
    if trials == 0 {
        return Err(Error::InvalidParams("trials must be >= 1".into()));
    }
    if budget > n {
        return Err(Error::InsufficientSamples {
            class: 0,
            available: n,
            requested: budget,
        });
    }
    let candidates: Vec<(Vec<usize>, f64)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let mut idx = rand::seq::index::sample(&mut rng, n, budget).into_vec();
            idx.sort_unstable();
            let scale = feature_volume(&class_samples.select_columns(&idx), params)?;
            Ok((idx, scale))
        })
        .collect::<Result<_>>()?;

    let mut best = 0;
    for (t, c) in candidates.iter().enumerate() {
        if c.1 > candidates[best].1 {
            best = t;
        }
    }
    let (indices, scale) = candidates.into_iter().nth(best).unwrap();
    Ok(PizzaSelection {
        indices,
        scale,
        trial: best,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectionDecision {
    /// 1-based position in the history at which collection can stop.
    pub stop_index: Option<usize>,
}

/// First `n >= 2` with `(S_n - S_{n-1}) / S_n < threshold_pct / 100`.
pub fn collection_stop(history: &[f64], threshold_pct: f64) -> Result<CollectionDecision> {
    if history.len() < 2 {
        return Err(Error::InvalidHistory(format!(
            "need at least 2 entries, got {}",
            history.len()
        )));
    }
    if !(threshold_pct.is_finite() && threshold_pct > 0.0) {
        return Err(Error::InvalidParams(format!(
            "threshold must be a positive percentage, got {threshold_pct}"
        )));
    }
    if let Some((i, v)) = history.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::InvalidHistory(format!("entry {} is {v}", i + 1)));
    }
    if let Some((i, v)) = history.iter().enumerate().skip(1).find(|(_, &v)| v <= 0.0) {
        return Err(Error::InvalidHistory(format!(
            "entry {} is {v}; scales must be positive",
            i + 1
        )));
    }
    let limit = threshold_pct / 100.0;
    let stop_index = history
        .windows(2)
        .position(|w| (w[1] - w[0]) / w[1] < limit)
        .map(|i| i + 2);
    Ok(CollectionDecision { stop_index })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChildMatch {
    pub child: usize,
    /// `ratios[p] = scale(parent_p ∪ child) / scale(parent_p)`.
    pub ratios: Vec<f64>,
    pub assigned_parent: usize,
    /// Another parent's ratio is within [`MATCH_TIE_TOLERANCE`] of the minimum.
    pub ambiguous: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyMatchResult {
    pub children: Vec<ChildMatch>,
}

/// Assigns each child class to the parent whose scale grows least when the
/// child's samples are appended to it.
pub fn hierarchy_match(
    children: &[DMatrix<f64>],
    parents: &[DMatrix<f64>],
    params: &VolumeParams,
) -> Result<HierarchyMatchResult> {
    params.validate()?;
    if parents.is_empty() || children.is_empty() {
        return Err(Error::InvalidInput(
            "need at least one parent and one child".into(),
        ));
    }
    let dim = parents[0].nrows();
    for (kind, sets) in [("parent", parents), ("child", children)] {
        for (i, s) in sets.iter().enumerate() {
            if s.nrows() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "{kind} {i} has dimension {}, expected {dim}",
                    s.nrows()
                )));
            }
            if s.ncols() == 0 {
                return Err(Error::InvalidInput(format!("{kind} {i} is empty")));
            }
        }
    }
    let parent_scales: Vec<f64> = parents
        .par_iter()
        .map(|p| feature_volume(p, params))
        .collect::<Result<_>>()?;
    if let Some(p) = parent_scales.iter().position(|&s| s <= 0.0) {
        return Err(Error::DegenerateInput(format!(
            "parent {p} has zero semantic scale"
        )));
    }

    let pairs: Vec<(usize, usize)> = (0..children.len())
        .flat_map(|c| (0..parents.len()).map(move |p| (c, p)))
        .collect();
    let mixed: Vec<f64> = pairs
        .par_iter()
        .map(|&(c, p)| {
            let (parent, child) = (&parents[p], &children[c]);
            let joined = DMatrix::from_fn(dim, parent.ncols() + child.ncols(), |r, j| {
                if j < parent.ncols() {
                    parent[(r, j)]
                } else {
                    child[(r, j - parent.ncols())]
                }
            });
            feature_volume(&joined, params)
        })
        .collect::<Result<_>>()?;

    let children = mixed
        .chunks(parents.len())
        .enumerate()
        .map(|(c, row)| {
            let ratios: Vec<f64> = row.iter().zip(&parent_scales).map(|(m, s)| m / s).collect();
            let mut best = 0;
            for (p, &r) in ratios.iter().enumerate() {
                if r < ratios[best] {
                    best = p;
                }
            }
            let min = ratios[best];
            let ambiguous = ratios.iter().enumerate().any(|(p, &r)| {
                p != best && (r - min).abs() <= MATCH_TIE_TOLERANCE * min.abs().max(1.0)
            });
            ChildMatch {
                child: c,
                ratios,
                assigned_parent: best,
                ambiguous,
            }
        })
        .collect();
    Ok(HierarchyMatchResult { children })
}

/// Synthetic parent/child classes with a known nesting.
#[derive(Debug, Clone)]
pub struct HierarchyFixture {
    pub parent_names: Vec<String>,
    pub child_names: Vec<String>,
    pub parents: Vec<DMatrix<f64>>,
    pub children: Vec<DMatrix<f64>>,
    /// True parent of each child.
    pub child_parent: Vec<usize>,
}

const FIXTURE_DIM: usize = 8;
const FIXTURE_SAMPLES: usize = 1000;
const FIXTURE_PARENT_SPACING: f64 = 8.0;
const FIXTURE_CHILD_SHIFT: f64 = 2.0;

/// Three unit-variance Gaussian parents in 8-D centred at `8 e_p`, and seven
/// children each drawn from its parent's distribution shifted by `2 e_k` along
/// an axis unused by the parent means.
pub fn nested_gaussian_fixture(seed: u64) -> HierarchyFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let parent_names = ["dogs", "cats", "monkeys"];
    let children_layout: [(&str, usize); 7] = [
        ("poodle", 0),
        ("beagle", 0),
        ("husky", 0),
        ("persian", 1),
        ("siamese", 1),
        ("capuchin", 2),
        ("macaque", 2),
    ];
    let cloud = |mean: &[f64; FIXTURE_DIM], rng: &mut ChaCha8Rng| {
        DMatrix::from_fn(FIXTURE_DIM, FIXTURE_SAMPLES, |r, _| {
            mean[r] + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
        })
    };
    let parent_mean = |p: usize| {
        let mut m = [0.0; FIXTURE_DIM];
        m[p] = FIXTURE_PARENT_SPACING;
        m
    };
    let parents = (0..parent_names.len())
        .map(|p| cloud(&parent_mean(p), &mut rng))
        .collect();
    let mut sibling = [0usize; 3];
    let children = children_layout
        .iter()
        .map(|&(_, p)| {
            let mut m = parent_mean(p);
            m[parent_names.len() + sibling[p]] += FIXTURE_CHILD_SHIFT;
            sibling[p] += 1;
            cloud(&m, &mut rng)
        })
        .collect();
    HierarchyFixture {
        parent_names: parent_names.iter().map(|s| s.to_string()).collect(),
        child_names: children_layout.iter().map(|c| c.0.to_string()).collect(),
        parents,
        children,
        child_parent: children_layout.iter().map(|c| c.1).collect(),
    }
}

/// `count` i.i.d. standard Gaussian samples in `dim` dimensions, one per column.
pub fn gaussian_class(dim: usize, count: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(dim, count, |_, _| rng.sample::<f64, _>(StandardNormal))
}
