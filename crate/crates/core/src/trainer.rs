//! Three-stage dynamic re-weighting training on a small differentiable classifier.
//!
//! Per iteration: compute the batch's penultimate features, reduce them to
//! [`POOL_FEATURE_DIM`] entries, evict the oldest pool batch (from epoch 2 on),
//! enqueue the new one, and take an SGD step on the base loss (stages 1-2) or
//! on the loss re-weighted by the pool's per-class semantic scales (stage 3).

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_pool::{
    pool_scales, reduce_features_padded, Stage, StageSchedule, StoragePool, POOL_FEATURE_DIM,
};
use crate::geometry::{LabeledFeatureSet, VolumeParams};
use crate::imbalance::{DatasetKind, SemanticScaleReport};
use crate::reweight::{
    dsb_focal_logits, dsb_nsm, dsb_weights, weighted_ce, LossGrad, LossKind, WeightScaling,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub warm_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss: LossKind,
    pub focal_gamma: f64,
    /// NormSoftmax temperature.
    pub temperature: f64,
    /// Smoothing of the interference weights; `None` picks the dataset kind's default.
    pub alpha: Option<f64>,
    pub epsilon: f64,
    pub seed: u64,
    pub dataset_kind: DatasetKind,
    pub architecture: Architecture,
    pub hidden_units: usize,
    /// Recompute pool scales every this many stage-3 iterations.
    pub scale_every: usize,
    pub weight_scaling: WeightScaling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warm_epochs: 5,
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.1,
            loss: LossKind::CrossEntropy,
            focal_gamma: 2.0,
            temperature: 0.1,
            alpha: None,
            epsilon: 1.0,
            seed: 42,
            dataset_kind: DatasetKind::Balanced,
            architecture: Architecture::Linear,
            hidden_units: 16,
            scale_every: 1,
            weight_scaling: WeightScaling::MeanOne,
        }
    }
}

impl TrainConfig {
    pub fn alpha(&self) -> f64 {
        self.alpha
            .unwrap_or_else(|| self.dataset_kind.default_alpha())
    }

    /// Checks the invariants `train` relies on. `epochs == warm_epochs` is
    /// accepted and never reaches stage 3, which is plain training.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.warm_epochs < 1 {
            return fail("warm_epochs must be >= 1".into());
        }
        if self.epochs < self.warm_epochs {
            return fail(format!(
                "epochs ({}) must be >= warm_epochs ({})",
                self.epochs, self.warm_epochs
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(self.focal_gamma.is_finite() && self.focal_gamma >= 0.0) {
            return fail(format!(
                "focal_gamma must be >= 0, got {}",
                self.focal_gamma
            ));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return fail(format!(
                "temperature must be positive, got {}",
                self.temperature
            ));
        }
        if !(self.alpha().is_finite() && self.alpha() >= 1.0) {
            return fail(format!("alpha must be >= 1, got {}", self.alpha()));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return fail(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.architecture == Architecture::Mlp && self.hidden_units == 0 {
            return fail("hidden_units must be >= 1 for the mlp architecture".into());
        }
        if self.scale_every == 0 {
            return fail("scale_every must be >= 1".into());
        }
        if self.loss == LossKind::SoftTriple {
            return fail(
                "soft-triple has no analytic gradient; use cross-entropy, focal or norm-softmax"
                    .into(),
            );
        }
        Ok(())
    }

    /// Stricter check for runs that must reach stage 3.
    pub fn validate_reweighting(&self) -> Result<()> {
        self.validate()?;
        if self.epochs < self.warm_epochs + 1 {
            return Err(Error::InvalidConfig(format!(
                "epochs ({}) must be >= warm_epochs + 1 ({}) to reach the re-weighting stage",
                self.epochs,
                self.warm_epochs + 1
            )));
        }
        Ok(())
    }

    pub fn schedule(&self) -> StageSchedule {
        StageSchedule {
            warm_epochs: self.warm_epochs,
        }
    }
}

/// Stage of a 1-based epoch given `warm_epochs` warm-up epochs.
pub fn stage_of_epoch(epoch: usize, warm_epochs: usize) -> Stage {
    StageSchedule { warm_epochs }.stage(epoch)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Head {
    /// `logits = W^T f + b`.
    Affine,
    /// `logits_j = cos(w_j, f) / temperature`, no bias.
    Cosine { temperature: f64 },
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    /// `out x in`.
    weights: DMatrix<f64>,
    bias: DVector<f64>,
}

/// Linear softmax or one-hidden-layer tanh perceptron with an affine or cosine head.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyClassifier {
    hidden: Option<Dense>,
    /// `features x classes`; column `j` is class `j`'s weight vector.
    head_weights: DMatrix<f64>,
    head_bias: DVector<f64>,
    head: Head,
}

/// Parameter gradients, shaped like the classifier's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    hidden: Option<Dense>,
    head_weights: DMatrix<f64>,
    head_bias: DVector<f64>,
}

impl Gradients {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(h) = &self.hidden {
            out.extend(h.weights.iter());
            out.extend(h.bias.iter());
        }
        out.extend(self.head_weights.iter());
        out.extend(self.head_bias.iter());
        out
    }
}

/// Per-sample loss settings used by the classifier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleLoss {
    pub kind: LossKind,
    pub focal_gamma: f64,
}

impl ToyClassifier {
    pub fn new(
        architecture: Architecture,
        input_dim: usize,
        hidden_units: usize,
        classes: usize,
        head: Head,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut init = |rows: usize, cols: usize, fan_in: usize| {
            let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("valid std");
            DMatrix::from_fn(rows, cols, |_, _| normal.sample(rng))
        };
        let hidden = (architecture == Architecture::Mlp).then(|| Dense {
            weights: init(hidden_units, input_dim, input_dim),
            bias: DVector::zeros(hidden_units),
        });
        let feature_dim = hidden.as_ref().map_or(input_dim, |h| h.weights.nrows());
        Self {
            hidden,
            head_weights: init(feature_dim, classes, feature_dim),
            head_bias: DVector::zeros(classes),
            head,
        }
    }

    pub fn classes(&self) -> usize {
        self.head_weights.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.hidden
            .as_ref()
            .map_or(self.head_weights.nrows(), |h| h.weights.ncols())
    }

    pub fn feature_dim(&self) -> usize {
        self.head_weights.nrows()
    }

    pub fn head(&self) -> Head {
        self.head
    }

    /// Penultimate representation of one sample.
    pub fn features(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.hidden {
            Some(h) => (&h.weights * x + &h.bias).map(f64::tanh),
            None => x.clone(),
        }
    }

    /// Penultimate representations of a `d x b` batch.
    pub fn batch_features(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.hidden {
            Some(h) => {
                let mut pre = &h.weights * x;
                for mut col in pre.column_iter_mut() {
                    col += &h.bias;
                }
                pre.map(f64::tanh)
            }
            None => x.clone(),
        }
    }

    fn logits_from_features(&self, f: &DVector<f64>) -> Vec<f64> {
        match self.head {
            Head::Affine => (self.head_weights.tr_mul(f) + &self.head_bias)
                .iter()
                .copied()
                .collect(),
            Head::Cosine { temperature } => {
                let fn_ = f.norm();
                self.head_weights
                    .column_iter()
                    .map(|w| w.dot(f) / (w.norm() * fn_ * temperature))
                    .collect()
            }
        }
    }

    pub fn logits(&self, x: &DVector<f64>) -> Vec<f64> {
        self.logits_from_features(&self.features(x))
    }

    pub fn predict(&self, x: &DVector<f64>) -> usize {
        argmax(&self.logits(x))
    }

    /// Mean of `multipliers[y] * loss(x, y)` over the batch columns, with its
    /// analytic parameter gradient.
    pub fn batch_loss_and_grad(
        &self,
        x: &DMatrix<f64>,
        labels: &[usize],
        multipliers: &[f64],
        loss: SampleLoss,
    ) -> Result<(f64, Gradients)> {
        let b = x.ncols();
        if b == 0 || labels.len() != b {
            return Err(Error::ShapeMismatch(format!(
                "{b} samples with {} labels",
                labels.len()
            )));
        }
        if x.nrows() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "input dim {}, model expects {}",
                x.nrows(),
                self.input_dim()
            )));
        }
        if multipliers.len() != self.classes() {
            return Err(Error::ShapeMismatch(format!(
                "{} multipliers for {} classes",
                multipliers.len(),
                self.classes()
            )));
        }

        let mut grads = Gradients {
            hidden: self.hidden.as_ref().map(|h| Dense {
                weights: DMatrix::zeros(h.weights.nrows(), h.weights.ncols()),
                bias: DVector::zeros(h.bias.len()),
            }),
            head_weights: DMatrix::zeros(self.head_weights.nrows(), self.head_weights.ncols()),
            head_bias: DVector::zeros(self.classes()),
        };
        let mut total = 0.0;
        let scale = 1.0 / b as f64;

        for (col, &y) in x.column_iter().zip(labels) {
            if y >= self.classes() {
                return Err(Error::InvalidLabel {
                    label: y,
                    classes: self.classes(),
                });
            }
            let xi = col.clone_owned();
            let f = self.features(&xi);
            let weight = multipliers[y];

            let grad_f = match (self.head, loss.kind) {
                (Head::Cosine { temperature }, LossKind::NormSoftmax) => {
                    let out = dsb_nsm(&f, &self.head_weights, y, temperature, weight)?;
                    total += out.loss;
                    grads.head_weights += out.grad_weights * scale;
                    out.grad_embedding
                }
                (Head::Affine, LossKind::CrossEntropy | LossKind::Focal) => {
                    let logits = self.logits_from_features(&f);
                    let LossGrad { loss: l, grad } = if loss.kind == LossKind::Focal {
                        dsb_focal_logits(&logits, y, loss.focal_gamma, weight)?
                    } else {
                        weighted_ce(&logits, y, weight)?
                    };
                    total += l;
                    let g = DVector::from_vec(grad);
                    grads.head_weights.ger(scale, &f, &g, 1.0);
                    grads.head_bias.axpy(scale, &g, 1.0);
                    &self.head_weights * g
                }
                (head, kind) => {
                    return Err(Error::InvalidConfig(format!(
                        "loss {kind:?} is not supported with head {head:?}"
                    )))
                }
            };

            if let (Some(h), Some(gh)) = (&self.hidden, grads.hidden.as_mut()) {
                let g_pre = grad_f.component_mul(&f.map(|v| 1.0 - v * v));
                gh.weights.ger(scale, &g_pre, &xi, 1.0);
                gh.bias.axpy(scale, &g_pre, 1.0);
                debug_assert_eq!(h.weights.nrows(), g_pre.len());
            }
        }
        Ok((total * scale, grads))
    }

    pub fn sgd_step(&mut self, grads: &Gradients, learning_rate: f64) {
        if let (Some(h), Some(g)) = (self.hidden.as_mut(), grads.hidden.as_ref()) {
            h.weights -= &g.weights * learning_rate;
            h.bias.axpy(-learning_rate, &g.bias, 1.0);
        }
        self.head_weights -= &grads.head_weights * learning_rate;
        if self.head == Head::Affine {
            self.head_bias.axpy(-learning_rate, &grads.head_bias, 1.0);
        }
    }

    /// All parameters flattened in the same order as [`Gradients::to_vec`].
    pub fn params_vec(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(h) = &self.hidden {
            out.extend(h.weights.iter());
            out.extend(h.bias.iter());
        }
        out.extend(self.head_weights.iter());
        out.extend(self.head_bias.iter());
        out
    }

    pub fn set_params_vec(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params_vec().len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters given, model has {}",
                params.len(),
                self.params_vec().len()
            )));
        }
        let mut it = params.iter().copied();
        let mut fill = |dst: &mut [f64]| dst.iter_mut().for_each(|v| *v = it.next().unwrap());
        if let Some(h) = self.hidden.as_mut() {
            fill(h.weights.as_mut_slice());
            fill(h.bias.as_mut_slice());
        }
        fill(self.head_weights.as_mut_slice());
        fill(self.head_bias.as_mut_slice());
        Ok(())
    }
}

fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
        .0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub epoch: usize,
    /// 0-based iteration within the epoch.
    pub iteration: usize,
    pub stage: Stage,
    pub batch_loss: f64,
    /// Loss multiplier applied to each class in this iteration.
    pub class_weights: Vec<f64>,
    pub pool_size: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ToyClassifier,
    pub trace: Vec<TraceEvent>,
    /// Scales of the pool contents after the last iteration.
    pub final_report: SemanticScaleReport,
    pub pool: StoragePool,
}

/// Number of classes `C` when labels cover exactly `0..C`.
fn contiguous_classes(dataset: &LabeledFeatureSet) -> Result<usize> {
    let ids = dataset.class_ids();
    if ids.len() < 2 {
        return Err(Error::NeedsTwoClasses(ids.len()));
    }
    if ids.iter().enumerate().any(|(i, &id)| i != id) {
        return Err(Error::InvalidInput(format!(
            "labels must cover 0..{} without gaps",
            ids.len()
        )));
    }
    Ok(ids.len())
}

pub fn train(dataset: &LabeledFeatureSet, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let classes = contiguous_classes(dataset)?;
    let n = dataset.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let head = match config.loss {
        LossKind::NormSoftmax => Head::Cosine {
            temperature: config.temperature,
        },
        _ => Head::Affine,
    };
    let mut model = ToyClassifier::new(
        config.architecture,
        dataset.dim(),
        config.hidden_units,
        classes,
        head,
        &mut rng,
    );
    let sample_loss = SampleLoss {
        kind: config.loss,
        focal_gamma: config.focal_gamma,
    };
    let volume = VolumeParams::new(config.epsilon)?;
    let schedule = config.schedule();
    let mut pool = StoragePool::new(n, POOL_FEATURE_DIM)?;

    let uniform = vec![1.0; classes];
    let mut multipliers = uniform.clone();
    let mut reweight_iterations = 0usize;
    let mut trace = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 1..=config.epochs {
        let stage = schedule.stage(epoch);
        order.shuffle(&mut rng);
        for (iteration, chunk) in order.chunks(config.batch_size).enumerate() {
            let x = dataset.values().select_columns(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| dataset.labels()[i]).collect();

            let (reduced, _) = reduce_features_padded(&model.batch_features(&x), POOL_FEATURE_DIM)?;
            if epoch > 1 {
                pool.pop_oldest_batch()?;
            }
            pool.push_batch(&reduced, &labels)?;

            let applied = if stage == Stage::Reweight {
                if reweight_iterations.is_multiple_of(config.scale_every) {
                    let report =
                        pool_scales(&pool, classes, config.alpha(), &volume, config.dataset_kind)?;
                    let weights = dsb_weights(&report.combined_scales())?;
                    multipliers = weights.multipliers(config.weight_scaling);
                }
                reweight_iterations += 1;
                &multipliers
            } else {
                &uniform
            };

            let (batch_loss, grads) =
                model.batch_loss_and_grad(&x, &labels, applied, sample_loss)?;
            model.sgd_step(&grads, config.learning_rate);
            trace.push(TraceEvent {
                epoch,
                iteration,
                stage,
                batch_loss,
                class_weights: applied.clone(),
                pool_size: pool.len(),
            });
        }
    }

    let final_report = pool_scales(&pool, classes, config.alpha(), &volume, config.dataset_kind)?;
    Ok(TrainOutcome {
        model,
        trace,
        final_report,
        pool,
    })
}

/// Trace as CSV: `epoch,iteration,stage,loss,w_0..w_{C-1},pool_size`, preceded
/// by a `#` comment line naming the weight convention.
pub fn trace_to_csv(trace: &[TraceEvent], scaling: WeightScaling) -> String {
    let classes = trace.first().map_or(0, |e| e.class_weights.len());
    let mut out = match scaling {
        WeightScaling::MeanOne => String::from(
            "# weights: C * alpha_y (normalized inverse combined scale rescaled to mean 1)\n",
        ),
        WeightScaling::Normalized => {
            String::from("# weights: alpha_y (normalized inverse combined scale)\n")
        }
    };
    out.push_str("epoch,iteration,stage,loss");
    for c in 0..classes {
        let _ = write!(out, ",w_{c}");
    }
    out.push_str(",pool_size\n");
    for e in trace {
        let _ = write!(
            out,
            "{},{},{},{:?}",
            e.epoch,
            e.iteration,
            e.stage.number(),
            e.batch_loss
        );
        for w in &e.class_weights {
            let _ = write!(out, ",{w:?}");
        }
        let _ = writeln!(out, ",{}", e.pool_size);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub per_class_recall: Vec<f64>,
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Evaluation {
    pub fn worst_recall(&self) -> f64 {
        self.per_class_recall
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// Population standard deviation of the per-class recalls.
    pub fn recall_std(&self) -> f64 {
        let n = self.per_class_recall.len() as f64;
        let mean = self.per_class_recall.iter().sum::<f64>() / n;
        (self
            .per_class_recall
            .iter()
            .map(|r| (r - mean).powi(2))
            .sum::<f64>()
            / n)
            .sqrt()
    }
}

pub fn evaluate(model: &ToyClassifier, dataset: &LabeledFeatureSet) -> Result<Evaluation> {
    let classes = model.classes();
    if dataset.dim() != model.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "dataset dim {}, model expects {}",
            dataset.dim(),
            model.input_dim()
        )));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (col, &y) in dataset.values().column_iter().zip(dataset.labels()) {
        if y >= classes {
            return Err(Error::InvalidLabel { label: y, classes });
        }
        confusion[y][model.predict(&col.clone_owned())] += 1;
    }
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let per_class_recall = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let total: usize = row.iter().sum();
            if total == 0 {
                0.0
            } else {
                row[c] as f64 / total as f64
            }
        })
        .collect();
    Ok(Evaluation {
        per_class_recall,
        accuracy: correct as f64 / dataset.len() as f64,
        confusion,
    })
}

/// Class means and isotropic standard deviations of the shipped 2-D benchmark.
pub const BENCHMARK_CLASSES: [([f64; 2], f64); 3] =
    [([0.0, 0.0], 1.5), ([3.0, 0.0], 1.5), ([1.5, 1.0], 0.4)];

/// Three Gaussian classes in the plane; class 2 is narrow and sits between the
/// two wide ones, giving it a small semantic scale.
pub fn gaussian_benchmark(samples_per_class: usize, seed: u64) -> LabeledFeatureSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = samples_per_class * BENCHMARK_CLASSES.len();
    let mut values = DMatrix::zeros(2, total);
    let mut labels = Vec::with_capacity(total);
    for (class, (mean, std)) in BENCHMARK_CLASSES.iter().enumerate() {
        let normal = Normal::new(0.0, *std).expect("valid std");
        for _ in 0..samples_per_class {
            let col = labels.len();
            values[(0, col)] = mean[0] + normal.sample(&mut rng);
            values[(1, col)] = mean[1] + normal.sample(&mut rng);
            labels.push(class);
        }
    }
    LabeledFeatureSet::new(values, labels).expect("finite benchmark data")
}
