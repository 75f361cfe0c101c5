//! Semantic scale: per-class feature volume as a measure of class diversity,
//! and loss re-weighting driven by it.

pub mod applications;
pub mod error;
pub mod feature_pool;
pub mod geometry;
pub mod imbalance;
pub mod reweight;
pub mod trainer;

pub use error::{Error, Result};
pub use feature_pool::{Stage, StageSchedule, StoragePool};
pub use geometry::{feature_volume, LabeledFeatureSet, VolumeParams};
pub use imbalance::{imbalance_report, DatasetKind, SemanticScaleReport};
pub use reweight::{dsb_weights, DsbWeights, LossKind, WeightScaling};
pub use trainer::{train, TrainConfig};
