use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid parameter: {0}")]
    InvalidParams(String),

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("at least two classes are required, got {0}")]
    NeedsTwoClasses(usize),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("scale {value} of class index {index} is not strictly positive")]
    InvalidScale { index: usize, value: f64 },

    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("probability {0} is outside (0, 1]")]
    InvalidProbability(f64),

    #[error("zero-norm vector: {0}")]
    DegenerateVector(String),

    #[error("pool capacity {capacity} exceeded: holding {held}, pushing {pushed}")]
    CapacityExceeded {
        capacity: usize,
        held: usize,
        pushed: usize,
    },

    #[error("pool underflow: requested {requested}, holding {held}")]
    PoolUnderflow { requested: usize, held: usize },

    #[error("class {0} has no rows in the pool")]
    MissingClass(usize),

    #[error("invalid training config: {0}")]
    InvalidConfig(String),

    #[error("class {class} has {available} samples, {requested} requested")]
    InsufficientSamples {
        class: usize,
        available: usize,
        requested: usize,
    },

    #[error("invalid scale history: {0}")]
    InvalidHistory(String),
}
