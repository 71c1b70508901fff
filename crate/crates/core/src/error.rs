//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by tensor construction and graph operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, buffer has {got}")]
    ShapeBufferMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },

    #[error("matmul dimension mismatch: {lhs:?} x {rhs:?}")]
    MatmulMismatch { lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("{op}: operand shapes {lhs:?} and {rhs:?} are incompatible")]
    BinaryShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected {expected}, got shape {got:?}")]
    Contract {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },

    #[error("backward requires a scalar loss node, got shape {0:?}")]
    BackwardNonScalar(Vec<usize>),

    #[error("probability {value} at row {row}, class {class} is not positive under a nonzero target weight")]
    ProbabilityDomain { row: usize, class: usize, value: f64 },

    #[error("label {label} out of range for {classes} classes (row {row})")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },
}

/// Errors raised by the optimizer and learning-rate schedule.
#[derive(Debug, Error)]
pub enum OptimError {
    #[error("schedule exhausted: step {step} past total_steps {total}")]
    ScheduleExhausted { step: usize, total: usize },

    #[error("invalid schedule: warmup {warmup} exceeds total {total} or total is zero")]
    InvalidSchedule { warmup: usize, total: usize },

    #[error("non-finite gradient in parameter \"{name}\"")]
    NonFiniteGradient { name: String },

    #[error("optimizer state mismatch for \"{name}\": parameter has {param} elements, {which} moment has {state}")]
    StateShapeMismatch {
        name: String,
        which: &'static str,
        param: usize,
        state: usize,
    },

    #[error("gradient set mismatch: {params} parameters, {grads} gradients")]
    GradCountMismatch { params: usize, grads: usize },
}

/// Errors raised by model configuration and the forward pass.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("positional encoding requires an even latent dimension, got {0}")]
    OddLatentDim(usize),

    #[error("batch shape {got:?} does not match config (seq_len {seq}, input_dim {dim})")]
    BatchShape {
        got: Vec<usize>,
        seq: usize,
        dim: usize,
    },

    #[error("bundle has no normalization stats; fit them on the training split first")]
    MissingNormStats,

    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Errors raised by ingestion, preprocessing, and splitting.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    #[error("recording too short to trim: {samples} samples \u{2264} {required} (2 x {trim_s} s at {rate} Hz)")]
    TooShort {
        samples: usize,
        required: usize,
        trim_s: f64,
        rate: f64,
    },

    #[error("window set is empty")]
    EmptySet,

    #[error("window set already normalized")]
    AlreadyNormalized,

    #[error("window set not normalized")]
    NotNormalized,

    #[error("class \"{class}\" has {count} windows, need at least {min}")]
    ClassTooSmall {
        class: String,
        count: usize,
        min: usize,
    },

    #[error("invalid segmentation: window {window}, step {step}")]
    InvalidSegmentation { window: usize, step: usize },

    #[error("cache file corrupt: {0}")]
    CorruptCache(String),

    #[error("unsupported cache version {0}")]
    CacheVersion(u32),
}

/// Errors raised by the training loop.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error(transparent)]
    Data(#[from] DataError),

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Optim(#[from] OptimError),

    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Errors raised by the scoring and report layer.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot compute accuracy over an empty window set")]
    EmptyWindowSet,

    #[error("no threshold defined: no patient meets the NRS improvement criterion")]
    NoImprovedPatients,

    #[error("duplicate patient id \"{0}\" in outcome rows")]
    DuplicatePatient(String),

    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Errors raised by bundle serialization.
#[derive(Debug, Error)]
pub enum BundleError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("bundle file corrupt: {0}")]
    Corrupt(String),

    #[error("unsupported bundle version {0}")]
    Version(u32),

    #[error(transparent)]
    Model(#[from] ModelError),
}
