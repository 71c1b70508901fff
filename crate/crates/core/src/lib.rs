//! Activity-classification treatment scoring over inertial sensor data.
//!
//! The pipeline: ingest 6-channel IMU recordings, preprocess them into
//! labeled windows ([`data`]), train a transformer window classifier
//! ([`model`], [`train`]) with AdamW and a warmup/cosine schedule ([`optim`],
//! [`graph`]), then score each patient by the drop in classification accuracy
//! from pre- to post-treatment data ([`eval`]). A synthetic cohort generator
//! ([`simgen`]) makes the whole chain testable without clinical data.

pub mod bundle;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod optim;
pub mod simgen;
pub mod tensor;
pub mod train;

pub use tensor::Tensor;
