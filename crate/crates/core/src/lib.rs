//! Online test-time adaptation on distribution-shifted streams.
//!
//! The crate bundles everything the experiment runner needs: a small
//! classifier with a normalization layer ([`model`]), object-destructive
//! image transforms ([`transforms`]), biased/shifted stream construction
//! ([`data`]), the entropy + PLPD adaptation engine ([`deyo`]), a
//! disentangled-factor simulator that verifies the harmful-sample analysis
//! against a brute-force oracle ([`theory`]), and evaluation analyses
//! ([`metrics`]).

pub mod data;
pub mod deyo;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod theory;
pub mod transforms;

pub use data::{Batch, LabeledImage, ScenarioKind, ScenarioSpec, Split};
pub use deyo::{AdaptConfig, ComponentFlags, RunCounters, RunResult, SampleRecord};
pub use error::{Error, Result};
pub use metrics::EvalRecord;
pub use model::{ModelState, NormKind, Prediction, PretrainConfig};
pub use numerics::{Matrix, Rng};
pub use transforms::{ImageGrid, TransformKind, TransformSpec};
