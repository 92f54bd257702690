//! Library surface of the experiment runner, kept separate from the binary
//! so the acceptance suite can drive runs in-process.

pub mod config;
pub mod runner;

pub use config::{Dataset, Method, RunConfig};
pub use runner::{ablation, pretrain_to_checkpoint, run, sweep, verify_theory, RunArtifacts};
