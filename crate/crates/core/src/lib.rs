//! Adversarial prompt tuning for frozen graph encoders.
//!
//! The crate is organized bottom-up:
//!
//! - [`diffcore`]: dense matrices and a reverse-mode tape.
//! - [`graphdata`]: graphs, datasets, synthetic generators, JSONL I/O.
//! - [`backbone`]: the frozen GIN encoder and the classifier head.
//! - [`prompt`]: per-layer bottleneck prompts and the shared-vector baseline.
//! - [`attack`]: JointPGD and its single-channel restrictions.
//! - [`trainer`]: losses, Adam, warm-up and the alternating min-max loop.
//! - [`theory`]: closed-form optimal prompts for the linear encoder.
//! - [`metrics`]: masked ROC-AUC and robustness evaluation.

pub mod attack;
pub mod backbone;
pub mod diffcore;
pub mod error;
pub mod graphdata;
pub mod metrics;
pub mod model;
pub mod prompt;
pub mod rng;
pub mod theory;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
