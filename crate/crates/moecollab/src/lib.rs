//! Collaborative mixture-of-experts text classification.
//!
//! A compact transformer encoder is pretrained once and frozen; independent
//! contributors fine-tune small adapter experts on their own domains and
//! publish them as checksummed bundles in a shared registry; a gating
//! network is then trained to blend any compatible selection of experts
//! into one multi-domain classifier — no joint retraining, no raw data
//! exchange.
//!
//! The pipeline end to end:
//!
//! 1. [`data`]: synthesize or load a multi-domain corpus.
//! 2. [`encoder`] + [`train::pretrain_encoder`]: pretrain the shared
//!    encoder, then freeze it.
//! 3. [`expert`] + [`train::train_expert`]: fine-tune per-domain adapter
//!    experts against the frozen encoder.
//! 4. [`registry`]: package experts as bundles, validate compatibility
//!    (encoder fingerprint, dimensions, label space), version them.
//! 5. [`moe`] + [`gating`] + [`train::train_gating`]: assemble a model from
//!    registered experts and train the gate under the entropy-regularized
//!    objective.
//!
//! Everything is deterministic given the seeds; all numerics are plain
//! `f64` on the CPU.

pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod expert;
pub mod gating;
pub mod hash;
pub mod moe;
pub mod ndmath;
pub mod registry;
pub mod train;

pub use error::{Error, Result};
