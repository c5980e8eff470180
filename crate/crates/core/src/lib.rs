//! Self-supervised representation learning with invariant prediction across
//! augmentations.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors with tape-based reverse-mode gradients.
//! - [`nn`]: MLP encoders, LARS, the warmup+cosine schedule and EMA targets.
//! - [`augment`]: replayable image augmentation pipeline.
//! - [`objective`]: contrastive loss with the KL invariance penalty and presets.
//! - [`refine`]: partition algebra (fineness, common refinements).
//! - [`causal`]: finite structural causal models and brute-force invariance checks.
//! - [`datagen`]: synthetic content/style images and noise corruptions.
//! - [`metrics`]: linear probe, LDA ratio, class variance, corruption errors, overlap graphs.
//! - [`harness`]: run configuration, checkpoints, metrics logs and experiment drivers.

pub mod augment;
pub mod causal;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod objective;
pub mod refine;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
