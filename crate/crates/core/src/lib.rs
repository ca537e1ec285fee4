//! Gloss-to-pose sign language production.
//!
//! The crate is organised bottom-up:
//!
//! - [`diffcore`]: dense `f64` tensors with a reverse-mode tape and a
//!   finite-difference gradient checker.
//! - [`seqmodel`]: transformer gloss encoder, recursive pose decoder and the
//!   pose fitting loss.
//! - [`aligner`]: fine-grained frame/gloss best-match similarity and the
//!   symmetric temperature-scaled alignment loss.
//! - [`comparator`]: sequence-level similarity table, margin constraints and
//!   the additive-margin comparison loss.
//! - [`synthcorpus`]: deterministic synthetic corpus with ground-truth
//!   monotonic alignments.
//! - [`evalkit`]: MPJPE, DTW-P, pose-space Fréchet distance and alignment
//!   metrics, plus heatmap export.
//! - [`trainer`]: joint objective, noise augmentation, batching, Adam and the
//!   training loop with checkpointing.

pub mod aligner;
pub mod comparator;
pub mod diffcore;
pub mod error;
pub mod evalkit;
pub mod seqmodel;
pub mod synthcorpus;
pub mod trainer;

pub use error::{Error, Result};
