//! Sequence-to-sequence sleep staging and source-to-target transfer learning.
//!
//! The crate is `no_std` (it needs `alloc`) and carries every numerical part of
//! the pipeline: canonical recording transforms, time-frequency features, a
//! small reverse-mode autodiff engine, the recurrent/convolutional layers, the
//! two network families, Adam training with early stopping, finetuning with
//! frozen parameter groups, ensemble inference, metrics and a seeded synthetic
//! domain generator. File formats and the command line live in the `seqsleep`
//! crate.
//!
//! A network follows a three-block layout: an epoch processing block (EPB)
//! maps each epoch of the input sequence to a feature vector with shared
//! weights, a bidirectional sequence processing block (SPB) turns those
//! vectors into context-aware outputs, and one softmax head shared across
//! all positions classifies every epoch of the sequence.

#![no_std]
#![deny(missing_debug_implementations)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod error;
pub mod features;
pub mod inference;
pub mod layers;
pub mod models;
pub mod params;
pub mod recordings;
pub mod synthdomain;
pub mod training;
pub mod transfer;

pub use error::{Error, Result};
pub use models::{Model, ModelConfig, ModelKind};
pub use params::{Group, GroupSet, ParameterStore};
pub use recordings::{Recording, StageLabel};

/// Number of sleep stages handled by every model head.
pub const N_CLASSES: usize = 5;
