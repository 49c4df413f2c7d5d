//! Embedding-space adversarial training on deterministic synthetic tasks.
//!
//! The crate is organized bottom-up:
//!
//! * [`autodiff`]: dense `f64` tensors and a tape-based reverse-mode engine.
//! * [`model`]: a bag-of-embeddings encoder with ranking and pairwise heads.
//! * [`adversarial`]: l-infinity perturbation search over input embeddings
//!   and the label / smoothness / combined training objectives built on it.
//! * [`optim`]: Adam with warmup-decay scheduling, gradient clipping, and
//!   the training loop.
//! * [`data`]: a seeded generator for key-token lookup tasks, plus
//!   splitting and JSON-lines persistence.
//! * [`metrics`]: accuracy, exact match, set-overlap F1, and robust
//!   accuracy under an embedding-space attack.
//! * [`harness`]: multi-seed objective comparisons and the command-line
//!   interface.
//!
//! Everything is deterministic given explicit seeds: identical inputs give
//! bitwise-identical outputs on every layer of the stack.

pub mod adversarial;
pub mod autodiff;
pub mod data;
mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod optim;

pub use error::{Error, Result};
