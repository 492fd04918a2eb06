//! Retrieval-augmented linear recurrent sequence models.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] – dense tensors, reverse-mode tape, seeded randomness.
//! * [`layers`] – gated recurrence, linear attention, RMSNorm, SwiGLU.
//! * [`resona`] – chunk-and-search retrieval, masked cross-attention
//!   integration and gated mixing.
//! * [`tasks`] – synthetic recall benchmarks and dataset files.
//! * [`trainer`] – model assembly, AdamW, schedules, checkpoints, decoding.
//! * [`bench`], [`report`], [`verify`] – experiment tooling.

pub mod error;
pub mod tensor;

pub mod layers;
pub mod params;
pub mod resona;
pub mod tasks;
pub mod trainer;
pub mod bench;
pub mod report;
pub mod verify;

pub use error::{Error, Result};
