//! Multi-teacher feature distillation at desk scale.
//!
//! A student network with a shared transformer stem learns to replicate the
//! per-level token representations of several frozen teacher networks, one
//! lightweight adapter path per teacher. Per-task routers then mix the stem
//! and adapter-path representations into task-specific features for dense
//! prediction heads.
//!
//! The crate is organized around the training pipeline:
//!
//! - [`tape`]: reverse-mode automatic differentiation over `f64` arrays,
//!   the substrate for every trainable component.
//! - [`model`]: the student body — patch embedding, transformer stem,
//!   adapter paths, level selection, teacher alignment.
//! - [`router`]: per-task, per-level noisy gating over the expert
//!   representations and their weighted fusion.
//! - [`losses`]: the distillation objective and the joint multi-task
//!   objective.
//! - [`tasks`]: decoder heads, task losses, the metric suite, the
//!   multi-task gain and bias-analysis arithmetic.
//! - [`teachers`]: deterministic synthetic teachers and the binary
//!   feature-file ingestion path.
//! - [`pipeline`]: two-stage training, evaluation, ablations, and the
//!   command-line surface in [`cli`].

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod grid;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod plot;
pub mod report;
pub mod router;
pub mod tape;
pub mod tasks;
pub mod teachers;

pub use error::{Error, Result};
