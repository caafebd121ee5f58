//! Parameter-level model consolidation toolkit.
//!
//! Merges independently fine-tuned expert models into one set of parameters.
//! The crate provides:
//!
//! - dense tensors with the numerical kernels merging needs ([`tensor`]);
//! - the MRGF checkpoint container with an architecture manifest ([`checkpoint`]);
//! - task-vector construction, normalization, and geometry diagnostics ([`taskvec`]);
//! - twenty merging operators behind one recipe interface ([`merge`] and, for
//!   the calibration-dependent ones, [`calibrate`]);
//! - a synthetic multi-expert testbed that trains experts, a joint baseline,
//!   and evaluates every recipe side by side ([`testbed`]).
//!
//! The `consolidate` binary exposes all of it on the command line.

pub mod calibrate;
pub mod checkpoint;
pub mod error;
pub mod merge;
pub mod mlp;
pub mod taskvec;
pub mod tensor;
pub mod testbed;

pub use error::{Error, Result};
