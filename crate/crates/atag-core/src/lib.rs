//! Temporal action proposal generation with an augmented transformer and an
//! adaptive graph convolutional branch.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] / [`tape`] — a small dense-tensor library with reverse-mode
//!   automatic differentiation, generic over [`scalar::Scalar`] (f32/f64).
//! * [`optim`] / [`gradcheck`] — Adam with a step-decay schedule, and a
//!   central finite-difference gradient checker.
//! * [`data`] — feature sequences, ground truth, linear resizing, sliding
//!   windows, channel split and the synthetic dataset generator.
//! * [`transformer`] / [`gcn`] — the global (attention) and local (adaptive
//!   graph) branches.
//! * [`heads`] — global/local fusion, boundary heads and the
//!   boundary-matching completeness maps.
//! * [`labels`] / [`loss`] — label assignment and the multi-task loss.
//! * [`model`] — the full network wiring both branches and all heads.
//! * [`postproc`] — proposal enumeration, score fusion, NMS and Soft-NMS.
//! * [`eval`] — tIoU, AR@AN, AUC and mAP.

pub mod data;
pub mod error;
pub mod eval;
pub mod gcn;
pub mod gradcheck;
pub mod heads;
pub mod labels;
pub mod loss;
pub mod model;
pub mod optim;
pub mod postproc;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod transformer;

pub use error::{CoreError, Result};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
