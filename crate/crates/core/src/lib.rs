//! misskit-core: a desk-scale toolkit for dual-modality (RGB + thermal)
//! tracking under missing modalities.
//!
//! The crate has three legs:
//!
//! - a tracker: tensor engine with reverse-mode gradients, a
//!   shared/specific transformer backbone with selectable fusion units, and
//!   invertible coupling-based prompters that synthesize features for a
//!   missing modality from the available one;
//! - a benchmark simulator that turns sequence metadata into deterministic
//!   per-frame modality-availability schedules (five missing patterns,
//!   three missing ratios);
//! - an evaluation engine implementing the one-pass protocol with
//!   MPR/MSR/NPR curves and per-pattern / per-ratio subset reports.

pub mod checkpoint;
pub mod compensate;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod prompter;
pub mod rng;
pub mod sim;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{AdamW, LrPolicy, OptimConfig, ParamSet, Parameter, Tape, Tensor, TensorId};

/// Version stamped into every file format this crate reads or writes.
pub const FORMAT_VERSION: u32 = 1;
