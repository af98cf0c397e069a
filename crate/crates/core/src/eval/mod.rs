//! One-pass evaluation: per-frame center error and overlap, MPR/MSR/NPR
//! curves and scalars, and per-pattern / per-ratio subset aggregation.
//!
//! The "maximum" rates are realized per frame: where two ground-truth
//! annotations exist (one per modality), each frame scores against its
//! best match — smallest center error, largest overlap. The whole-curve
//! alternative (pointwise max over per-annotation curves) is computed as
//! well and exported alongside.

mod files;
mod metrics;
mod report;

pub use files::parse_box_file;
pub use metrics::{
    center_error, evaluate_sequence, overlap_iou, MetricConfig, MetricCurve, Scalars, SequenceEval,
};
pub use report::{evaluate_dataset, EvalReport, ReportMeta, SequenceData, SequenceRecord, SubsetTable};

use serde::{Deserialize, Serialize};

/// Axis-aligned box: top-left corner plus width and height, in pixels.
/// A box with zero width or height is a reported-absent prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BoundingBox { x, y, w, h }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn has_area(&self) -> bool {
        self.w > 0.0 && self.h > 0.0
    }
}

/// Per-frame box predictions for one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub name: String,
    pub boxes: Vec<BoundingBox>,
}
