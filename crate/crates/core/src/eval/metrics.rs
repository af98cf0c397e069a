use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::BoundingBox;

/// Euclidean distance between box centers, in pixels.
pub fn center_error(pred: &BoundingBox, gt: &BoundingBox) -> f64 {
    let (px, py) = pred.center();
    let (gx, gy) = gt.center();
    ((px - gx) * (px - gx) + (py - gy) * (py - gy)).sqrt()
}

/// Intersection over union. A prediction without area scores zero.
pub fn overlap_iou(pred: &BoundingBox, gt: &BoundingBox) -> f64 {
    if !pred.has_area() {
        return 0.0;
    }
    let ix = (pred.x + pred.w).min(gt.x + gt.w) - pred.x.max(gt.x);
    let iy = (pred.y + pred.h).min(gt.y + gt.h) - pred.y.max(gt.y);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    inter / (pred.area() + gt.area() - inter)
}

/// Center error with each component scaled by the ground-truth box size,
/// so the measure is invariant to global rescaling.
fn normalized_center_error(pred: &BoundingBox, gt: &BoundingBox) -> f64 {
    let (px, py) = pred.center();
    let (gx, gy) = gt.center();
    let dx = (px - gx) / gt.w;
    let dy = (py - gy) / gt.h;
    (dx * dx + dy * dy).sqrt()
}

/// Threshold grids and the precision threshold the MPR scalar reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    /// Precision curve: 0..=pr_max pixels in steps of pr_step.
    pub pr_max: f64,
    pub pr_step: f64,
    /// Threshold at which the precision scalar is read (pixels).
    pub pr_threshold_px: f64,
    /// Success curve sample count over overlap in [0, 1].
    pub success_samples: usize,
    /// Normalized-precision curve: 0..=npr_max in steps of npr_step.
    pub npr_max: f64,
    pub npr_step: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            pr_max: 50.0,
            pr_step: 1.0,
            pr_threshold_px: 20.0,
            success_samples: 21,
            npr_max: 0.5,
            npr_step: 0.005,
        }
    }
}

impl MetricConfig {
    pub fn precision_thresholds(&self) -> Vec<f64> {
        let n = (self.pr_max / self.pr_step).round() as usize + 1;
        (0..n).map(|i| i as f64 * self.pr_step).collect()
    }

    pub fn success_thresholds(&self) -> Vec<f64> {
        let n = self.success_samples.max(2);
        (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
    }

    pub fn npr_thresholds(&self) -> Vec<f64> {
        let n = (self.npr_max / self.npr_step).round() as usize + 1;
        (0..n).map(|i| i as f64 * self.npr_step).collect()
    }
}

/// One metric curve: threshold grid and the fraction of frames passing
/// at each threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCurve {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
}

impl MetricCurve {
    /// Pointwise mean of several curves over a shared grid.
    pub fn mean_of(curves: &[&MetricCurve]) -> MetricCurve {
        let first = curves.first().expect("at least one curve");
        let mut values = vec![0.0; first.values.len()];
        for c in curves {
            for (acc, v) in values.iter_mut().zip(&c.values) {
                *acc += v;
            }
        }
        for v in &mut values {
            *v /= curves.len() as f64;
        }
        MetricCurve { thresholds: first.thresholds.clone(), values }
    }

    fn pointwise_max(a: &MetricCurve, b: &MetricCurve) -> MetricCurve {
        MetricCurve {
            thresholds: a.thresholds.clone(),
            values: a.values.iter().zip(&b.values).map(|(x, y)| x.max(*y)).collect(),
        }
    }
}

/// The three headline scalars.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scalars {
    pub mpr: f64,
    pub msr: f64,
    pub npr: f64,
}

impl Scalars {
    pub fn zero() -> Self {
        Scalars { mpr: 0.0, msr: 0.0, npr: 0.0 }
    }
}

/// Precision value read at the configured pixel threshold.
pub fn mpr(curve: &MetricCurve, threshold_px: f64) -> f64 {
    curve
        .thresholds
        .iter()
        .position(|&t| (t - threshold_px).abs() < 1e-9)
        .map(|i| curve.values[i])
        .unwrap_or_else(|| {
            // threshold off the grid: nearest sample
            let i = curve
                .thresholds
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    (**a - threshold_px).abs().partial_cmp(&(**b - threshold_px).abs()).unwrap()
                })
                .map(|(i, _)| i)
                .unwrap_or(0);
            curve.values[i]
        })
}

/// Area under the success curve, realized as the mean of its samples.
pub fn msr(curve: &MetricCurve) -> f64 {
    curve.values.iter().sum::<f64>() / curve.values.len() as f64
}

/// Area under the normalized precision curve divided by its range,
/// likewise the mean of the samples.
pub fn npr(curve: &MetricCurve) -> f64 {
    curve.values.iter().sum::<f64>() / curve.values.len() as f64
}

/// Full evaluation of one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEval {
    pub frames_scored: usize,
    /// Frames excluded because every provided ground truth was degenerate.
    pub frames_skipped: usize,
    pub precision: MetricCurve,
    pub success: MetricCurve,
    pub norm_precision: MetricCurve,
    pub scalars: Scalars,
    /// Scalars from the whole-curve max variant (equal to `scalars` with a
    /// single ground truth).
    pub curve_max_scalars: Scalars,
}

struct FrameScore {
    err: f64,
    overlap: f64,
    norm_err: f64,
}

fn score_frames(
    pred: &[BoundingBox],
    gt: &[BoundingBox],
) -> (Vec<Option<FrameScore>>, usize) {
    let mut out = Vec::with_capacity(pred.len());
    let mut skipped = 0;
    for (p, g) in pred.iter().zip(gt) {
        if !g.has_area() {
            out.push(None);
            skipped += 1;
        } else {
            out.push(Some(FrameScore {
                err: center_error(p, g),
                overlap: overlap_iou(p, g),
                norm_err: normalized_center_error(p, g),
            }));
        }
    }
    (out, skipped)
}

fn curves_from_scores(scores: &[Option<FrameScore>], config: &MetricConfig) -> SequenceEval {
    let valid: Vec<&FrameScore> = scores.iter().flatten().collect();
    let n = valid.len().max(1) as f64;

    let pr_t = config.precision_thresholds();
    let precision = MetricCurve {
        values: pr_t
            .iter()
            .map(|&t| valid.iter().filter(|s| s.err <= t).count() as f64 / n)
            .collect(),
        thresholds: pr_t,
    };

    let sc_t = config.success_thresholds();
    let success = MetricCurve {
        values: sc_t
            .iter()
            .map(|&t| valid.iter().filter(|s| s.overlap > t).count() as f64 / n)
            .collect(),
        thresholds: sc_t,
    };

    let np_t = config.npr_thresholds();
    let norm_precision = MetricCurve {
        values: np_t
            .iter()
            .map(|&t| valid.iter().filter(|s| s.norm_err <= t).count() as f64 / n)
            .collect(),
        thresholds: np_t,
    };

    let scalars = Scalars {
        mpr: mpr(&precision, config.pr_threshold_px),
        msr: msr(&success),
        npr: npr(&norm_precision),
    };
    SequenceEval {
        frames_scored: valid.len(),
        frames_skipped: scores.len() - valid.len(),
        precision,
        success,
        norm_precision,
        curve_max_scalars: scalars,
        scalars,
    }
}

/// Evaluates one trajectory against one or two ground-truth tracks.
///
/// With two tracks, each frame scores against its better match (the
/// per-frame realization of the maximum rates); a frame is skipped only
/// when every provided annotation for it is degenerate.
pub fn evaluate_sequence(
    pred: &[BoundingBox],
    gt_rgb: &[BoundingBox],
    gt_tir: Option<&[BoundingBox]>,
    config: &MetricConfig,
) -> Result<SequenceEval> {
    if pred.len() != gt_rgb.len() {
        return Err(Error::Data(format!(
            "trajectory has {} frames but ground truth has {}",
            pred.len(),
            gt_rgb.len()
        )));
    }
    if let Some(gt2) = gt_tir {
        if gt2.len() != pred.len() {
            return Err(Error::Data(format!(
                "trajectory has {} frames but second ground truth has {}",
                pred.len(),
                gt2.len()
            )));
        }
    }

    let (scores_rgb, _) = score_frames(pred, gt_rgb);
    let combined: Vec<Option<FrameScore>> = match gt_tir {
        None => scores_rgb,
        Some(gt2) => {
            let (scores_tir, _) = score_frames(pred, gt2);
            scores_rgb
                .into_iter()
                .zip(scores_tir)
                .map(|(a, b)| match (a, b) {
                    (Some(x), Some(y)) => Some(FrameScore {
                        err: x.err.min(y.err),
                        overlap: x.overlap.max(y.overlap),
                        norm_err: x.norm_err.min(y.norm_err),
                    }),
                    (Some(x), None) | (None, Some(x)) => Some(x),
                    (None, None) => None,
                })
                .collect()
        }
    };

    let mut eval = curves_from_scores(&combined, config);

    if let Some(gt2) = gt_tir {
        // whole-curve variant: evaluate against each annotation alone and
        // take the pointwise max of the curves
        let (s1, _) = score_frames(pred, gt_rgb);
        let (s2, _) = score_frames(pred, gt2);
        let e1 = curves_from_scores(&s1, config);
        let e2 = curves_from_scores(&s2, config);
        let pmax = MetricCurve::pointwise_max(&e1.precision, &e2.precision);
        let smax = MetricCurve::pointwise_max(&e1.success, &e2.success);
        let nmax = MetricCurve::pointwise_max(&e1.norm_precision, &e2.norm_precision);
        eval.curve_max_scalars = Scalars {
            mpr: mpr(&pmax, config.pr_threshold_px),
            msr: msr(&smax),
            npr: npr(&nmax),
        };
    }
    Ok(eval)
}
