use crate::error::{Error, Result};
use crate::eval::BoundingBox;
use crate::model::{HeadForward, TrackerConfig};
use crate::tensor::{Tape, Tensor, TensorId};

/// Weights of the three task-loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub classification: f64,
    pub l1: f64,
    pub overlap: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { classification: 1.0, l1: 5.0, overlap: 2.0 }
    }
}

/// Scalar loss node plus the per-term breakdown (forward values).
#[derive(Debug, Clone, Copy)]
pub struct TaskLossTerms {
    pub total: TensorId,
    pub classification: f64,
    pub l1: f64,
    pub overlap: f64,
}

/// Classification target: a normalized Gaussian over the search grid
/// centered on the ground-truth center, sigma of one grid cell.
pub fn gaussian_target_map(gt: &BoundingBox, config: &TrackerConfig) -> Tensor {
    let side = config.score_side();
    let p = config.patch_size as f64;
    let (gx, gy) = gt.center();
    let sigma = p;
    let mut data = vec![0.0; side * side];
    for row in 0..side {
        for col in 0..side {
            let cx = col as f64 * p + p / 2.0;
            let cy = row as f64 * p + p / 2.0;
            let d2 = (cx - gx) * (cx - gx) + (cy - gy) * (cy - gy);
            data[row * side + col] = (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
    let sum: f64 = data.iter().sum();
    for v in &mut data {
        *v /= sum;
    }
    Tensor::new(vec![1, side * side], data).expect("grid-sized target")
}

fn validate_gt(gt: &BoundingBox, config: &TrackerConfig) -> Result<()> {
    if !gt.has_area() {
        return Err(Error::Data(format!(
            "degenerate ground-truth box {}x{}",
            gt.w, gt.h
        )));
    }
    let s = config.search_size as f64;
    if gt.x < 0.0 || gt.y < 0.0 || gt.x + gt.w > s || gt.y + gt.h > s {
        return Err(Error::Data(format!(
            "ground-truth box ({}, {}, {}, {}) outside the {s}px search region",
            gt.x, gt.y, gt.w, gt.h
        )));
    }
    Ok(())
}

/// 1 − generalized overlap between the predicted normalized box and the
/// ground truth, built from differentiable primitives; the value lies in
/// [0, 2].
fn giou_term(tape: &mut Tape, pred: TensorId, gt_norm: [f64; 4]) -> Result<TensorId> {
    let comp = |tape: &mut Tape, i: usize| tape.slice_channels(pred, i, i + 1);
    let cx = comp(tape, 0)?;
    let cy = comp(tape, 1)?;
    let w = comp(tape, 2)?;
    let h = comp(tape, 3)?;
    let half_w = tape.scale(w, 0.5);
    let half_h = tape.scale(h, 0.5);
    let x1 = tape.sub(cx, half_w)?;
    let x2 = tape.add(cx, half_w)?;
    let y1 = tape.sub(cy, half_h)?;
    let y2 = tape.add(cy, half_h)?;

    let [gcx, gcy, gw, gh] = gt_norm;
    let gx1 = tape.scalar(gcx - gw / 2.0);
    let gx2 = tape.scalar(gcx + gw / 2.0);
    let gy1 = tape.scalar(gcy - gh / 2.0);
    let gy2 = tape.scalar(gcy + gh / 2.0);
    let zero = tape.scalar(0.0);

    let ix1 = tape.maximum(x1, gx1)?;
    let ix2 = tape.minimum(x2, gx2)?;
    let iy1 = tape.maximum(y1, gy1)?;
    let iy2 = tape.minimum(y2, gy2)?;
    let iw_raw = tape.sub(ix2, ix1)?;
    let iw = tape.maximum(iw_raw, zero)?;
    let ih_raw = tape.sub(iy2, iy1)?;
    let ih = tape.maximum(ih_raw, zero)?;
    let inter = tape.mul(iw, ih)?;

    let area_p = tape.mul(w, h)?;
    let area_g = tape.scalar(gw * gh);
    let areas = tape.add(area_p, area_g)?;
    let union = tape.sub(areas, inter)?;
    let iou = tape.div(inter, union)?;

    let ex1 = tape.minimum(x1, gx1)?;
    let ex2 = tape.maximum(x2, gx2)?;
    let ey1 = tape.minimum(y1, gy1)?;
    let ey2 = tape.maximum(y2, gy2)?;
    let ew = tape.sub(ex2, ex1)?;
    let eh = tape.sub(ey2, ey1)?;
    let enclosing = tape.mul(ew, eh)?;

    let gap = tape.sub(enclosing, union)?;
    let penalty = tape.div(gap, enclosing)?;
    let giou = tape.sub(iou, penalty)?;
    let one = tape.scalar(1.0);
    tape.sub(one, giou)
}

/// Tracking task loss: cross-entropy of the score map against the
/// Gaussian target, L1 on the normalized box, and the generalized-overlap
/// penalty, combined with the configured weights. Non-negative by
/// construction.
pub fn task_loss(
    tape: &mut Tape,
    head: &HeadForward,
    gt: &BoundingBox,
    config: &TrackerConfig,
    weights: &LossWeights,
) -> Result<TaskLossTerms> {
    validate_gt(gt, config)?;

    // classification: -sum(target * log softmax(logits))
    let target = tape.constant(gaussian_target_map(gt, config));
    let probs = tape.softmax_rows(head.score_logits)?;
    let logp = tape.log_floored(probs, 1e-12);
    let weighted = tape.mul(target, logp)?;
    let sum = tape.sum_all(weighted);
    let cls = tape.neg(sum);

    // normalized gt in (cx, cy, w, h)
    let s = config.search_size as f64;
    let (gx, gy) = gt.center();
    let gt_norm = [gx / s, gy / s, gt.w / s, gt.h / s];
    let gt_box = tape.constant(Tensor::new(vec![1, 4], gt_norm.to_vec())?);
    let diff = tape.sub(head.box_norm, gt_box)?;
    let absd = tape.abs(diff);
    let l1 = tape.mean_all(absd);

    let overlap = giou_term(tape, head.box_norm, gt_norm)?;

    let cls_w = tape.scale(cls, weights.classification);
    let l1_w = tape.scale(l1, weights.l1);
    let ov_w = tape.scale(overlap, weights.overlap);
    let partial = tape.add(cls_w, l1_w)?;
    let total = tape.add(partial, ov_w)?;

    Ok(TaskLossTerms {
        total,
        classification: tape.value(cls).data()[0],
        l1: tape.value(l1).data()[0],
        overlap: tape.value(overlap).data()[0],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_loss_gradients, GRAD_TOL};
    use crate::rng::{rng_from_seed, uniform01};
    use crate::tensor::ParamSet;

    fn cfg() -> TrackerConfig {
        TrackerConfig::toy()
    }

    /// Builds a HeadForward directly from raw tensors, bypassing the
    /// backbone, so the loss can be tested in isolation.
    fn head_from(tape: &mut Tape, logits: Tensor, box_norm: Tensor) -> HeadForward {
        let score_logits = tape.constant(logits);
        let box_norm = tape.constant(box_norm);
        HeadForward { score_logits, box_norm, argmax: 0 }
    }

    #[test]
    fn exact_prediction_zeroes_l1_and_overlap() {
        let config = cfg();
        let gt = BoundingBox::new(4.0, 4.0, 8.0, 8.0);
        let s = config.search_size as f64;
        let (gx, gy) = gt.center();
        let exact = Tensor::new(vec![1, 4], vec![gx / s, gy / s, gt.w / s, gt.h / s]).unwrap();

        // saturated correct score map: huge logit at the gt cell
        let target = gaussian_target_map(&gt, &config);
        let peak = target
            .data()
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        let mut logits = vec![0.0; config.search_tokens()];
        logits[peak] = 1000.0;

        let mut tape = Tape::new();
        let head = head_from(
            &mut tape,
            Tensor::new(vec![1, config.search_tokens()], logits).unwrap(),
            exact,
        );
        let terms = task_loss(&mut tape, &head, &gt, &config, &LossWeights::default()).unwrap();
        assert!(terms.l1.abs() < 1e-12, "l1 = {}", terms.l1);
        assert!(terms.overlap.abs() < 1e-9, "overlap = {}", terms.overlap);
    }

    #[test]
    fn loss_non_negative_over_random_inputs() {
        let config = cfg();
        let mut rng = rng_from_seed(17);
        for trial in 0..200 {
            let n = config.search_tokens();
            let logits = Tensor::randn(vec![1, n], 3.0, &mut rng);
            // random box in (0,1)^4 with nonzero size
            let raw: Vec<f64> = (0..4).map(|_| 0.05 + 0.9 * uniform01(&mut rng)).collect();
            let boxed = Tensor::new(vec![1, 4], raw).unwrap();
            let s = config.search_size as f64;
            let gw = 2.0 + 8.0 * uniform01(&mut rng);
            let gh = 2.0 + 8.0 * uniform01(&mut rng);
            let gx = uniform01(&mut rng) * (s - gw);
            let gy = uniform01(&mut rng) * (s - gh);
            let gt = BoundingBox::new(gx, gy, gw, gh);

            let mut tape = Tape::new();
            let head = head_from(&mut tape, logits, boxed);
            let terms = task_loss(&mut tape, &head, &gt, &config, &LossWeights::default()).unwrap();
            let total = tape.value(terms.total).data()[0];
            assert!(total >= 0.0, "trial {trial}: total {total}");
            assert!(total.is_finite());
        }
    }

    #[test]
    fn degenerate_gt_rejected() {
        let config = cfg();
        let mut tape = Tape::new();
        let head = head_from(
            &mut tape,
            Tensor::zeros(vec![1, config.search_tokens()]),
            Tensor::full(vec![1, 4], 0.5),
        );
        let gt = BoundingBox::new(2.0, 2.0, 0.0, 5.0);
        let err = task_loss(&mut tape, &head, &gt, &config, &LossWeights::default()).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn gt_outside_search_region_rejected() {
        let config = cfg();
        let mut tape = Tape::new();
        let head = head_from(
            &mut tape,
            Tensor::zeros(vec![1, config.search_tokens()]),
            Tensor::full(vec![1, 4], 0.5),
        );
        let gt = BoundingBox::new(12.0, 12.0, 10.0, 10.0); // spills past 16px
        assert!(task_loss(&mut tape, &head, &gt, &config, &LossWeights::default()).is_err());
    }

    #[test]
    fn task_loss_gradients_match_finite_differences() {
        // raw logits and raw (pre-sigmoid) box params as the trainables
        let config = cfg();
        let mut rng = rng_from_seed(23);
        let mut params = ParamSet::new();
        params
            .insert("logits", Tensor::randn(vec![1, config.search_tokens()], 1.0, &mut rng), true)
            .unwrap();
        params
            .insert("box_raw", Tensor::randn(vec![1, 4], 0.8, &mut rng), true)
            .unwrap();
        let gt = BoundingBox::new(4.0, 5.0, 6.0, 7.0);

        let report = check_loss_gradients(&mut params, |ps, tape| {
            let logits = tape.param(ps.expect("logits"));
            let raw = tape.param(ps.expect("box_raw"));
            let box_norm = tape.sigmoid(raw);
            let head = HeadForward { score_logits: logits, box_norm, argmax: 0 };
            let terms = task_loss(tape, &head, &gt, &config, &LossWeights::default())?;
            Ok(terms.total)
        })
        .unwrap();
        assert!(
            report.passes(GRAD_TOL),
            "task loss: max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn target_map_normalized_and_centered() {
        let config = cfg();
        let gt = BoundingBox::new(6.0, 6.0, 4.0, 4.0);
        let map = gaussian_target_map(&gt, &config);
        let sum: f64 = map.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        let peak = map
            .data()
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
            .unwrap()
            .0;
        // gt center (8, 8) falls on grid cell (2, 2) of the 4x4 map
        assert_eq!(peak, 2 * config.score_side() + 2);
    }
}
