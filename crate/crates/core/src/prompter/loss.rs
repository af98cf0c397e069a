use crate::error::{Error, Result};
use crate::eval::BoundingBox;
use crate::model::{task_loss, LossWeights, Tokens, TrackerModel};
use crate::tensor::{Tape, TensorId};

/// Prompts per layer plus the reconstructions obtained by running the
/// same stacks in reverse.
#[derive(Debug, Clone)]
pub struct PromptBundle {
    pub prompts: Vec<TensorId>,
    pub reconstructions: Vec<TensorId>,
}

/// Bidirectional mapping loss: per layer, the squared deviation of the
/// prompt from the missing modality's features plus the squared deviation
/// of the reconstruction from the available modality's.
pub fn loss_bidirectional(
    tape: &mut Tape,
    bundle: &PromptBundle,
    missing: &[TensorId],
    available: &[TensorId],
) -> Result<TensorId> {
    if bundle.prompts.len() != missing.len()
        || bundle.reconstructions.len() != available.len()
        || missing.len() != available.len()
    {
        return Err(Error::shape(
            "loss_bidirectional",
            format!(
                "ladder lengths disagree: {} prompts, {} reconstructions, {} missing, {} available",
                bundle.prompts.len(),
                bundle.reconstructions.len(),
                missing.len(),
                available.len()
            ),
        ));
    }
    let mut total: Option<TensorId> = None;
    for n in 0..missing.len() {
        let fwd = tape.mse(bundle.prompts[n], missing[n])?;
        let back = tape.mse(bundle.reconstructions[n], available[n])?;
        let layer = tape.add(fwd, back)?;
        total = Some(match total {
            None => layer,
            Some(acc) => tape.add(acc, layer)?,
        });
    }
    total.ok_or_else(|| Error::shape("loss_bidirectional", "empty ladders".to_string()))
}

/// Prediction alignment: KL of each missing-scenario score distribution
/// from the complete-modality one. The complete branch is evaluated once
/// and re-entered as a constant, so no gradient reaches it.
pub fn loss_task_alignment(
    tape: &mut Tape,
    model: &TrackerModel,
    f_rgb: Tokens,
    f_tir: Tokens,
    p_rgb: Tokens,
    p_tir: Tokens,
) -> Result<TensorId> {
    let fused_complete = model.fuse(tape, f_rgb, f_tir)?;
    let head_complete = model.head_forward(tape, fused_complete)?;
    let q = tape.softmax_rows(head_complete.score_logits)?;
    let q_const = tape.constant(tape.value(q).clone());

    let fused_tir_missing = model.fuse(tape, f_rgb, p_tir)?;
    let h1 = model.head_forward(tape, fused_tir_missing)?;
    let p1 = tape.softmax_rows(h1.score_logits)?;
    let kl1 = tape.kl_div(p1, q_const)?;

    let fused_rgb_missing = model.fuse(tape, p_rgb, f_tir)?;
    let h2 = model.head_forward(tape, fused_rgb_missing)?;
    let p2 = tape.softmax_rows(h2.score_logits)?;
    let kl2 = tape.kl_div(p2, q_const)?;

    tape.add(kl1, kl2)
}

#[derive(Debug, Clone, Copy)]
pub struct MissingTaskLoss {
    pub total: TensorId,
    /// Number of head evaluations performed (one per missing scenario).
    pub head_evals: usize,
}

/// Tracking loss under both missing scenarios: the head runs once with
/// the RGB prompt standing in and once with the TIR prompt standing in.
pub fn loss_missing_task(
    tape: &mut Tape,
    model: &TrackerModel,
    f_rgb: Tokens,
    f_tir: Tokens,
    p_rgb: Tokens,
    p_tir: Tokens,
    gt: &BoundingBox,
    weights: &LossWeights,
) -> Result<MissingTaskLoss> {
    let fused_rgb_missing = model.fuse(tape, p_rgb, f_tir)?;
    let h1 = model.head_forward(tape, fused_rgb_missing)?;
    let t1 = task_loss(tape, &h1, gt, &model.config, weights)?;

    let fused_tir_missing = model.fuse(tape, f_rgb, p_tir)?;
    let h2 = model.head_forward(tape, fused_tir_missing)?;
    let t2 = task_loss(tape, &h2, gt, &model.config, weights)?;

    let total = tape.add(t1.total, t2.total)?;
    Ok(MissingTaskLoss { total, head_evals: 2 })
}
