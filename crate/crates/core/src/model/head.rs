use crate::error::{Error, Result};
use crate::eval::BoundingBox;
use crate::model::{Tokens, TrackerModel};
use crate::tensor::{Tape, Tensor, TensorId};

/// Head outputs still attached to the tape, for loss construction.
#[derive(Debug, Clone, Copy)]
pub struct HeadForward {
    /// Per-search-token score logits, one row: `[1, n_search]`.
    pub score_logits: TensorId,
    /// Sigmoid box `[1, 4]`: (cx, cy, w, h) in normalized search coords.
    pub box_norm: TensorId,
    /// Search-token index of the score argmax (forward values).
    pub argmax: usize,
}

/// Detached head output.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    /// Score logits reshaped to the search grid, `[side, side]`.
    pub score_map: Tensor,
    /// (cx, cy, w, h), each in [0, 1].
    pub box_norm: [f64; 4],
}

impl HeadOutput {
    /// Converts the normalized box to pixel coordinates of the search
    /// region.
    pub fn box_px(&self, search_size: usize) -> BoundingBox {
        let s = search_size as f64;
        let [cx, cy, w, h] = self.box_norm;
        BoundingBox::new((cx - w / 2.0) * s, (cy - h / 2.0) * s, w * s, h * s)
    }
}

impl TrackerModel {
    /// Scores every search token and regresses one box from the argmax
    /// token's features. Template (and any global) tokens are dropped.
    pub fn head_forward(&self, tape: &mut Tape, fused: Tokens) -> Result<HeadForward> {
        if fused.layout.global.is_some() {
            return Err(Error::Contract("the head consumes search tokens only".into()));
        }
        let range = fused.layout.search_range();
        let search = tape.slice_rows(fused.id, range.start, range.end)?;

        let w1 = tape.param(self.params.expect("head/cls_w1"));
        let b1 = tape.param(self.params.expect("head/cls_b1"));
        let h = tape.matmul(search, w1)?;
        let h = tape.add_row_bias(h, b1)?;
        let h = tape.gelu(h);
        let w2 = tape.param(self.params.expect("head/cls_w2"));
        let b2 = tape.param(self.params.expect("head/cls_b2"));
        let logits_col = tape.matmul(h, w2)?;
        let logits_col = tape.add_row_bias(logits_col, b2)?;
        let n = fused.layout.n_search;
        let score_logits = tape.reshape(logits_col, vec![1, n])?;

        let argmax = {
            let vals = tape.value(score_logits).data();
            vals.iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
                .map(|(i, _)| i)
                .unwrap_or(0)
        };

        let feat = tape.slice_rows(search, argmax, argmax + 1)?;
        let bw1 = tape.param(self.params.expect("head/box_w1"));
        let bb1 = tape.param(self.params.expect("head/box_b1"));
        let bh = tape.matmul(feat, bw1)?;
        let bh = tape.add_row_bias(bh, bb1)?;
        let bh = tape.gelu(bh);
        let bw2 = tape.param(self.params.expect("head/box_w2"));
        let bb2 = tape.param(self.params.expect("head/box_b2"));
        let raw = tape.matmul(bh, bw2)?;
        let raw = tape.add_row_bias(raw, bb2)?;
        let box_norm = tape.sigmoid(raw);

        Ok(HeadForward { score_logits, box_norm, argmax })
    }

    /// Detaches a [`HeadForward`] into plain values.
    pub fn detach_head(&self, tape: &Tape, head: &HeadForward) -> HeadOutput {
        let side = self.config.score_side();
        let logits = tape.value(head.score_logits).data().to_vec();
        let score_map = Tensor::new(vec![side, side], logits).expect("grid-sized score map");
        let b = tape.value(head.box_norm).data();
        HeadOutput { score_map, box_norm: [b[0], b[1], b[2], b[3]] }
    }
}
