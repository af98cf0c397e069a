use crate::error::{Error, Result};
use crate::model::{FusionMode, Tokens, TrackerConfig, TrackerModel};
use crate::tensor::Tape;

/// Channel width the head sees for a given fusion mode.
pub fn fuse_dim(config: &TrackerConfig) -> usize {
    match config.fusion {
        FusionMode::Sum => config.embed_dim,
        FusionMode::Concat | FusionMode::Transformer => 2 * config.embed_dim,
    }
}

impl TrackerModel {
    /// Merges the two modality features under the configured unit:
    /// summation, channel-wise concatenation, or the two-block
    /// transformer that concatenates token-wise, mixes, splits back and
    /// concatenates channel-wise.
    pub fn fuse(&self, tape: &mut Tape, f_rgb: Tokens, f_tir: Tokens) -> Result<Tokens> {
        if f_rgb.layout != f_tir.layout {
            return Err(Error::shape(
                "fuse",
                "modality feature layouts disagree".to_string(),
            ));
        }
        if f_rgb.layout.global.is_some() {
            return Err(Error::Contract("fusion consumes patch tokens only".into()));
        }
        let layout = f_rgb.layout;
        let id = match self.config.fusion {
            FusionMode::Sum => tape.add(f_rgb.id, f_tir.id)?,
            FusionMode::Concat => tape.concat_channels(f_rgb.id, f_tir.id)?,
            FusionMode::Transformer => {
                let stacked = tape.concat_rows(f_rgb.id, f_tir.id)?;
                let pos = tape.param(self.params.expect("fusion/pos"));
                let stacked = tape.add(stacked, pos)?;
                let mixed = self.block_forward(tape, "fusion/block1", stacked)?;
                let mixed = self.block_forward(tape, "fusion/block2", mixed)?;
                let n = layout.len();
                let part_rgb = tape.slice_rows(mixed, 0, n)?;
                let part_tir = tape.slice_rows(mixed, n, 2 * n)?;
                tape.concat_channels(part_rgb, part_tir)?
            }
        };
        Ok(Tokens { id, layout })
    }
}
