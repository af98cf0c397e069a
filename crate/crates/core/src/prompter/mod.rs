//! Invertible prompters: per-layer stacks of additive coupling blocks
//! that map available-modality features to prompt features for the
//! missing modality.
//!
//! Each block splits its input channel-wise and applies
//!
//! ```text
//! y1 = x1 + S(x2)        x2 = y2 - T(y1)
//! y2 = x2 + T(y1)        x1 = y1 - S(x2)
//! ```
//!
//! so the inverse is exact by subtraction for any S and T, with zero
//! extra parameters. With S and T initialized to zero every stack starts
//! as the identity, i.e. copy-in-feature-space.

mod loss;
mod train;

pub use loss::{
    loss_bidirectional, loss_missing_task, loss_task_alignment, MissingTaskLoss, PromptBundle,
};
pub use train::{
    stage2_loss, train_stage2, Stage2Checkpoint, Stage2Config, Stage2LossTerms, Stage2Result,
    Stage2Trace,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Modality;
use crate::rng::rng_from_seed;
use crate::tensor::{ParamSet, Tape, Tensor, TensorId};

/// Mapping direction of a stack: which modality it consumes and which it
/// generates prompts for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    RgbToTir,
    TirToRgb,
}

impl Direction {
    pub fn label(self) -> &'static str {
        match self {
            Direction::RgbToTir => "rgb2tir",
            Direction::TirToRgb => "tir2rgb",
        }
    }

    /// The available modality the stack reads.
    pub fn source(self) -> Modality {
        match self {
            Direction::RgbToTir => Modality::Rgb,
            Direction::TirToRgb => Modality::Tir,
        }
    }

    /// The missing modality the stack generates.
    pub fn generates(self) -> Modality {
        self.source().other()
    }

    /// The stack that stands in for a missing modality.
    pub fn for_missing(missing: Modality) -> Direction {
        match missing {
            Modality::Rgb => Direction::TirToRgb,
            Modality::Tir => Direction::RgbToTir,
        }
    }
}

pub const DIRECTIONS: [Direction; 2] = [Direction::RgbToTir, Direction::TirToRgb];

/// Shape of the S/T subnetworks inside each coupling block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubnetKind {
    /// One affine map c -> c.
    Affine,
    /// Two affine maps with a nonlinearity between.
    TwoLayer,
}

/// What the inverse pass reconstructs from when forming the
/// reconstruction half of the bidirectional loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconstructionSource {
    /// Invert the generated prompts. Algebraically exact, so the
    /// reconstruction term is identically zero; kept as the literal
    /// formula default.
    ForwardPrompt,
    /// Invert the true missing-modality features, which trains the
    /// inverse path against the available features.
    TargetFeatures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrompterConfig {
    /// Coupling blocks per stack (K).
    pub blocks_per_stack: usize,
    pub subnet: SubnetKind,
    pub reconstruction: ReconstructionSource,
    /// Init std for S/T weights; zero gives the identity start.
    pub init_std: f64,
}

impl Default for PrompterConfig {
    fn default() -> Self {
        PrompterConfig {
            blocks_per_stack: 4,
            subnet: SubnetKind::Affine,
            reconstruction: ReconstructionSource::ForwardPrompt,
            init_std: 0.0,
        }
    }
}

/// All 2N prompter stacks: one per (layer, direction), each of K blocks
/// over channel width 2c = d.
#[derive(Debug, Clone)]
pub struct PrompterSet {
    pub config: PrompterConfig,
    pub num_layers: usize,
    /// Full channel width 2c the stacks operate on.
    pub width: usize,
    pub params: ParamSet,
}

impl PrompterSet {
    pub fn new(config: PrompterConfig, num_layers: usize, width: usize, seed: u64) -> Result<Self> {
        if width == 0 || width % 2 != 0 {
            return Err(Error::Config(format!(
                "prompter width must be even and positive, got {width}"
            )));
        }
        if config.blocks_per_stack == 0 || num_layers == 0 {
            return Err(Error::Config(
                "prompter needs at least one block and one layer".into(),
            ));
        }
        let c = width / 2;
        let mut rng = rng_from_seed(seed);
        let mut params = ParamSet::new();
        let tensor = |rows: usize, cols: usize, rng: &mut crate::rng::SeedRng| {
            if config.init_std > 0.0 {
                Tensor::randn(vec![rows, cols], config.init_std, rng)
            } else {
                Tensor::zeros(vec![rows, cols])
            }
        };
        for direction in DIRECTIONS {
            for layer in 1..=num_layers {
                for block in 0..config.blocks_per_stack {
                    for subnet in ["s", "t"] {
                        let prefix = format!(
                            "prompter/{}/layer{layer}/block{block}/{subnet}",
                            direction.label()
                        );
                        match config.subnet {
                            SubnetKind::Affine => {
                                params.insert(format!("{prefix}/w"), tensor(c, c, &mut rng), true)?;
                                params.insert(format!("{prefix}/b"), tensor(1, c, &mut rng), true)?;
                            }
                            SubnetKind::TwoLayer => {
                                params.insert(format!("{prefix}/w1"), tensor(c, c, &mut rng), true)?;
                                params.insert(format!("{prefix}/b1"), tensor(1, c, &mut rng), true)?;
                                params.insert(format!("{prefix}/w2"), tensor(c, c, &mut rng), true)?;
                                params.insert(format!("{prefix}/b2"), tensor(1, c, &mut rng), true)?;
                            }
                        }
                    }
                }
            }
        }
        Ok(PrompterSet { config, num_layers, width, params })
    }

    pub(crate) fn subnet_forward(&self, tape: &mut Tape, prefix: &str, x: TensorId) -> Result<TensorId> {
        match self.config.subnet {
            SubnetKind::Affine => {
                let w = tape.param(self.params.expect(&format!("{prefix}/w")));
                let b = tape.param(self.params.expect(&format!("{prefix}/b")));
                let h = tape.matmul(x, w)?;
                tape.add_row_bias(h, b)
            }
            SubnetKind::TwoLayer => {
                let w1 = tape.param(self.params.expect(&format!("{prefix}/w1")));
                let b1 = tape.param(self.params.expect(&format!("{prefix}/b1")));
                let h = tape.matmul(x, w1)?;
                let h = tape.add_row_bias(h, b1)?;
                let h = tape.gelu(h);
                let w2 = tape.param(self.params.expect(&format!("{prefix}/w2")));
                let b2 = tape.param(self.params.expect(&format!("{prefix}/b2")));
                let out = tape.matmul(h, w2)?;
                tape.add_row_bias(out, b2)
            }
        }
    }

    /// Forward pass of one coupling block under the given name prefix.
    pub fn coupling_forward(&self, tape: &mut Tape, prefix: &str, x: TensorId) -> Result<TensorId> {
        let (x1, x2) = tape.split_channels(x)?;
        let s = self.subnet_forward(tape, &format!("{prefix}/s"), x2)?;
        let y1 = tape.add(x1, s)?;
        let t = self.subnet_forward(tape, &format!("{prefix}/t"), y1)?;
        let y2 = tape.add(x2, t)?;
        tape.concat_channels(y1, y2)
    }

    /// Exact inverse of [`Self::coupling_forward`] with the same
    /// parameters.
    pub fn coupling_inverse(&self, tape: &mut Tape, prefix: &str, y: TensorId) -> Result<TensorId> {
        let (y1, y2) = tape.split_channels(y)?;
        let t = self.subnet_forward(tape, &format!("{prefix}/t"), y1)?;
        let x2 = tape.sub(y2, t)?;
        let s = self.subnet_forward(tape, &format!("{prefix}/s"), x2)?;
        let x1 = tape.sub(y1, s)?;
        tape.concat_channels(x1, x2)
    }

    fn stack_prefix(&self, direction: Direction, layer: usize) -> String {
        format!("prompter/{}/layer{layer}", direction.label())
    }

    /// Applies the stack serving (direction, layer) block by block.
    pub fn stack_forward(
        &self,
        tape: &mut Tape,
        direction: Direction,
        layer: usize,
        x: TensorId,
    ) -> Result<TensorId> {
        let prefix = self.stack_prefix(direction, layer);
        let mut cur = x;
        for block in 0..self.config.blocks_per_stack {
            cur = self.coupling_forward(tape, &format!("{prefix}/block{block}"), cur)?;
        }
        Ok(cur)
    }

    /// Runs the stack in reverse: block order and block algebra both
    /// inverted.
    pub fn stack_inverse(
        &self,
        tape: &mut Tape,
        direction: Direction,
        layer: usize,
        y: TensorId,
    ) -> Result<TensorId> {
        let prefix = self.stack_prefix(direction, layer);
        let mut cur = y;
        for block in (0..self.config.blocks_per_stack).rev() {
            cur = self.coupling_inverse(tape, &format!("{prefix}/block{block}"), cur)?;
        }
        Ok(cur)
    }

    /// Generates the prompt ladder from the available modality's feature
    /// ladder: one prompt per layer, each from its own stack.
    pub fn prompt_ladder(
        &self,
        tape: &mut Tape,
        direction: Direction,
        available: &[TensorId],
    ) -> Result<Vec<TensorId>> {
        if available.len() != self.num_layers {
            return Err(Error::Config(format!(
                "feature ladder has {} entries but the prompter serves {} layers",
                available.len(),
                self.num_layers
            )));
        }
        (1..=self.num_layers)
            .map(|layer| self.stack_forward(tape, direction, layer, available[layer - 1]))
            .collect()
    }

    /// Prompts plus their inverse reconstructions for every layer.
    pub fn prompter_forward(
        &self,
        tape: &mut Tape,
        direction: Direction,
        available: &[TensorId],
    ) -> Result<PromptBundle> {
        let prompts = self.prompt_ladder(tape, direction, available)?;
        let reconstructions = prompts
            .iter()
            .enumerate()
            .map(|(i, &p)| self.stack_inverse(tape, direction, i + 1, p))
            .collect::<Result<Vec<_>>>()?;
        Ok(PromptBundle { prompts, reconstructions })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn random_set(k: usize, width: usize, seed: u64) -> PrompterSet {
        // weight scale shrinks with the half-width so deep stacks keep a
        // sane dynamic range; the inverse is algebraically exact for any
        // parameters, but f64 cancellation grows with the magnitudes
        let init_std = 0.5 / ((width / 2) as f64).sqrt();
        PrompterSet::new(
            PrompterConfig { blocks_per_stack: k, init_std, ..PrompterConfig::default() },
            2,
            width,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn zero_subnets_give_identity() {
        let set = PrompterSet::new(PrompterConfig::default(), 3, 8, 0).unwrap();
        let mut tape = Tape::new();
        let mut rng = rng_from_seed(1);
        let x = Tensor::randn(vec![5, 8], 2.0, &mut rng);
        let xid = tape.constant(x.clone());
        let y = set.stack_forward(&mut tape, Direction::RgbToTir, 1, xid).unwrap();
        assert!(tape.value(y).bits_eq(&x));
    }

    #[test]
    fn hand_computed_block() {
        // c = 1, S(v) = 2v, T(v) = v + 1, x = [1, 3]
        // forward: y1 = 1 + S(3) = 7, y2 = 3 + T(7) = 11
        let mut set = PrompterSet::new(
            PrompterConfig { blocks_per_stack: 1, ..PrompterConfig::default() },
            1,
            2,
            0,
        )
        .unwrap();
        let prefix = "prompter/rgb2tir/layer1/block0";
        set.params.get_mut(&format!("{prefix}/s/w")).unwrap().value.data_mut()[0] = 2.0;
        set.params.get_mut(&format!("{prefix}/t/w")).unwrap().value.data_mut()[0] = 1.0;
        set.params.get_mut(&format!("{prefix}/t/b")).unwrap().value.data_mut()[0] = 1.0;

        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap());
        let y = set.coupling_forward(&mut tape, prefix, x).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0, 11.0]);

        let back = set.coupling_inverse(&mut tape, prefix, y).unwrap();
        assert_eq!(back_data(&tape, back), &[1.0, 3.0]);
    }

    fn back_data(tape: &Tape, id: TensorId) -> &[f64] {
        tape.value(id).data()
    }

    #[test]
    fn inverse_of_forward_is_identity_within_1e9() {
        for (k, width, seed) in [(1, 4, 10), (4, 16, 11), (8, 64, 12)] {
            let set = random_set(k, width, seed);
            let mut tape = Tape::new();
            let mut rng = rng_from_seed(seed + 100);
            let x = Tensor::randn(vec![6, width], 3.0, &mut rng);
            let xid = tape.constant(x.clone());
            let y = set.stack_forward(&mut tape, Direction::TirToRgb, 2, xid).unwrap();
            let back = set.stack_inverse(&mut tape, Direction::TirToRgb, 2, y).unwrap();
            let err = tape.value(back).max_abs_diff(&x).unwrap();
            assert!(err < 1e-9, "K={k} width={width}: {err}");

            // two-sided: forward(inverse(y)) = y
            let inv = set.stack_inverse(&mut tape, Direction::TirToRgb, 2, xid).unwrap();
            let fwd = set.stack_forward(&mut tape, Direction::TirToRgb, 2, inv).unwrap();
            let err2 = tape.value(fwd).max_abs_diff(&x).unwrap();
            assert!(err2 < 1e-9, "K={k} width={width}: {err2}");
        }
    }

    #[test]
    fn outputs_finite_for_bounded_random_inputs() {
        let set = random_set(6, 32, 21);
        let mut tape = Tape::new();
        let mut rng = rng_from_seed(22);
        for _ in 0..20 {
            let mut x = Tensor::randn(vec![4, 32], 5.0, &mut rng);
            for v in x.data_mut() {
                *v = v.clamp(-10.0, 10.0);
            }
            let xid = tape.constant(x);
            let y = set.stack_forward(&mut tape, Direction::RgbToTir, 1, xid).unwrap();
            assert!(tape.value(y).is_finite());
        }
    }

    #[test]
    fn two_layer_subnet_still_inverts_exactly() {
        let set = PrompterSet::new(
            PrompterConfig {
                blocks_per_stack: 3,
                subnet: SubnetKind::TwoLayer,
                init_std: 0.4,
                ..PrompterConfig::default()
            },
            1,
            12,
            5,
        )
        .unwrap();
        let mut tape = Tape::new();
        let mut rng = rng_from_seed(6);
        let x = Tensor::randn(vec![3, 12], 2.0, &mut rng);
        let xid = tape.constant(x.clone());
        let y = set.stack_forward(&mut tape, Direction::RgbToTir, 1, xid).unwrap();
        let back = set.stack_inverse(&mut tape, Direction::RgbToTir, 1, y).unwrap();
        assert!(tape.value(back).max_abs_diff(&x).unwrap() < 1e-9);
    }

    #[test]
    fn bundle_has_one_prompt_per_layer_with_tight_reconstruction() {
        let set = random_set(2, 8, 31);
        let mut tape = Tape::new();
        let mut rng = rng_from_seed(32);
        let ladder: Vec<TensorId> = (0..2)
            .map(|_| tape.constant(Tensor::randn(vec![4, 8], 1.0, &mut rng)))
            .collect();
        let bundle = set.prompter_forward(&mut tape, Direction::RgbToTir, &ladder).unwrap();
        assert_eq!(bundle.prompts.len(), 2);
        assert_eq!(bundle.reconstructions.len(), 2);
        for (recon, orig) in bundle.reconstructions.iter().zip(&ladder) {
            let err = tape.value(*recon).max_abs_diff(tape.value(*orig)).unwrap();
            assert!(err < 1e-9, "{err}");
        }
    }

    #[test]
    fn ladder_length_mismatch_is_config_error() {
        let set = random_set(2, 8, 41);
        let mut tape = Tape::new();
        let ladder = vec![tape.constant(Tensor::zeros(vec![4, 8]))];
        let err = set.prompt_ladder(&mut tape, Direction::RgbToTir, &ladder).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let set = random_set(1, 8, 51);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![2, 6]));
        let err = set.stack_forward(&mut tape, Direction::RgbToTir, 1, x).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }
}
