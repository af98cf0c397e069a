//! Desk-scale dual-modality tracker: patch embedding, a shared/specific
//! transformer backbone with per-modality global tokens, three selectable
//! fusion units, and a two-branch prediction head.
//!
//! Sizes default to CPU-friendly values; the full-scale geometry
//! (256/128 crops, deeper stacks) stays reachable through the config.

mod backbone;
mod fusion;
mod head;
mod loss;
mod scene;
mod train;

pub use backbone::{Tokens, TrackerModel};
pub use fusion::fuse_dim;
pub use head::{HeadForward, HeadOutput};
pub use loss::{gaussian_target_map, task_loss, LossWeights, TaskLossTerms};
pub use scene::{
    generate_synthetic_scene, generate_synthetic_sequence, template_crop, SyntheticScene,
    SyntheticSequence,
};
pub use train::{
    inference_step, run_sequence, train_stage1, FrameInputs, MissingInputPolicy, PairInputs,
    Stage1Trace, TrainConfig,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The two input streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Rgb,
    Tir,
}

impl Modality {
    pub fn label(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Tir => "tir",
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::Rgb => Modality::Tir,
            Modality::Tir => Modality::Rgb,
        }
    }
}

/// Backbone layouts: every layer weight-shared across modalities, every
/// layer modality-specific, or the alternating combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorVariant {
    Shared,
    Specific,
    SharedSpecific,
}

/// How the two modality features merge before the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Sum,
    Concat,
    Transformer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackerConfig {
    /// Patch side in pixels.
    pub patch_size: usize,
    /// Token width d; must be even for the coupling split downstream.
    pub embed_dim: usize,
    /// Number of backbone stages N.
    pub num_layers: usize,
    /// 1-based indices of the modality-specific stages.
    pub specific_layers: Vec<usize>,
    pub extractor: ExtractorVariant,
    pub fusion: FusionMode,
    /// Search/template crop sides in pixels, both divisible by the patch.
    pub search_size: usize,
    pub template_size: usize,
    /// Hidden width of the head MLPs.
    pub head_hidden: usize,
    /// Image channels per modality.
    pub channels: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            patch_size: 4,
            embed_dim: 32,
            num_layers: 6,
            specific_layers: vec![2, 4, 6],
            extractor: ExtractorVariant::SharedSpecific,
            fusion: FusionMode::Concat,
            search_size: 32,
            template_size: 16,
            head_hidden: 32,
            channels: 3,
        }
    }
}

impl TrackerConfig {
    /// A smaller instance for gradient checks and structure tests.
    pub fn toy() -> Self {
        TrackerConfig {
            patch_size: 4,
            embed_dim: 8,
            num_layers: 2,
            specific_layers: vec![2],
            extractor: ExtractorVariant::SharedSpecific,
            fusion: FusionMode::Concat,
            search_size: 16,
            template_size: 8,
            head_hidden: 8,
            channels: 3,
        }
    }

    /// Copy with another extractor variant, adjusting the specific-layer
    /// set to the variant's contract.
    pub fn with_extractor(mut self, variant: ExtractorVariant) -> Self {
        self.extractor = variant;
        self.specific_layers = match variant {
            ExtractorVariant::Shared => Vec::new(),
            ExtractorVariant::Specific => (1..=self.num_layers).collect(),
            ExtractorVariant::SharedSpecific => self.specific_layers,
        };
        self
    }

    pub fn with_fusion(mut self, fusion: FusionMode) -> Self {
        self.fusion = fusion;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "embed_dim must be even and positive, got {}",
                self.embed_dim
            )));
        }
        if self.patch_size == 0 || self.num_layers == 0 {
            return Err(Error::Config("patch_size and num_layers must be positive".into()));
        }
        if self.search_size % self.patch_size != 0 || self.template_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "search ({}) and template ({}) sizes must be divisible by the patch size {}",
                self.search_size, self.template_size, self.patch_size
            )));
        }
        if self
            .specific_layers
            .iter()
            .any(|&n| n == 0 || n > self.num_layers)
        {
            return Err(Error::Config(format!(
                "specific_layers {:?} outside 1..={}",
                self.specific_layers, self.num_layers
            )));
        }
        match self.extractor {
            ExtractorVariant::Shared if !self.specific_layers.is_empty() => {
                return Err(Error::Config(
                    "shared extractor must have no specific layers".into(),
                ));
            }
            ExtractorVariant::Specific
                if self.specific_layers.len() != self.num_layers =>
            {
                return Err(Error::Config(
                    "specific extractor must mark every layer specific".into(),
                ));
            }
            ExtractorVariant::SharedSpecific if self.specific_layers.is_empty() => {
                return Err(Error::Config(
                    "shared_specific extractor needs at least one specific layer".into(),
                ));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn search_tokens(&self) -> usize {
        let side = self.search_size / self.patch_size;
        side * side
    }

    pub fn template_tokens(&self) -> usize {
        let side = self.template_size / self.patch_size;
        side * side
    }

    /// Patch tokens per modality (search + template, no global token).
    pub fn patch_tokens(&self) -> usize {
        self.search_tokens() + self.template_tokens()
    }

    pub fn score_side(&self) -> usize {
        self.search_size / self.patch_size
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn is_specific_layer(&self, layer: usize) -> bool {
        self.specific_layers.contains(&layer)
    }
}

/// Per-token tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenRole {
    Search,
    Template,
    Global,
}

/// Row structure of a token tensor: the optional global token sits in row
/// zero, search tokens follow, template tokens last. Global tokens exist
/// only inside modality-specific stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    pub n_search: usize,
    pub n_template: usize,
    pub global: Option<Modality>,
}

impl TokenLayout {
    pub fn patches(n_search: usize, n_template: usize) -> Self {
        TokenLayout { n_search, n_template, global: None }
    }

    pub fn len(&self) -> usize {
        self.n_search + self.n_template + usize::from(self.global.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn offset(&self) -> usize {
        usize::from(self.global.is_some())
    }

    pub fn search_range(&self) -> std::ops::Range<usize> {
        self.offset()..self.offset() + self.n_search
    }

    pub fn roles(&self) -> Vec<TokenRole> {
        let mut roles = Vec::with_capacity(self.len());
        if self.global.is_some() {
            roles.push(TokenRole::Global);
        }
        roles.extend(std::iter::repeat(TokenRole::Search).take(self.n_search));
        roles.extend(std::iter::repeat(TokenRole::Template).take(self.n_template));
        roles
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        TrackerConfig::default().validate().unwrap();
        TrackerConfig::toy().validate().unwrap();
    }

    #[test]
    fn odd_embed_dim_rejected() {
        let cfg = TrackerConfig { embed_dim: 31, ..TrackerConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn shared_variant_requires_empty_specific_set() {
        let cfg = TrackerConfig::default().with_extractor(ExtractorVariant::Shared);
        cfg.validate().unwrap();
        assert!(cfg.specific_layers.is_empty());

        let bad = TrackerConfig {
            extractor: ExtractorVariant::Shared,
            specific_layers: vec![1],
            ..TrackerConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn indivisible_crop_rejected() {
        let cfg = TrackerConfig { search_size: 30, ..TrackerConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn token_counts() {
        let cfg = TrackerConfig::default();
        assert_eq!(cfg.search_tokens(), 64);
        assert_eq!(cfg.template_tokens(), 16);
        assert_eq!(cfg.patch_tokens(), 80);
        // 8x8 image with p=4 -> 4 tokens
        let small = TrackerConfig { search_size: 8, template_size: 8, ..TrackerConfig::default() };
        assert_eq!(small.search_tokens(), 4);
    }

    #[test]
    fn layout_roles_order() {
        let l = TokenLayout { n_search: 2, n_template: 1, global: Some(Modality::Rgb) };
        assert_eq!(
            l.roles(),
            vec![TokenRole::Global, TokenRole::Search, TokenRole::Search, TokenRole::Template]
        );
        assert_eq!(l.search_range(), 1..3);
    }
}
