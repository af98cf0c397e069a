use crate::error::{Error, Result};
use crate::model::{ExtractorVariant, Modality, TokenLayout, TrackerConfig};
use crate::rng::{rng_from_seed, SeedRng};
use crate::tensor::{ParamSet, Tape, Tensor, TensorId};

/// Token tensor on the tape plus its row structure.
#[derive(Debug, Clone, Copy)]
pub struct Tokens {
    pub id: TensorId,
    pub layout: TokenLayout,
}

/// The tracker: a config plus its parameter set. All forward methods
/// record onto a caller-provided tape, so the same model serves training
/// (trainable leaves) and frozen stage-2/inference use (constant leaves).
#[derive(Debug, Clone)]
pub struct TrackerModel {
    pub config: TrackerConfig,
    pub params: ParamSet,
}

const INIT_STD: f64 = 0.02;

fn init_block(ps: &mut ParamSet, prefix: &str, d: usize, rng: &mut SeedRng) -> Result<()> {
    let hidden = 2 * d;
    ps.insert(format!("{prefix}/ln1_g"), Tensor::full(vec![1, d], 1.0), true)?;
    ps.insert(format!("{prefix}/ln1_b"), Tensor::zeros(vec![1, d]), true)?;
    for name in ["attn_q", "attn_k", "attn_v", "attn_o"] {
        ps.insert(format!("{prefix}/{name}_w"), Tensor::randn(vec![d, d], INIT_STD, rng), true)?;
        ps.insert(format!("{prefix}/{name}_b"), Tensor::zeros(vec![1, d]), true)?;
    }
    ps.insert(format!("{prefix}/ln2_g"), Tensor::full(vec![1, d], 1.0), true)?;
    ps.insert(format!("{prefix}/ln2_b"), Tensor::zeros(vec![1, d]), true)?;
    ps.insert(format!("{prefix}/mlp_w1"), Tensor::randn(vec![d, hidden], INIT_STD, rng), true)?;
    ps.insert(format!("{prefix}/mlp_b1"), Tensor::zeros(vec![1, hidden]), true)?;
    ps.insert(format!("{prefix}/mlp_w2"), Tensor::randn(vec![hidden, d], INIT_STD, rng), true)?;
    ps.insert(format!("{prefix}/mlp_b2"), Tensor::zeros(vec![1, d]), true)?;
    Ok(())
}

impl TrackerModel {
    /// Fresh model with seeded initialization. Construction order is
    /// fixed, so a given (config, seed) always yields identical weights.
    pub fn new(config: TrackerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut ps = ParamSet::new();
        let d = config.embed_dim;

        ps.insert(
            "embed/patch_w",
            Tensor::randn(vec![config.patch_dim(), d], INIT_STD, &mut rng),
            true,
        )?;
        ps.insert("embed/patch_b", Tensor::zeros(vec![1, d]), true)?;
        ps.insert(
            "embed/pos",
            Tensor::randn(vec![config.patch_tokens(), d], INIT_STD, &mut rng),
            true,
        )?;

        for layer in 1..=config.num_layers {
            if config.is_specific_layer(layer) {
                init_block(&mut ps, &format!("backbone/layer{layer}/rgb"), d, &mut rng)?;
                init_block(&mut ps, &format!("backbone/layer{layer}/tir"), d, &mut rng)?;
            } else {
                init_block(&mut ps, &format!("backbone/layer{layer}/shared"), d, &mut rng)?;
            }
        }
        if !config.specific_layers.is_empty() {
            ps.insert("backbone/global_rgb", Tensor::randn(vec![1, d], INIT_STD, &mut rng), true)?;
            ps.insert("backbone/global_tir", Tensor::randn(vec![1, d], INIT_STD, &mut rng), true)?;
        }

        if config.fusion == crate::model::FusionMode::Transformer {
            ps.insert(
                "fusion/pos",
                Tensor::randn(vec![2 * config.patch_tokens(), d], INIT_STD, &mut rng),
                true,
            )?;
            init_block(&mut ps, "fusion/block1", d, &mut rng)?;
            init_block(&mut ps, "fusion/block2", d, &mut rng)?;
        }

        let fdim = crate::model::fuse_dim(&config);
        let hid = config.head_hidden;
        ps.insert("head/cls_w1", Tensor::randn(vec![fdim, hid], INIT_STD, &mut rng), true)?;
        ps.insert("head/cls_b1", Tensor::zeros(vec![1, hid]), true)?;
        ps.insert("head/cls_w2", Tensor::randn(vec![hid, 1], INIT_STD, &mut rng), true)?;
        ps.insert("head/cls_b2", Tensor::zeros(vec![1, 1]), true)?;
        ps.insert("head/box_w1", Tensor::randn(vec![fdim, hid], INIT_STD, &mut rng), true)?;
        ps.insert("head/box_b1", Tensor::zeros(vec![1, hid]), true)?;
        ps.insert("head/box_w2", Tensor::randn(vec![hid, 4], INIT_STD, &mut rng), true)?;
        ps.insert("head/box_b2", Tensor::zeros(vec![1, 4]), true)?;

        Ok(TrackerModel { config, params: ps })
    }

    /// Freezes every parameter; used when entering stage 2.
    pub fn freeze(&mut self) {
        self.params.set_all_trainable(false);
    }

    // ── Embedding ──────────────────────────────────────────────────

    /// Cuts an `[H, W, C]` image into flattened p-by-p patches, row-major
    /// over the patch grid, `(row, col, channel)` within a patch.
    fn patches(&self, image: &Tensor) -> Result<Tensor> {
        let p = self.config.patch_size;
        let shape = image.shape();
        if shape.len() != 3 || shape[2] != self.config.channels {
            return Err(Error::shape(
                "patch_embed",
                format!("expected [H,W,{}], got {:?}", self.config.channels, shape),
            ));
        }
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        if h % p != 0 || w % p != 0 {
            return Err(Error::Config(format!(
                "image {h}x{w} not divisible by patch size {p}"
            )));
        }
        let (gh, gw) = (h / p, w / p);
        let mut out = Tensor::zeros(vec![gh * gw, p * p * c]);
        for gy in 0..gh {
            for gx in 0..gw {
                let token = gy * gw + gx;
                for py in 0..p {
                    for px in 0..p {
                        for ch in 0..c {
                            out.data_mut()[token * p * p * c + (py * p + px) * c + ch] =
                                image.data()[((gy * p + py) * w + (gx * p + px)) * c + ch];
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Embeds a search/template image pair into one token sequence:
    /// search tokens first, template tokens after, with the learnable
    /// position embedding added. The embedding and position parameters
    /// are shared between modalities.
    pub fn patch_embed(&self, tape: &mut Tape, search: &Tensor, template: &Tensor) -> Result<Tokens> {
        let cfg = &self.config;
        let exp_search = cfg.search_size;
        let exp_template = cfg.template_size;
        if search.shape()[0] != exp_search || template.shape()[0] != exp_template {
            return Err(Error::Config(format!(
                "expected search {exp_search}px and template {exp_template}px crops, got {:?} and {:?}",
                search.shape(),
                template.shape()
            )));
        }
        let s_patches = tape.constant(self.patches(search)?);
        let t_patches = tape.constant(self.patches(template)?);
        let w = tape.param(self.params.expect("embed/patch_w"));
        let b = tape.param(self.params.expect("embed/patch_b"));
        let s_emb = tape.matmul(s_patches, w)?;
        let s_emb = tape.add_row_bias(s_emb, b)?;
        let t_emb = tape.matmul(t_patches, w)?;
        let t_emb = tape.add_row_bias(t_emb, b)?;
        let joined = tape.concat_rows(s_emb, t_emb)?;
        let pos = tape.param(self.params.expect("embed/pos"));
        let id = tape.add(joined, pos)?;
        Ok(Tokens {
            id,
            layout: TokenLayout::patches(cfg.search_tokens(), cfg.template_tokens()),
        })
    }

    // ── Transformer blocks ─────────────────────────────────────────

    fn affine(&self, tape: &mut Tape, x: TensorId, prefix: &str, name: &str) -> Result<TensorId> {
        let w = tape.param(self.params.expect(&format!("{prefix}/{name}_w")));
        let b = tape.param(self.params.expect(&format!("{prefix}/{name}_b")));
        let h = tape.matmul(x, w)?;
        tape.add_row_bias(h, b)
    }

    /// Pre-norm transformer block (self-attention + MLP, both residual)
    /// under the given parameter prefix.
    pub fn block_forward(&self, tape: &mut Tape, prefix: &str, x: TensorId) -> Result<TensorId> {
        let d = self.config.embed_dim;
        let g1 = tape.param(self.params.expect(&format!("{prefix}/ln1_g")));
        let b1 = tape.param(self.params.expect(&format!("{prefix}/ln1_b")));
        let ln1 = tape.layer_norm(x, g1, b1)?;
        let q = self.affine(tape, ln1, prefix, "attn_q")?;
        let k = self.affine(tape, ln1, prefix, "attn_k")?;
        let v = self.affine(tape, ln1, prefix, "attn_v")?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = tape.softmax_rows(scores)?;
        let ctx = tape.matmul(attn, v)?;
        let proj = self.affine(tape, ctx, prefix, "attn_o")?;
        let x2 = tape.add(x, proj)?;

        let g2 = tape.param(self.params.expect(&format!("{prefix}/ln2_g")));
        let b2 = tape.param(self.params.expect(&format!("{prefix}/ln2_b")));
        let ln2 = tape.layer_norm(x2, g2, b2)?;
        let w1 = tape.param(self.params.expect(&format!("{prefix}/mlp_w1")));
        let bm1 = tape.param(self.params.expect(&format!("{prefix}/mlp_b1")));
        let h = tape.matmul(ln2, w1)?;
        let h = tape.add_row_bias(h, bm1)?;
        let h = tape.gelu(h);
        let w2 = tape.param(self.params.expect(&format!("{prefix}/mlp_w2")));
        let bm2 = tape.param(self.params.expect(&format!("{prefix}/mlp_b2")));
        let m = tape.matmul(h, w2)?;
        let m = tape.add_row_bias(m, bm2)?;
        tape.add(x2, m)
    }

    /// Weight-shared stage: the same block parameters applied to both
    /// modality sequences. Global tokens must not be present.
    pub fn shared_block(
        &self,
        tape: &mut Tape,
        layer: usize,
        rgb: Tokens,
        tir: Tokens,
    ) -> Result<(Tokens, Tokens)> {
        if rgb.layout.global.is_some() || tir.layout.global.is_some() {
            return Err(Error::Contract(
                "shared blocks must not see global tokens".into(),
            ));
        }
        let prefix = format!("backbone/layer{layer}/shared");
        let r = self.block_forward(tape, &prefix, rgb.id)?;
        let t = self.block_forward(tape, &prefix, tir.id)?;
        Ok((Tokens { id: r, layout: rgb.layout }, Tokens { id: t, layout: tir.layout }))
    }

    /// Modality-specific stage: parameters selected by `modality`, with
    /// exactly one global token attached.
    pub fn specific_block(
        &self,
        tape: &mut Tape,
        layer: usize,
        tokens: Tokens,
        modality: Modality,
    ) -> Result<Tokens> {
        if tokens.layout.global != Some(modality) {
            return Err(Error::Contract(format!(
                "specific block for {} requires that modality's global token",
                modality.label()
            )));
        }
        let prefix = format!("backbone/layer{layer}/{}", modality.label());
        let out = self.block_forward(tape, &prefix, tokens.id)?;
        Ok(Tokens { id: out, layout: tokens.layout })
    }

    /// Prepends the modality's learnable global token.
    pub fn attach_global(&self, tape: &mut Tape, tokens: Tokens, modality: Modality) -> Result<Tokens> {
        if tokens.layout.global.is_some() {
            return Err(Error::Contract("global token already attached".into()));
        }
        let g = tape.param(
            self.params
                .expect(&format!("backbone/global_{}", modality.label())),
        );
        let id = tape.concat_rows(g, tokens.id)?;
        let mut layout = tokens.layout;
        layout.global = Some(modality);
        Ok(Tokens { id, layout })
    }

    /// Drops the global token row; the updated global state is discarded,
    /// the fresh parameter is re-attached at the next specific stage.
    pub fn strip_global(&self, tape: &mut Tape, tokens: Tokens) -> Result<Tokens> {
        if tokens.layout.global.is_none() {
            return Err(Error::Contract("no global token to strip".into()));
        }
        let id = tape.slice_rows(tokens.id, 1, tokens.layout.len())?;
        let mut layout = tokens.layout;
        layout.global = None;
        Ok(Tokens { id, layout })
    }

    fn run_stage(
        &self,
        tape: &mut Tape,
        layer: usize,
        tokens: Tokens,
        modality: Modality,
    ) -> Result<Tokens> {
        if self.config.is_specific_layer(layer) {
            let with_global = self.attach_global(tape, tokens, modality)?;
            let out = self.specific_block(tape, layer, with_global, modality)?;
            self.strip_global(tape, out)
        } else {
            let prefix = format!("backbone/layer{layer}/shared");
            let out = self.block_forward(tape, &prefix, tokens.id)?;
            Ok(Tokens { id: out, layout: tokens.layout })
        }
    }

    /// Full ladder for both modalities: one entry per layer, global
    /// tokens stripped. The extractor variant is encoded in the config's
    /// specific-layer set.
    pub fn run_backbone(
        &self,
        tape: &mut Tape,
        rgb: Tokens,
        tir: Tokens,
    ) -> Result<(Vec<Tokens>, Vec<Tokens>)> {
        let mut r = rgb;
        let mut t = tir;
        let mut ladder_rgb = Vec::with_capacity(self.config.num_layers);
        let mut ladder_tir = Vec::with_capacity(self.config.num_layers);
        for layer in 1..=self.config.num_layers {
            if self.config.is_specific_layer(layer) {
                r = self.run_stage(tape, layer, r, Modality::Rgb)?;
                t = self.run_stage(tape, layer, t, Modality::Tir)?;
            } else {
                let (nr, nt) = self.shared_block(tape, layer, r, t)?;
                r = nr;
                t = nt;
            }
            ladder_rgb.push(r);
            ladder_tir.push(t);
        }
        Ok((ladder_rgb, ladder_tir))
    }

    /// Single-modality ladder, used when the other stream is missing.
    pub fn run_backbone_single(
        &self,
        tape: &mut Tape,
        tokens: Tokens,
        modality: Modality,
    ) -> Result<Vec<Tokens>> {
        let mut cur = tokens;
        let mut ladder = Vec::with_capacity(self.config.num_layers);
        for layer in 1..=self.config.num_layers {
            cur = if self.config.is_specific_layer(layer) {
                self.run_stage(tape, layer, cur, modality)?
            } else {
                let prefix = format!("backbone/layer{layer}/shared");
                let id = self.block_forward(tape, &prefix, cur.id)?;
                Tokens { id, layout: cur.layout }
            };
            ladder.push(cur);
        }
        Ok(ladder)
    }

    /// Number of specific stages the configured extractor runs.
    pub fn specific_stage_count(&self) -> usize {
        match self.config.extractor {
            ExtractorVariant::Shared => 0,
            _ => self.config.specific_layers.len(),
        }
    }
}
