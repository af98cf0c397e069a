
use crate::error::{Error, Result};
use crate::eval::BoundingBox;
use crate::model::TrackerConfig;
use crate::rng::{rng_from_seed, standard_normal, uniform01, SeedRng};
use crate::tensor::Tensor;

/// One paired observation: the same latent blob rendered into both
/// modalities with modality-specific gain, offset, and noise.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    /// `[H, W, C]` images.
    pub rgb: Tensor,
    pub tir: Tensor,
    /// Tight box around the blob, in pixels, fully inside the image.
    pub gt: BoundingBox,
    pub seed: u64,
}

/// A seeded scene with the blob under a random walk; stands in for a
/// video sequence.
#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub name: String,
    pub frames: Vec<SyntheticScene>,
}

/// Everything that stays fixed across the frames of one sequence.
struct SceneAppearance {
    size: usize,
    channels: usize,
    sx: f64,
    sy: f64,
    rgb_gain: Vec<f64>,
    rgb_base: f64,
    tir_gain: f64,
    tir_base: f64,
    bg_waves: Vec<(f64, f64, f64, f64)>, // (amp, fx, fy, phase)
    noise_std: f64,
}

impl SceneAppearance {
    fn sample(rng: &mut SeedRng, size: usize, channels: usize, difficulty: f64) -> Self {
        let d = difficulty.clamp(0.0, 1.0);
        let rgb_gain = (0..channels)
            .map(|_| 0.6 + 0.4 * uniform01(rng))
            .collect();
        // thermal renders the blob inverted relative to the background
        let tir_gain = -(0.6 + 0.4 * uniform01(rng));
        let bg_waves = (0..3)
            .map(|_| {
                let amp = 0.04 + 0.06 * uniform01(rng);
                let fx = (0.5 + 2.5 * uniform01(rng)) / size as f64;
                let fy = (0.5 + 2.5 * uniform01(rng)) / size as f64;
                let phase = 2.0 * std::f64::consts::PI * uniform01(rng);
                (amp, fx, fy, phase)
            })
            .collect();
        // blob radius capped so the tight box and walk margin fit the frame
        let max_radius = (size as f64 / 8.0).max(1.5);
        let radius = |rng: &mut SeedRng| 1.5 + (max_radius - 1.5) * uniform01(rng);
        SceneAppearance {
            size,
            channels,
            sx: radius(rng),
            sy: radius(rng),
            rgb_gain,
            rgb_base: 0.15,
            tir_gain,
            tir_base: 0.85,
            bg_waves,
            noise_std: 0.02 + 0.08 * d,
        }
    }

    fn margin(&self) -> f64 {
        // keep the tight box inside the frame
        2.0 * self.sx.max(self.sy) + 1.0
    }

    fn background(&self, x: f64, y: f64) -> f64 {
        self.bg_waves
            .iter()
            .map(|(amp, fx, fy, phase)| {
                amp * (2.0 * std::f64::consts::PI * (fx * x + fy * y) + phase).sin()
            })
            .sum()
    }

    fn render(&self, cx: f64, cy: f64, rng: &mut SeedRng, seed: u64) -> SyntheticScene {
        let s = self.size;
        let c = self.channels;
        let mut rgb = Tensor::zeros(vec![s, s, c]);
        let mut tir = Tensor::zeros(vec![s, s, c]);
        for row in 0..s {
            for col in 0..s {
                let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
                let latent = (-(((x - cx) * (x - cx)) / (2.0 * self.sx * self.sx)
                    + ((y - cy) * (y - cy)) / (2.0 * self.sy * self.sy)))
                    .exp();
                let bg = self.background(x, y);
                for ch in 0..c {
                    let idx = (row * s + col) * c + ch;
                    rgb.data_mut()[idx] = self.rgb_base
                        + self.rgb_gain[ch] * latent
                        + 0.3 * bg
                        + self.noise_std * standard_normal(rng);
                    tir.data_mut()[idx] = self.tir_base
                        + self.tir_gain * latent
                        + 0.3 * bg
                        + self.noise_std * standard_normal(rng);
                }
            }
        }
        let hw = 2.0 * self.sx;
        let hh = 2.0 * self.sy;
        let gt = BoundingBox::new(
            (cx - hw).max(0.0),
            (cy - hh).max(0.0),
            (2.0 * hw).min(s as f64 - (cx - hw).max(0.0)),
            (2.0 * hh).min(s as f64 - (cy - hh).max(0.0)),
        );
        SyntheticScene { rgb, tir, gt, seed }
    }

    fn sample_center(&self, rng: &mut SeedRng) -> (f64, f64) {
        let m = self.margin();
        let span = self.size as f64 - 2.0 * m;
        (m + span * uniform01(rng), m + span * uniform01(rng))
    }

    fn walk_center(&self, cx: f64, cy: f64, rng: &mut SeedRng, step: f64) -> (f64, f64) {
        let m = self.margin();
        let hi = self.size as f64 - m;
        let nx = (cx + step * (2.0 * uniform01(rng) - 1.0)).clamp(m, hi);
        let ny = (cy + step * (2.0 * uniform01(rng) - 1.0)).clamp(m, hi);
        (nx, ny)
    }
}

/// Deterministic scene from a seed; `difficulty` in [0, 1] scales noise.
pub fn generate_synthetic_scene(seed: u64, difficulty: f64, config: &TrackerConfig) -> SyntheticScene {
    let mut rng = rng_from_seed(seed);
    let appearance =
        SceneAppearance::sample(&mut rng, config.search_size, config.channels, difficulty);
    let (cx, cy) = appearance.sample_center(&mut rng);
    appearance.render(cx, cy, &mut rng, seed)
}

/// A sequence of `len` frames: fixed appearance, blob center under a
/// seeded random walk, fresh noise per frame.
pub fn generate_synthetic_sequence(
    name: impl Into<String>,
    seed: u64,
    len: usize,
    difficulty: f64,
    config: &TrackerConfig,
) -> SyntheticSequence {
    let mut rng = rng_from_seed(seed);
    let appearance =
        SceneAppearance::sample(&mut rng, config.search_size, config.channels, difficulty);
    let (mut cx, mut cy) = appearance.sample_center(&mut rng);
    let mut frames = Vec::with_capacity(len);
    for _ in 0..len {
        frames.push(appearance.render(cx, cy, &mut rng, seed));
        let step = 1.0 + 2.0 * difficulty.clamp(0.0, 1.0);
        let (nx, ny) = appearance.walk_center(cx, cy, &mut rng, step);
        cx = nx;
        cy = ny;
    }
    SyntheticSequence { name: name.into(), frames }
}

/// Square crop of `side` pixels centered on the box center, clamped to
/// the image bounds. Used to cut the template from frame 0.
pub fn template_crop(image: &Tensor, center: (f64, f64), side: usize) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::shape("template_crop", format!("expected [H,W,C], got {shape:?}")));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if side > h || side > w {
        return Err(Error::shape(
            "template_crop",
            format!("crop {side} exceeds image {h}x{w}"),
        ));
    }
    let x0 = ((center.0 - side as f64 / 2.0).round() as i64).clamp(0, (w - side) as i64) as usize;
    let y0 = ((center.1 - side as f64 / 2.0).round() as i64).clamp(0, (h - side) as i64) as usize;
    let mut out = Tensor::zeros(vec![side, side, c]);
    for row in 0..side {
        for col in 0..side {
            for ch in 0..c {
                out.data_mut()[(row * side + col) * c + ch] =
                    image.data()[((y0 + row) * w + (x0 + col)) * c + ch];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrackerConfig {
        TrackerConfig::default()
    }

    #[test]
    fn same_seed_bitwise_identical() {
        let a = generate_synthetic_scene(42, 0.5, &cfg());
        let b = generate_synthetic_scene(42, 0.5, &cfg());
        assert!(a.rgb.bits_eq(&b.rgb));
        assert!(a.tir.bits_eq(&b.tir));
        assert_eq!(a.gt, b.gt);
    }

    #[test]
    fn gt_box_inside_image() {
        let s = cfg().search_size as f64;
        for seed in 0..50 {
            let scene = generate_synthetic_scene(seed, 0.8, &cfg());
            let g = scene.gt;
            assert!(g.x >= 0.0 && g.y >= 0.0, "seed {seed}");
            assert!(g.x + g.w <= s && g.y + g.h <= s, "seed {seed}");
            assert!(g.has_area());
        }
    }

    #[test]
    fn modalities_differ_but_share_blob_center() {
        // statistical check: the RGB blob is bright, the TIR blob dark;
        // their extremal pixels must sit close together
        let config = cfg();
        let s = config.search_size;
        let mut near = 0;
        for seed in 0..100 {
            let scene = generate_synthetic_scene(seed, 0.5, &config);
            assert!(scene.rgb.max_abs_diff(&scene.tir).unwrap() > 0.0);

            let peak = |img: &Tensor, invert: bool| -> (f64, f64) {
                let mut best = f64::NEG_INFINITY;
                let mut at = (0.0, 0.0);
                for row in 0..s {
                    for col in 0..s {
                        let v: f64 = (0..config.channels)
                            .map(|ch| img.data()[(row * s + col) * config.channels + ch])
                            .sum();
                        let v = if invert { -v } else { v };
                        if v > best {
                            best = v;
                            at = (col as f64, row as f64);
                        }
                    }
                }
                at
            };
            let (rx, ry) = peak(&scene.rgb, false);
            let (tx, ty) = peak(&scene.tir, true);
            if ((rx - tx).powi(2) + (ry - ty).powi(2)).sqrt() <= 3.0 {
                near += 1;
            }
        }
        assert!(near >= 90, "blob centers aligned in only {near}/100 scenes");
    }

    #[test]
    fn sequence_walks_but_keeps_box_inside() {
        let config = cfg();
        let seq = generate_synthetic_sequence("walk", 7, 12, 0.5, &config);
        assert_eq!(seq.frames.len(), 12);
        let s = config.search_size as f64;
        let mut moved = false;
        for pair in seq.frames.windows(2) {
            if pair[0].gt != pair[1].gt {
                moved = true;
            }
        }
        assert!(moved, "blob never moved");
        for f in &seq.frames {
            assert!(f.gt.x >= 0.0 && f.gt.x + f.gt.w <= s);
        }
    }

    #[test]
    fn template_crop_shape_and_determinism() {
        let config = cfg();
        let scene = generate_synthetic_scene(5, 0.5, &config);
        let center = scene.gt.center();
        let t = template_crop(&scene.rgb, center, config.template_size).unwrap();
        assert_eq!(t.shape(), &[16, 16, 3]);
        let t2 = template_crop(&scene.rgb, center, config.template_size).unwrap();
        assert!(t.bits_eq(&t2));
    }
}
