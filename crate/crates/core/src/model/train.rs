use crate::compensate::{compensate, CompensationKind};
use crate::error::{Error, Result};
use crate::eval::Trajectory;
use crate::model::{
    generate_synthetic_scene, task_loss, template_crop, HeadOutput, LossWeights, Modality,
    SyntheticScene, SyntheticSequence, TrackerConfig, TrackerModel,
};
use crate::prompter::{Direction, PrompterSet};
use crate::rng::derive_seed;
use crate::sim::MissingSchedule;
use crate::tensor::{AdamW, OptimConfig, Tape, Tensor};

/// Complete-modality inputs for one observation.
#[derive(Debug, Clone)]
pub struct PairInputs {
    pub search_rgb: Tensor,
    pub search_tir: Tensor,
    pub template_rgb: Tensor,
    pub template_tir: Tensor,
}

impl PairInputs {
    /// Training view of a single scene: the template is cut around the
    /// scene's own target.
    pub fn from_scene(scene: &SyntheticScene, config: &TrackerConfig) -> Result<Self> {
        let center = scene.gt.center();
        Ok(PairInputs {
            search_rgb: scene.rgb.clone(),
            search_tir: scene.tir.clone(),
            template_rgb: template_crop(&scene.rgb, center, config.template_size)?,
            template_tir: template_crop(&scene.tir, center, config.template_size)?,
        })
    }
}

/// Current-frame search images; `None` marks a missing stream.
#[derive(Debug, Clone)]
pub struct FrameInputs {
    pub search_rgb: Option<Tensor>,
    pub search_tir: Option<Tensor>,
}

/// Templates captured on the (always complete) first frame.
#[derive(Debug, Clone)]
pub struct Templates {
    pub rgb: Tensor,
    pub tir: Tensor,
}

impl Templates {
    pub fn from_first_frame(scene: &SyntheticScene, config: &TrackerConfig) -> Result<Self> {
        let center = scene.gt.center();
        Ok(Templates {
            rgb: template_crop(&scene.rgb, center, config.template_size)?,
            tir: template_crop(&scene.tir, center, config.template_size)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub seed: u64,
    pub difficulty: f64,
    pub weights: LossWeights,
    pub optim: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 400,
            seed: 0,
            difficulty: 0.5,
            weights: LossWeights::default(),
            optim: OptimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Stage1Trace {
    pub step: usize,
    pub total: f64,
    pub classification: f64,
    pub l1: f64,
    pub overlap: f64,
}

/// Outcome of a stage-1 run. On divergence, training aborts but the
/// trace up to the failing step is retained alongside the diagnostics.
#[derive(Debug, Clone)]
pub struct Stage1Run {
    pub trace: Vec<Stage1Trace>,
    pub diverged: Option<String>,
}

impl TrackerModel {
    /// Complete-modality forward to the head, on the given tape.
    pub fn forward_complete(
        &self,
        tape: &mut Tape,
        inputs: &PairInputs,
    ) -> Result<crate::model::HeadForward> {
        let rgb = self.patch_embed(tape, &inputs.search_rgb, &inputs.template_rgb)?;
        let tir = self.patch_embed(tape, &inputs.search_tir, &inputs.template_tir)?;
        let (ladder_rgb, ladder_tir) = self.run_backbone(tape, rgb, tir)?;
        let fused = self.fuse(tape, *ladder_rgb.last().unwrap(), *ladder_tir.last().unwrap())?;
        self.head_forward(tape, fused)
    }
}

/// First training stage: minimizes the tracking loss of the
/// complete-modality model over seeded synthetic scenes. Every parameter
/// is trainable here.
pub fn train_stage1(model: &mut TrackerModel, cfg: &TrainConfig) -> Result<Vec<Stage1Trace>> {
    let mut opt = AdamW::new(cfg.optim.clone());
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let scene = generate_synthetic_scene(derive_seed(cfg.seed, step as u64), cfg.difficulty, &model.config);
        let inputs = PairInputs::from_scene(&scene, &model.config)?;
        let mut tape = Tape::new();
        let head = model.forward_complete(&mut tape, &inputs)?;
        let terms = task_loss(&mut tape, &head, &scene.gt, &model.config, &cfg.weights)?;
        let total = tape.value(terms.total).data()[0];
        if !total.is_finite() {
            return Err(Error::Diverged(format!(
                "stage-1 loss became {total} at step {step} (cls {}, l1 {}, overlap {})",
                terms.classification, terms.l1, terms.overlap
            )));
        }
        tape.backward(terms.total)?;
        model.params.zero_grads();
        tape.accumulate_param_grads(&mut model.params);
        opt.step(&mut model.params);
        trace.push(Stage1Trace {
            step,
            total,
            classification: terms.classification,
            l1: terms.l1,
            overlap: terms.overlap,
        });
    }
    Ok(trace)
}

/// One tracking step under the availability flags carried by the frame
/// inputs.
///
/// - both streams present: both backbone paths, fusion, head; no
///   prompter is touched;
/// - one stream missing: the available modality's backbone path runs and
///   the missing modality's feature ladder is generated by the matching
///   prompter stacks, layer by layer;
/// - both missing: protocol error (the schedule construction guarantees
///   it never happens).
pub fn inference_step(
    model: &TrackerModel,
    prompters: Option<&PrompterSet>,
    templates: &Templates,
    frame: &FrameInputs,
) -> Result<HeadOutput> {
    let mut tape = Tape::new();
    let head = match (&frame.search_rgb, &frame.search_tir) {
        (Some(rgb), Some(tir)) => {
            let inputs = PairInputs {
                search_rgb: rgb.clone(),
                search_tir: tir.clone(),
                template_rgb: templates.rgb.clone(),
                template_tir: templates.tir.clone(),
            };
            model.forward_complete(&mut tape, &inputs)?
        }
        (None, Some(tir)) => {
            prompted_forward(model, prompters, &mut tape, tir, &templates.tir, Modality::Rgb)?
        }
        (Some(rgb), None) => {
            prompted_forward(model, prompters, &mut tape, rgb, &templates.rgb, Modality::Tir)?
        }
        (None, None) => {
            return Err(Error::Protocol(
                "both modalities missing in one frame".into(),
            ))
        }
    };
    Ok(model.detach_head(&tape, &head))
}

fn prompted_forward(
    model: &TrackerModel,
    prompters: Option<&PrompterSet>,
    tape: &mut Tape,
    search_available: &Tensor,
    template_available: &Tensor,
    missing: Modality,
) -> Result<crate::model::HeadForward> {
    let Some(prompters) = prompters else {
        return Err(Error::Protocol(format!(
            "{} stream missing but no prompter is attached",
            missing.label()
        )));
    };
    let available = missing.other();
    let tokens = model.patch_embed(tape, search_available, template_available)?;
    let ladder = model.run_backbone_single(tape, tokens, available)?;
    let ladder_ids: Vec<_> = ladder.iter().map(|t| t.id).collect();
    let direction = Direction::for_missing(missing);
    let prompts = prompters.prompt_ladder(tape, direction, &ladder_ids)?;

    let f_available = *ladder.last().unwrap();
    let prompt_last = crate::model::Tokens {
        id: *prompts.last().unwrap(),
        layout: f_available.layout,
    };
    let fused = match missing {
        Modality::Rgb => model.fuse(tape, prompt_last, f_available)?,
        Modality::Tir => model.fuse(tape, f_available, prompt_last)?,
    };
    model.head_forward(tape, fused)
}

/// How frames with a missing stream are handled when running a sequence.
#[derive(Clone, Copy)]
pub enum MissingInputPolicy<'a> {
    /// Path switching through the invertible prompters.
    Prompter(&'a PrompterSet),
    /// Image-level substitution; the model then runs as if complete.
    Compensation(CompensationKind),
}

/// Runs a full sequence under a schedule and returns the predicted
/// trajectory in search-region pixels.
pub fn run_sequence(
    model: &TrackerModel,
    policy: MissingInputPolicy<'_>,
    sequence: &SyntheticSequence,
    schedule: &MissingSchedule,
) -> Result<Trajectory> {
    if schedule.frames.len() != sequence.frames.len() {
        return Err(Error::Data(format!(
            "schedule has {} frames, sequence `{}` has {}",
            schedule.frames.len(),
            sequence.name,
            sequence.frames.len()
        )));
    }
    schedule.validate()?;
    let templates = Templates::from_first_frame(&sequence.frames[0], &model.config)?;

    let mut boxes = Vec::with_capacity(sequence.frames.len());
    for (scene, &(rgb_ok, tir_ok)) in sequence.frames.iter().zip(&schedule.frames) {
        let output = match policy {
            MissingInputPolicy::Prompter(prompters) => {
                let frame = FrameInputs {
                    search_rgb: rgb_ok.then(|| scene.rgb.clone()),
                    search_tir: tir_ok.then(|| scene.tir.clone()),
                };
                inference_step(model, Some(prompters), &templates, &frame)?
            }
            MissingInputPolicy::Compensation(kind) => {
                let (rgb, tir) = match (rgb_ok, tir_ok) {
                    (true, true) => (scene.rgb.clone(), scene.tir.clone()),
                    (false, true) => (compensate(&scene.tir, kind), scene.tir.clone()),
                    (true, false) => (scene.rgb.clone(), compensate(&scene.rgb, kind)),
                    (false, false) => {
                        return Err(Error::Protocol("both modalities missing".into()))
                    }
                };
                let frame = FrameInputs { search_rgb: Some(rgb), search_tir: Some(tir) };
                inference_step(model, None, &templates, &frame)?
            }
        };
        boxes.push(output.box_px(model.config.search_size));
    }
    Ok(Trajectory { name: sequence.name.clone(), boxes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::generate_synthetic_sequence;
    use crate::prompter::PrompterConfig;
    use crate::sim::{generate_schedule, MissingPattern, SequenceMeta};

    fn toy_model(seed: u64) -> TrackerModel {
        TrackerModel::new(TrackerConfig::toy(), seed).unwrap()
    }

    fn toy_prompters(model: &TrackerModel, seed: u64) -> PrompterSet {
        PrompterSet::new(
            PrompterConfig { blocks_per_stack: 2, ..PrompterConfig::default() },
            model.config.num_layers,
            model.config.embed_dim,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn stage1_all_parameters_trainable_and_loss_drops() {
        let mut model = toy_model(1);
        assert!(model.params.iter().all(|p| p.trainable));
        let cfg = TrainConfig { steps: 200, seed: 3, ..TrainConfig::default() };
        let trace = train_stage1(&mut model, &cfg).unwrap();
        assert_eq!(trace.len(), 200);
        // smoke contract: later loss below the first-step loss
        let first = trace.first().unwrap().total;
        let tail: f64 =
            trace[trace.len() - 20..].iter().map(|t| t.total).sum::<f64>() / 20.0;
        assert!(tail < first, "loss did not drop: first {first}, tail mean {tail}");
        assert!(trace.iter().all(|t| t.total.is_finite()));
    }

    #[test]
    fn stage1_deterministic_under_seed() {
        let cfg = TrainConfig { steps: 5, seed: 11, ..TrainConfig::default() };
        let mut m1 = toy_model(2);
        let t1 = train_stage1(&mut m1, &cfg).unwrap();
        let mut m2 = toy_model(2);
        let t2 = train_stage1(&mut m2, &cfg).unwrap();
        assert_eq!(
            t1.iter().map(|t| t.total.to_bits()).collect::<Vec<_>>(),
            t2.iter().map(|t| t.total.to_bits()).collect::<Vec<_>>()
        );
        assert!(m1.params.matches_snapshot(&m2.params.snapshot_bits()));
    }

    #[test]
    fn complete_input_never_touches_prompters() {
        let model = toy_model(3);
        let prompters = toy_prompters(&model, 4);
        let scene = generate_synthetic_scene(5, 0.5, &model.config);
        let templates = Templates::from_first_frame(&scene, &model.config).unwrap();
        let frame = FrameInputs {
            search_rgb: Some(scene.rgb.clone()),
            search_tir: Some(scene.tir.clone()),
        };
        let with = inference_step(&model, Some(&prompters), &templates, &frame).unwrap();
        let without = inference_step(&model, None, &templates, &frame).unwrap();
        assert!(with.score_map.bits_eq(&without.score_map));
        assert_eq!(with.box_norm, without.box_norm);
    }

    #[test]
    fn missing_modality_uses_prompter_or_fails() {
        let model = toy_model(6);
        let prompters = toy_prompters(&model, 7);
        let scene = generate_synthetic_scene(8, 0.5, &model.config);
        let templates = Templates::from_first_frame(&scene, &model.config).unwrap();
        let frame = FrameInputs { search_rgb: None, search_tir: Some(scene.tir.clone()) };
        inference_step(&model, Some(&prompters), &templates, &frame).unwrap();
        let err = inference_step(&model, None, &templates, &frame).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }

    #[test]
    fn both_missing_is_a_protocol_error() {
        let model = toy_model(9);
        let prompters = toy_prompters(&model, 10);
        let scene = generate_synthetic_scene(11, 0.5, &model.config);
        let templates = Templates::from_first_frame(&scene, &model.config).unwrap();
        let frame = FrameInputs { search_rgb: None, search_tir: None };
        let err = inference_step(&model, Some(&prompters), &templates, &frame).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }

    #[test]
    fn schedule_drives_the_path_over_a_sequence() {
        let model = toy_model(12);
        let prompters = toy_prompters(&model, 13);
        let seq = generate_synthetic_sequence("drive", 14, 10, 0.5, &model.config);
        let meta = SequenceMeta::new("drive", 10).unwrap();
        let schedule = generate_schedule(&meta, MissingPattern::Switch, 60, 15).unwrap();
        let traj = run_sequence(
            &model,
            MissingInputPolicy::Prompter(&prompters),
            &seq,
            &schedule,
        )
        .unwrap();
        assert_eq!(traj.boxes.len(), 10);

        // compensation path also runs end to end
        let traj2 = run_sequence(
            &model,
            MissingInputPolicy::Compensation(CompensationKind::Copy),
            &seq,
            &schedule,
        )
        .unwrap();
        assert_eq!(traj2.boxes.len(), 10);

        // complete frames agree between the two policies
        for (i, &(r, t)) in schedule.frames.iter().enumerate() {
            if r && t {
                assert_eq!(traj.boxes[i], traj2.boxes[i], "frame {i}");
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_trained_weights() {
        let mut model = toy_model(20);
        let cfg = TrainConfig { steps: 3, seed: 21, ..TrainConfig::default() };
        train_stage1(&mut model, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stage1.ckpt");
        crate::checkpoint::save(&path, &model.params).unwrap();
        let loaded = crate::checkpoint::load(&path).unwrap();
        let mut restored = toy_model(20);
        restored.params.load_values(&loaded).unwrap();
        assert!(restored.params.matches_snapshot(&model.params.snapshot_bits()));
    }
}
