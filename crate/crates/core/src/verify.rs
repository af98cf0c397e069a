//! Release-gate verification suites, runnable at any time from the CLI:
//! the coupling invertibility sweep, the finite-difference gradient
//! checks for every loss, the schedule-invariant sweep, and the
//! metric-oracle equivalence check.
//!
//! The metric oracle here recomputes every score with naive per-frame,
//! per-threshold loops and its own geometry, independent of the engine's
//! code path.

use rand::Rng;

use crate::error::Result;
use crate::eval::{evaluate_sequence, BoundingBox, MetricConfig, Scalars};
use crate::gradcheck::{check_loss_gradients, GRAD_TOL};
use crate::model::{
    generate_synthetic_scene, task_loss, PairInputs, TrackerConfig, TrackerModel,
};
use crate::prompter::{Direction, PrompterConfig, PrompterSet, Stage2Config};
use crate::rng::{derive_seed, rng_from_seed, uniform01};
use crate::sim::{
    generate_schedule, missing_budget, missing_runs, MissingPattern, SequenceMeta, PATTERNS,
    RATIOS,
};
use crate::tensor::{Tape, Tensor};

/// Outcome of one verification suite.
#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    pub detail: String,
}

/// Deliberate defects for mutation checks of the verifier itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Flip the subtraction of T in the coupling inverse to an addition.
    CouplingInverseSign,
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    pub invertibility_draws: usize,
    pub simulator_draws: usize,
    pub metric_sequences: usize,
    pub fault: Option<Fault>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 2024,
            invertibility_draws: 1000,
            simulator_draws: 10_000,
            metric_sequences: 50,
            fault: None,
        }
    }
}

/// Runs all four suites in order.
pub fn run_all(opts: &VerifyOptions) -> Result<Vec<SuiteOutcome>> {
    Ok(vec![
        invertibility_sweep(opts)?,
        gradient_suite(opts.seed)?,
        simulator_sweep(opts)?,
        metric_oracle_suite(opts)?,
    ])
}

/// Tolerance of the invertibility acceptance gate.
pub const INVERTIBILITY_TOL: f64 = 1e-9;

/// Random stacks (depth 1..=8, width 4..=64) applied to inputs of
/// magnitude <= 10; checks `inverse(forward(x)) == x` and
/// `forward(inverse(y)) == y` within [`INVERTIBILITY_TOL`]. Weights are
/// drawn with std `0.5 / sqrt(c)` so deep stacks keep a sane dynamic
/// range; the inverse is exact algebra for any parameters.
pub fn invertibility_sweep(opts: &VerifyOptions) -> Result<SuiteOutcome> {
    let mut rng = rng_from_seed(opts.seed);
    let mut max_err: f64 = 0.0;
    let mut failures = 0usize;
    for draw in 0..opts.invertibility_draws {
        let k = rng.gen_range(1..=8);
        let half = rng.gen_range(2..=32usize);
        let width = 2 * half;
        let rows = rng.gen_range(1..=6);
        let init_std = 0.5 / (half as f64).sqrt();
        let set = PrompterSet::new(
            PrompterConfig { blocks_per_stack: k, init_std, ..PrompterConfig::default() },
            1,
            width,
            derive_seed(opts.seed, draw as u64),
        )?;
        let mut x = Tensor::randn(vec![rows, width], 4.0, &mut rng);
        for v in x.data_mut() {
            *v = v.clamp(-10.0, 10.0);
        }

        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let y = set.stack_forward(&mut tape, Direction::RgbToTir, 1, xid)?;
        let back = match opts.fault {
            None => set.stack_inverse(&mut tape, Direction::RgbToTir, 1, y)?,
            Some(Fault::CouplingInverseSign) => {
                faulty_stack_inverse(&set, &mut tape, Direction::RgbToTir, 1, y)?
            }
        };
        let err_roundtrip = tape.value(back).max_abs_diff(&x)?;

        let inv = match opts.fault {
            None => set.stack_inverse(&mut tape, Direction::RgbToTir, 1, xid)?,
            Some(Fault::CouplingInverseSign) => {
                faulty_stack_inverse(&set, &mut tape, Direction::RgbToTir, 1, xid)?
            }
        };
        let fwd = set.stack_forward(&mut tape, Direction::RgbToTir, 1, inv)?;
        let err_two_sided = tape.value(fwd).max_abs_diff(&x)?;

        let err = err_roundtrip.max(err_two_sided);
        max_err = max_err.max(err);
        if err >= INVERTIBILITY_TOL {
            failures += 1;
        }
    }
    Ok(SuiteOutcome {
        name: "invertibility",
        passed: failures == 0,
        cases: opts.invertibility_draws,
        detail: format!("max reconstruction error {max_err:.3e}, {failures} failure(s)"),
    })
}

/// A sign-flipped inverse, used only to prove the sweep catches defects.
fn faulty_stack_inverse(
    set: &PrompterSet,
    tape: &mut Tape,
    direction: Direction,
    layer: usize,
    y: crate::tensor::TensorId,
) -> Result<crate::tensor::TensorId> {
    let mut cur = y;
    for block in (0..set.config.blocks_per_stack).rev() {
        let prefix = format!("prompter/{}/layer{layer}/block{block}", direction.label());
        let (y1, y2) = tape.split_channels(cur)?;
        let t = set.subnet_forward(tape, &format!("{prefix}/t"), y1)?;
        let x2 = tape.add(y2, t)?; // wrong sign
        let s = set.subnet_forward(tape, &format!("{prefix}/s"), x2)?;
        let x1 = tape.sub(y1, s)?;
        cur = tape.concat_channels(x1, x2)?;
    }
    Ok(cur)
}

/// Finite-difference agreement of every loss on a toy instance: the
/// complete-modality task loss over all model parameters, then the
/// bidirectional, alignment, missing-task, and combined stage-2 losses
/// over all prompter parameters.
pub fn gradient_suite(seed: u64) -> Result<SuiteOutcome> {
    let config = TrackerConfig::toy();
    let scene = generate_synthetic_scene(derive_seed(seed, 0xF0), 0.5, &config);
    let inputs = PairInputs::from_scene(&scene, &config)?;
    let gt = scene.gt;
    let stage2_cfg = Stage2Config::default();

    let mut checked = 0usize;
    let mut max_err: f64 = 0.0;
    let mut worst = String::new();
    let mut track = |name: &str, report: crate::gradcheck::GradCheckReport| {
        checked += report.checked;
        if report.max_rel_err > max_err {
            max_err = report.max_rel_err;
            worst = format!("{name} at {:?}", report.worst);
        }
    };

    // complete-modality task loss over every model parameter
    {
        let model = TrackerModel::new(config.clone(), derive_seed(seed, 1))?;
        let mut params = model.params.clone();
        let cfg = config.clone();
        let inputs = inputs.clone();
        let report = check_loss_gradients(&mut params, move |ps, tape| {
            let view = TrackerModel { config: cfg.clone(), params: ps.clone() };
            let head = view.forward_complete(tape, &inputs)?;
            let terms = task_loss(tape, &head, &gt, &cfg, &Default::default())?;
            Ok(terms.total)
        })?;
        track("task", report);
    }

    // stage-2 losses over every prompter parameter, frozen backbone
    let mut model = TrackerModel::new(config.clone(), derive_seed(seed, 2))?;
    model.freeze();
    let prompter_config = PrompterConfig {
        blocks_per_stack: 2,
        init_std: 0.25,
        ..PrompterConfig::default()
    };
    let base = PrompterSet::new(
        prompter_config.clone(),
        config.num_layers,
        config.embed_dim,
        derive_seed(seed, 3),
    )?;

    type LossPick = fn(&Stage2Terms) -> crate::tensor::TensorId;
    struct Stage2Terms {
        total: crate::tensor::TensorId,
        bidir: crate::tensor::TensorId,
        align: crate::tensor::TensorId,
        task: crate::tensor::TensorId,
    }

    let build = {
        let model = model.clone();
        let inputs = inputs.clone();
        let pc = prompter_config.clone();
        let layers = config.num_layers;
        let width = config.embed_dim;
        let s2 = stage2_cfg.clone();
        move |ps: &crate::tensor::ParamSet, tape: &mut Tape| -> Result<Stage2Terms> {
            let set = PrompterSet {
                config: pc.clone(),
                num_layers: layers,
                width,
                params: ps.clone(),
            };
            // rebuild the individual terms so each is reachable
            let rgb = model.patch_embed(tape, &inputs.search_rgb, &inputs.template_rgb)?;
            let tir = model.patch_embed(tape, &inputs.search_tir, &inputs.template_tir)?;
            let (lr, lt) = model.run_backbone(tape, rgb, tir)?;
            let rgb_ids: Vec<_> = lr.iter().map(|t| t.id).collect();
            let tir_ids: Vec<_> = lt.iter().map(|t| t.id).collect();
            let bundle_t = set.prompter_forward(tape, Direction::RgbToTir, &rgb_ids)?;
            let bundle_r = set.prompter_forward(tape, Direction::TirToRgb, &tir_ids)?;
            let bm1 = crate::prompter::loss_bidirectional(tape, &bundle_t, &tir_ids, &rgb_ids)?;
            let bm2 = crate::prompter::loss_bidirectional(tape, &bundle_r, &rgb_ids, &tir_ids)?;
            let bidir = tape.add(bm1, bm2)?;
            let f_rgb = *lr.last().unwrap();
            let f_tir = *lt.last().unwrap();
            let layout = f_rgb.layout;
            let p_rgb = crate::model::Tokens { id: *bundle_r.prompts.last().unwrap(), layout };
            let p_tir = crate::model::Tokens { id: *bundle_t.prompts.last().unwrap(), layout };
            let align = crate::prompter::loss_task_alignment(tape, &model, f_rgb, f_tir, p_rgb, p_tir)?;
            let task = crate::prompter::loss_missing_task(
                tape, &model, f_rgb, f_tir, p_rgb, p_tir, &gt, &s2.weights,
            )?;
            let align_w = tape.scale(align, s2.lambda_align);
            let bidir_w = tape.scale(bidir, s2.lambda_bidir);
            let partial = tape.add(task.total, align_w)?;
            let total = tape.add(partial, bidir_w)?;
            Ok(Stage2Terms { total, bidir, align, task: task.total })
        }
    };

    let picks: [(&str, LossPick); 4] = [
        ("bidirectional", |t| t.bidir),
        ("alignment", |t| t.align),
        ("missing-task", |t| t.task),
        ("stage2-combined", |t| t.total),
    ];
    for (name, pick) in picks {
        let mut params = base.params.clone();
        let build = &build;
        let report = check_loss_gradients(&mut params, move |ps, tape| {
            let terms = build(ps, tape)?;
            Ok(pick(&terms))
        })?;
        track(name, report);
    }

    Ok(SuiteOutcome {
        name: "gradients",
        passed: max_err < GRAD_TOL,
        cases: checked,
        detail: format!("max rel err {max_err:.3e} ({worst})"),
    })
}

/// Randomized schedule sweep: frame-0 completeness, single-modality
/// missing, exact budgets, pattern structure, and seed determinism.
pub fn simulator_sweep(opts: &VerifyOptions) -> Result<SuiteOutcome> {
    let mut rng = rng_from_seed(opts.seed ^ 0x5151);
    let mut failures = Vec::new();
    for draw in 0..opts.simulator_draws {
        let pattern = PATTERNS[rng.gen_range(0..PATTERNS.len())];
        let ratio = RATIOS[rng.gen_range(0..RATIOS.len())];
        let len = loop {
            let l = rng.gen_range(2..400usize);
            if missing_budget(ratio, l) + 1 <= l {
                break l;
            }
        };
        let seed = rng.gen::<u64>();
        let meta = SequenceMeta::new(format!("sweep{draw}"), len)?;
        let schedule = generate_schedule(&meta, pattern, ratio, seed)?;

        if let Err(e) = schedule.validate() {
            failures.push(format!("draw {draw}: {e}"));
        }
        let runs = missing_runs(&schedule.frames);
        match pattern {
            MissingPattern::LongTime => {
                let expected = usize::from(missing_budget(ratio, len) > 0);
                if runs.len() != expected {
                    failures.push(format!("draw {draw}: LTM has {} runs", runs.len()));
                }
            }
            MissingPattern::Switch => {
                for pair in runs.windows(2) {
                    if pair[0].missing == pair[1].missing {
                        failures.push(format!("draw {draw}: SM runs do not alternate"));
                        break;
                    }
                }
            }
            _ => {}
        }
        let again = generate_schedule(&meta, pattern, ratio, seed)?;
        if again != schedule {
            failures.push(format!("draw {draw}: schedule not deterministic"));
        }
        if failures.len() > 8 {
            break;
        }
    }
    Ok(SuiteOutcome {
        name: "simulator-invariants",
        passed: failures.is_empty(),
        cases: opts.simulator_draws,
        detail: if failures.is_empty() {
            "all schedules satisfied the invariants".into()
        } else {
            failures.join("; ")
        },
    })
}

// ── Naive metric oracle ───────────────────────────────────────────────

fn naive_center_error(p: &BoundingBox, g: &BoundingBox) -> f64 {
    let pcx = p.x + p.w / 2.0;
    let pcy = p.y + p.h / 2.0;
    let gcx = g.x + g.w / 2.0;
    let gcy = g.y + g.h / 2.0;
    ((pcx - gcx).powi(2) + (pcy - gcy).powi(2)).sqrt()
}

fn naive_iou(p: &BoundingBox, g: &BoundingBox) -> f64 {
    if p.w <= 0.0 || p.h <= 0.0 {
        return 0.0;
    }
    let x1 = p.x.max(g.x);
    let y1 = p.y.max(g.y);
    let x2 = (p.x + p.w).min(g.x + g.w);
    let y2 = (p.y + p.h).min(g.y + g.h);
    if x2 <= x1 || y2 <= y1 {
        return 0.0;
    }
    let inter = (x2 - x1) * (y2 - y1);
    inter / (p.w * p.h + g.w * g.h - inter)
}

/// Brute-force MPR/MSR/NPR: double loop over frames and thresholds, no
/// shared helpers with the engine.
pub fn naive_scalars(
    pred: &[BoundingBox],
    gt_rgb: &[BoundingBox],
    gt_tir: Option<&[BoundingBox]>,
    config: &MetricConfig,
) -> Scalars {
    let mut errs = Vec::new();
    let mut overlaps = Vec::new();
    let mut nerrs = Vec::new();
    for i in 0..pred.len() {
        let mut frame_err = f64::INFINITY;
        let mut frame_ov = f64::NEG_INFINITY;
        let mut frame_ne = f64::INFINITY;
        let mut any = false;
        let mut consider = |g: &BoundingBox| {
            if g.w > 0.0 && g.h > 0.0 {
                any = true;
                frame_err = frame_err.min(naive_center_error(&pred[i], g));
                frame_ov = frame_ov.max(naive_iou(&pred[i], g));
                let dx = (pred[i].x + pred[i].w / 2.0 - g.x - g.w / 2.0) / g.w;
                let dy = (pred[i].y + pred[i].h / 2.0 - g.y - g.h / 2.0) / g.h;
                frame_ne = frame_ne.min((dx * dx + dy * dy).sqrt());
            }
        };
        consider(&gt_rgb[i]);
        if let Some(gt2) = gt_tir {
            consider(&gt2[i]);
        }
        if any {
            errs.push(frame_err);
            overlaps.push(frame_ov);
            nerrs.push(frame_ne);
        }
    }
    let n = errs.len().max(1) as f64;
    let mpr = errs.iter().filter(|&&e| e <= config.pr_threshold_px).count() as f64 / n;

    let samples = config.success_samples.max(2);
    let mut msr_acc = 0.0;
    for s in 0..samples {
        let tau = s as f64 / (samples - 1) as f64;
        msr_acc += overlaps.iter().filter(|&&o| o > tau).count() as f64 / n;
    }
    let msr = msr_acc / samples as f64;

    let np_count = (config.npr_max / config.npr_step).round() as usize + 1;
    let mut npr_acc = 0.0;
    for s in 0..np_count {
        let tau = s as f64 * config.npr_step;
        npr_acc += nerrs.iter().filter(|&&e| e <= tau).count() as f64 / n;
    }
    let npr = npr_acc / np_count as f64;

    Scalars { mpr, msr, npr }
}

/// Random small sequences (dual ground truth on half) where the engine
/// must reproduce the naive oracle to 1e-12 and dominate the single-GT
/// scores.
pub fn metric_oracle_suite(opts: &VerifyOptions) -> Result<SuiteOutcome> {
    let mut rng = rng_from_seed(opts.seed ^ 0xE7A1);
    let config = MetricConfig::default();
    let mut max_gap: f64 = 0.0;
    let mut failures = Vec::new();
    for case in 0..opts.metric_sequences {
        let frames = 20;
        let mk_track = |rng: &mut crate::rng::SeedRng, base: f64| -> Vec<BoundingBox> {
            let mut cx = 30.0 + 40.0 * uniform01(rng);
            let mut cy = 30.0 + 40.0 * uniform01(rng);
            (0..frames)
                .map(|_| {
                    cx += 6.0 * (uniform01(rng) - 0.5);
                    cy += 6.0 * (uniform01(rng) - 0.5);
                    let w = base + 10.0 * uniform01(rng);
                    let h = base + 10.0 * uniform01(rng);
                    BoundingBox::new(cx - w / 2.0, cy - h / 2.0, w, h)
                })
                .collect()
        };
        let gt_rgb = mk_track(&mut rng, 8.0);
        let gt_tir: Option<Vec<BoundingBox>> = if case % 2 == 0 {
            Some(
                gt_rgb
                    .iter()
                    .map(|b| {
                        BoundingBox::new(
                            b.x + 8.0 * (uniform01(&mut rng) - 0.5),
                            b.y + 8.0 * (uniform01(&mut rng) - 0.5),
                            b.w * (0.8 + 0.4 * uniform01(&mut rng)),
                            b.h * (0.8 + 0.4 * uniform01(&mut rng)),
                        )
                    })
                    .collect(),
            )
        } else {
            None
        };
        let pred: Vec<BoundingBox> = gt_rgb
            .iter()
            .map(|b| {
                BoundingBox::new(
                    b.x + 30.0 * (uniform01(&mut rng) - 0.5),
                    b.y + 30.0 * (uniform01(&mut rng) - 0.5),
                    b.w * (0.6 + 0.8 * uniform01(&mut rng)),
                    b.h * (0.6 + 0.8 * uniform01(&mut rng)),
                )
            })
            .collect();

        let eval = evaluate_sequence(&pred, &gt_rgb, gt_tir.as_deref(), &config)?;
        let oracle = naive_scalars(&pred, &gt_rgb, gt_tir.as_deref(), &config);
        let gap = (eval.scalars.mpr - oracle.mpr)
            .abs()
            .max((eval.scalars.msr - oracle.msr).abs())
            .max((eval.scalars.npr - oracle.npr).abs());
        max_gap = max_gap.max(gap);
        if gap > 1e-12 {
            failures.push(format!("case {case}: engine/oracle gap {gap:.3e}"));
        }

        if let Some(gt2) = &gt_tir {
            let single_rgb = evaluate_sequence(&pred, &gt_rgb, None, &config)?;
            let single_tir = evaluate_sequence(&pred, gt2, None, &config)?;
            let dominated = eval.scalars.mpr + 1e-15 >= single_rgb.scalars.mpr.max(single_tir.scalars.mpr)
                && eval.scalars.msr + 1e-15 >= single_rgb.scalars.msr.max(single_tir.scalars.msr)
                && eval.scalars.npr + 1e-15 >= single_rgb.scalars.npr.max(single_tir.scalars.npr);
            if !dominated {
                failures.push(format!("case {case}: dual-GT dominance violated"));
            }
        }
    }
    Ok(SuiteOutcome {
        name: "metric-oracle",
        passed: failures.is_empty(),
        cases: opts.metric_sequences,
        detail: if failures.is_empty() {
            format!("max engine/oracle gap {max_gap:.3e}")
        } else {
            failures.join("; ")
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_opts() -> VerifyOptions {
        VerifyOptions {
            invertibility_draws: 50,
            simulator_draws: 300,
            metric_sequences: 10,
            ..VerifyOptions::default()
        }
    }

    #[test]
    fn clean_build_passes_all_suites() {
        for outcome in run_all(&quick_opts()).unwrap() {
            assert!(outcome.passed, "{}: {}", outcome.name, outcome.detail);
        }
    }

    #[test]
    fn injected_sign_error_fails_the_invertibility_suite() {
        let opts = VerifyOptions {
            fault: Some(Fault::CouplingInverseSign),
            ..quick_opts()
        };
        let outcome = invertibility_sweep(&opts).unwrap();
        assert!(!outcome.passed, "sign fault went undetected: {}", outcome.detail);
    }

    #[test]
    fn detail_reports_max_reconstruction_error() {
        let outcome = invertibility_sweep(&quick_opts()).unwrap();
        assert!(outcome.detail.contains("max reconstruction error"));
    }
}
