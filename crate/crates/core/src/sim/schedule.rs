use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, SeedRng};
use crate::sim::{MissingModality, MissingPattern, MissingSchedule, SequenceMeta};

/// Number of missing frames for a ratio (percent) and sequence length:
/// round-half-up of `ratio/100 * len`, computed in integer arithmetic so
/// the rule is exact for every input.
pub fn missing_budget(ratio: u32, len: usize) -> usize {
    (ratio as usize * len + 50) / 100
}

/// Builds the availability schedule for one sequence.
///
/// Frame 0 is always complete, so a budget larger than `len - 1` is
/// infeasible. A budget of zero yields a schedule with no missing frames.
///
/// Placement, per pattern:
/// - LTM: one contiguous block of one seeded-random modality, start
///   uniform in `[1, len - m]`.
/// - SM: four contiguous blocks of as-equal-as-possible sizes, modality
///   alternating from a seeded start, the whole span placed uniformly.
/// - RM: `m` distinct frames from `[1, len)`, missing modality drawn per
///   frame.
/// - LTMM / SMM: ceil(m/2) placed as the structured pattern, the
///   remainder as random missing over frames not already missing.
pub fn generate_schedule(
    meta: &SequenceMeta,
    pattern: MissingPattern,
    ratio: u32,
    seed: u64,
) -> Result<MissingSchedule> {
    let len = meta.length;
    let m = missing_budget(ratio, len);
    if m + 1 > len {
        return Err(Error::Data(format!(
            "sequence `{}`: budget {m} exceeds the {} assignable frames (frame 0 stays complete)",
            meta.name,
            len - 1
        )));
    }

    let mut rng = rng_from_seed(seed);
    let mut frames = vec![(true, true); len];
    match pattern {
        MissingPattern::LongTime => place_long_time(&mut frames, m, &mut rng),
        MissingPattern::Switch => place_switch(&mut frames, m, &mut rng),
        MissingPattern::Random => place_random(&mut frames, m, &mut rng),
        MissingPattern::LongTimeMixed => {
            let structured = m.div_ceil(2);
            place_long_time(&mut frames, structured, &mut rng);
            place_random(&mut frames, m - structured, &mut rng);
        }
        MissingPattern::SwitchMixed => {
            let structured = m.div_ceil(2);
            place_switch(&mut frames, structured, &mut rng);
            place_random(&mut frames, m - structured, &mut rng);
        }
    }

    let schedule = MissingSchedule {
        name: meta.name.clone(),
        pattern,
        ratio,
        seed,
        frames,
    };
    schedule.validate()?;
    Ok(schedule)
}

fn mark(frames: &mut [(bool, bool)], index: usize, missing: MissingModality) {
    match missing {
        MissingModality::Rgb => frames[index].0 = false,
        MissingModality::Tir => frames[index].1 = false,
    }
}

fn random_modality(rng: &mut SeedRng) -> MissingModality {
    if rng.gen_range(0..2) == 0 {
        MissingModality::Rgb
    } else {
        MissingModality::Tir
    }
}

fn place_long_time(frames: &mut [(bool, bool)], m: usize, rng: &mut SeedRng) {
    if m == 0 {
        return;
    }
    let modality = random_modality(rng);
    let start = rng.gen_range(1..=frames.len() - m);
    for i in start..start + m {
        mark(frames, i, modality);
    }
}

/// Number of alternating blocks in a switch-missing schedule.
const SWITCH_BLOCKS: usize = 4;

fn place_switch(frames: &mut [(bool, bool)], m: usize, rng: &mut SeedRng) {
    if m == 0 {
        return;
    }
    let mut modality = random_modality(rng);
    let start = rng.gen_range(1..=frames.len() - m);
    let base = m / SWITCH_BLOCKS;
    let rem = m % SWITCH_BLOCKS;
    let mut cursor = start;
    for b in 0..SWITCH_BLOCKS {
        let size = base + usize::from(b < rem);
        for i in cursor..cursor + size {
            mark(frames, i, modality);
        }
        cursor += size;
        modality = match modality {
            MissingModality::Rgb => MissingModality::Tir,
            MissingModality::Tir => MissingModality::Rgb,
        };
    }
}

fn place_random(frames: &mut [(bool, bool)], m: usize, rng: &mut SeedRng) {
    if m == 0 {
        return;
    }
    // candidate frames are those still complete (frame 0 excluded)
    let mut candidates: Vec<usize> = (1..frames.len())
        .filter(|&i| frames[i] == (true, true))
        .collect();
    debug_assert!(candidates.len() >= m);
    for k in 0..m {
        let j = rng.gen_range(k..candidates.len());
        candidates.swap(k, j);
        mark(frames, candidates[k], random_modality(rng));
    }
}

/// A maximal run of consecutive frames missing the same modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MissingRun {
    pub start: usize,
    pub len: usize,
    pub missing: MissingModality,
}

/// Maximal same-modality missing runs, in frame order.
pub fn missing_runs(frames: &[(bool, bool)]) -> Vec<MissingRun> {
    let state = |f: (bool, bool)| -> Option<MissingModality> {
        match f {
            (false, true) => Some(MissingModality::Rgb),
            (true, false) => Some(MissingModality::Tir),
            _ => None,
        }
    };
    let mut runs = Vec::new();
    let mut current: Option<MissingRun> = None;
    for (i, &f) in frames.iter().enumerate() {
        match (state(f), &mut current) {
            (Some(m), Some(run)) if run.missing == m && run.start + run.len == i => run.len += 1,
            (Some(m), _) => {
                if let Some(run) = current.take() {
                    runs.push(run);
                }
                current = Some(MissingRun { start: i, len: 1, missing: m });
            }
            (None, _) => {
                if let Some(run) = current.take() {
                    runs.push(run);
                }
            }
        }
    }
    if let Some(run) = current {
        runs.push(run);
    }
    runs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(name: &str, len: usize) -> SequenceMeta {
        SequenceMeta::new(name, len).unwrap()
    }

    #[test]
    fn budget_rounds_half_up() {
        assert_eq!(missing_budget(30, 10), 3);
        assert_eq!(missing_budget(30, 2), 1); // 0.6 -> 1
        assert_eq!(missing_budget(30, 3), 1); // 0.9 -> 1
        assert_eq!(missing_budget(90, 10), 9);
        assert_eq!(missing_budget(60, 5), 3);
        assert_eq!(missing_budget(30, 5), 2); // 1.5 -> 2, half rounds up
    }

    #[test]
    fn ltm_is_one_contiguous_block() {
        let s = generate_schedule(&meta("a", 10), MissingPattern::LongTime, 30, 7).unwrap();
        assert_eq!(s.missing_count(), 3);
        assert_eq!(s.frames[0], (true, true));
        let runs = missing_runs(&s.frames);
        assert_eq!(runs.len(), 1);
        assert_eq!(runs[0].len, 3);
    }

    #[test]
    fn tiny_sequence_single_missing_frame() {
        // len 3 at 30% -> budget 1, placed in [1, 2]
        let s = generate_schedule(&meta("t", 3), MissingPattern::LongTime, 30, 1).unwrap();
        assert_eq!(s.missing_count(), 1);
        let runs = missing_runs(&s.frames);
        assert_eq!(runs.len(), 1);
        assert!(runs[0].start == 1 || runs[0].start == 2);
    }

    #[test]
    fn sm_even_budget_gives_equal_alternating_blocks() {
        let s = generate_schedule(&meta("s", 20), MissingPattern::Switch, 40, 3).unwrap();
        assert_eq!(s.missing_count(), 8);
        let runs = missing_runs(&s.frames);
        assert_eq!(runs.len(), 4);
        assert!(runs.iter().all(|r| r.len == 2));
        for pair in runs.windows(2) {
            assert_ne!(pair[0].missing, pair[1].missing);
        }
    }

    #[test]
    fn sm_uneven_budget_spreads_remainder() {
        // m = 10 over 4 blocks -> 3,3,2,2
        let s = generate_schedule(&meta("s", 30), MissingPattern::Switch, 33, 11).unwrap();
        assert_eq!(s.missing_count(), 10);
        let runs = missing_runs(&s.frames);
        let sizes: Vec<usize> = runs.iter().map(|r| r.len).collect();
        assert_eq!(sizes, vec![3, 3, 2, 2]);
    }

    #[test]
    fn rm_frames_distinct_and_in_range() {
        let s = generate_schedule(&meta("r", 40), MissingPattern::Random, 60, 5).unwrap();
        assert_eq!(s.missing_count(), missing_budget(60, 40));
        assert_eq!(s.frames[0], (true, true));
        assert!(s.frames.iter().all(|&(r, t)| r || t));
    }

    #[test]
    fn mixed_patterns_meet_budget_exactly() {
        for (pattern, seed) in [(MissingPattern::LongTimeMixed, 9), (MissingPattern::SwitchMixed, 10)] {
            let s = generate_schedule(&meta("m", 25), pattern, 60, seed).unwrap();
            assert_eq!(s.missing_count(), missing_budget(60, 25));
            s.validate().unwrap();
        }
    }

    #[test]
    fn infeasible_budget_is_a_data_error() {
        // len 5 at 90% -> budget 5 > 4 assignable frames
        let err = generate_schedule(&meta("x", 5), MissingPattern::LongTime, 90, 0).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn deterministic_under_seed() {
        let a = generate_schedule(&meta("d", 50), MissingPattern::SwitchMixed, 90, 1234).unwrap();
        let b = generate_schedule(&meta("d", 50), MissingPattern::SwitchMixed, 90, 1234).unwrap();
        assert_eq!(a, b);
        let c = generate_schedule(&meta("d", 50), MissingPattern::SwitchMixed, 90, 1235).unwrap();
        assert_ne!(a, c);
    }
}
