//! Deterministic construction of modality-missing benchmarks.
//!
//! Sequence metadata goes in; per-frame `(rgb, tir)` availability
//! schedules come out. Construction is a pure function of the metadata
//! and one global seed: sequences are sorted by length, dealt into the
//! five pattern groups in seeded chunks of five, each group is dealt
//! into the three ratio subgroups in chunks of three, and every sequence
//! then gets its frames flagged by its pattern generator.

mod assign;
mod io;
mod schedule;
mod stats;

pub use assign::{assign_patterns, build_missing_dataset, sequence_seed, AssignmentEntry, DatasetAssignment};
pub use io::{parse_metadata, parse_metadata_str, schedule_csv, ScheduleFile};
pub use schedule::{generate_schedule, missing_budget, missing_runs, MissingRun};
pub use stats::{dataset_stats, DatasetStats, PatternStats, RatioStats};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The three missing ratios (percent of frames) used for subgroup budgets.
pub const RATIOS: [u32; 3] = [30, 60, 90];

/// The five missing patterns: three base patterns plus the two mixed ones
/// built by layering random missing on top of a structured half.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MissingPattern {
    #[serde(rename = "LTM")]
    LongTime,
    #[serde(rename = "SM")]
    Switch,
    #[serde(rename = "RM")]
    Random,
    #[serde(rename = "LTMM")]
    LongTimeMixed,
    #[serde(rename = "SMM")]
    SwitchMixed,
}

pub const PATTERNS: [MissingPattern; 5] = [
    MissingPattern::LongTime,
    MissingPattern::Switch,
    MissingPattern::Random,
    MissingPattern::LongTimeMixed,
    MissingPattern::SwitchMixed,
];

impl MissingPattern {
    pub fn label(self) -> &'static str {
        match self {
            MissingPattern::LongTime => "LTM",
            MissingPattern::Switch => "SM",
            MissingPattern::Random => "RM",
            MissingPattern::LongTimeMixed => "LTMM",
            MissingPattern::SwitchMixed => "SMM",
        }
    }
}

impl std::fmt::Display for MissingPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for MissingPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "LTM" => Ok(MissingPattern::LongTime),
            "SM" => Ok(MissingPattern::Switch),
            "RM" => Ok(MissingPattern::Random),
            "LTMM" => Ok(MissingPattern::LongTimeMixed),
            "SMM" => Ok(MissingPattern::SwitchMixed),
            other => Err(Error::Data(format!("unknown missing pattern `{other}`"))),
        }
    }
}

/// Which modality a frame is missing. At most one modality may be missing
/// per frame; the compensation setup requires the other to exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MissingModality {
    Rgb,
    Tir,
}

/// Name and frame count of one source sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub name: String,
    pub length: usize,
}

impl SequenceMeta {
    pub fn new(name: impl Into<String>, length: usize) -> Result<Self> {
        let name = name.into();
        if length < 2 {
            return Err(Error::Data(format!(
                "sequence `{name}` has {length} frames; at least 2 are required (frame 0 stays complete)"
            )));
        }
        Ok(SequenceMeta { name, length })
    }
}

/// Per-frame availability flags for one sequence, plus the provenance
/// (pattern, ratio, seed) that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingSchedule {
    pub name: String,
    pub pattern: MissingPattern,
    pub ratio: u32,
    pub seed: u64,
    /// `(rgb_available, tir_available)` per frame.
    pub frames: Vec<(bool, bool)>,
}

impl MissingSchedule {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn missing_count(&self) -> usize {
        self.frames.iter().filter(|(r, t)| !r || !t).count()
    }

    /// Checks the universal schedule invariants: frame 0 complete, never
    /// both modalities missing, and the missing-frame count equal to the
    /// rounded ratio budget.
    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::Data(format!("schedule `{}` has no frames", self.name)));
        }
        if self.frames[0] != (true, true) {
            return Err(Error::Data(format!(
                "schedule `{}`: frame 0 must have both modalities",
                self.name
            )));
        }
        if let Some(i) = self.frames.iter().position(|&(r, t)| !r && !t) {
            return Err(Error::Data(format!(
                "schedule `{}`: frame {i} is missing both modalities",
                self.name
            )));
        }
        let expected = missing_budget(self.ratio, self.frames.len());
        let got = self.missing_count();
        if got != expected {
            return Err(Error::Data(format!(
                "schedule `{}`: {got} missing frames, budget is {expected}",
                self.name
            )));
        }
        Ok(())
    }
}
