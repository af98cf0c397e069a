use serde::{Deserialize, Serialize};

use crate::sim::{MissingPattern, MissingSchedule, PATTERNS, RATIOS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternStats {
    pub pattern: MissingPattern,
    pub sequences: usize,
    pub total_frames: usize,
    pub missing_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioStats {
    pub ratio: u32,
    pub sequences: usize,
    pub total_frames: usize,
    pub missing_frames: usize,
}

/// Dataset-level attribute summary: the usual benchmark table columns
/// (sequence count, total/average/max frames, total/average/max missing
/// frames) plus per-pattern and per-ratio breakdowns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub num_sequences: usize,
    pub total_frames: usize,
    pub avg_frames: f64,
    pub max_frames: usize,
    pub total_missing_frames: usize,
    pub avg_missing_frames: f64,
    pub max_missing_frames: usize,
    pub per_pattern: Vec<PatternStats>,
    pub per_ratio: Vec<RatioStats>,
}

/// Pure function of the schedules; recomputation is idempotent.
pub fn dataset_stats(schedules: &[MissingSchedule]) -> DatasetStats {
    let num = schedules.len();
    let total_frames: usize = schedules.iter().map(MissingSchedule::len).sum();
    let max_frames = schedules.iter().map(MissingSchedule::len).max().unwrap_or(0);
    let missing: Vec<usize> = schedules.iter().map(MissingSchedule::missing_count).collect();
    let total_missing: usize = missing.iter().sum();
    let max_missing = missing.iter().copied().max().unwrap_or(0);

    let per_pattern = PATTERNS
        .iter()
        .map(|&pattern| {
            let members = schedules.iter().filter(|s| s.pattern == pattern);
            let (mut n, mut frames, mut miss) = (0, 0, 0);
            for s in members {
                n += 1;
                frames += s.len();
                miss += s.missing_count();
            }
            PatternStats { pattern, sequences: n, total_frames: frames, missing_frames: miss }
        })
        .collect();

    let per_ratio = RATIOS
        .iter()
        .map(|&ratio| {
            let members = schedules.iter().filter(|s| s.ratio == ratio);
            let (mut n, mut frames, mut miss) = (0, 0, 0);
            for s in members {
                n += 1;
                frames += s.len();
                miss += s.missing_count();
            }
            RatioStats { ratio, sequences: n, total_frames: frames, missing_frames: miss }
        })
        .collect();

    DatasetStats {
        num_sequences: num,
        total_frames,
        avg_frames: if num == 0 { 0.0 } else { total_frames as f64 / num as f64 },
        max_frames,
        total_missing_frames: total_missing,
        avg_missing_frames: if num == 0 { 0.0 } else { total_missing as f64 / num as f64 },
        max_missing_frames: max_missing,
        per_pattern,
        per_ratio,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{build_missing_dataset, SequenceMeta};

    #[test]
    fn empty_input_gives_all_zero_stats() {
        let stats = dataset_stats(&[]);
        assert_eq!(stats.num_sequences, 0);
        assert_eq!(stats.total_frames, 0);
        assert_eq!(stats.total_missing_frames, 0);
        assert_eq!(stats.avg_missing_frames, 0.0);
        assert!(stats.per_pattern.iter().all(|p| p.sequences == 0));
    }

    #[test]
    fn recomputation_is_idempotent() {
        let seqs: Vec<SequenceMeta> = (0..12)
            .map(|i| SequenceMeta::new(format!("s{i}"), 40 + i * 3).unwrap())
            .collect();
        let (schedules, _) = build_missing_dataset(&seqs, 11).unwrap();
        let a = dataset_stats(&schedules);
        let b = dataset_stats(&schedules);
        assert_eq!(a, b);
    }

    #[test]
    fn higher_ratios_miss_more_for_balanced_groups() {
        // many same-length sequences: per-ratio budgets are proportional
        let seqs: Vec<SequenceMeta> = (0..45)
            .map(|i| SequenceMeta::new(format!("s{i:02}"), 100).unwrap())
            .collect();
        let (schedules, _) = build_missing_dataset(&seqs, 3).unwrap();
        let stats = dataset_stats(&schedules);
        let by_ratio: Vec<usize> = stats.per_ratio.iter().map(|r| r.missing_frames).collect();
        assert!(by_ratio[2] > by_ratio[1] && by_ratio[1] > by_ratio[0], "{by_ratio:?}");
    }
}
