use std::collections::HashSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{fnv1a64, rng_from_seed};
use crate::sim::{
    generate_schedule, MissingPattern, MissingSchedule, SequenceMeta, PATTERNS, RATIOS,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentEntry {
    pub name: String,
    pub pattern: MissingPattern,
    pub ratio: u32,
}

/// The (pattern, ratio) assignment for every sequence of a dataset,
/// together with the seed that produced it. Entries are kept in sorted
/// name order so serialization is stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetAssignment {
    pub global_seed: u64,
    pub entries: Vec<AssignmentEntry>,
}

impl DatasetAssignment {
    pub fn lookup(&self, name: &str) -> Option<&AssignmentEntry> {
        self.entries
            .binary_search_by(|e| e.name.as_str().cmp(name))
            .ok()
            .map(|i| &self.entries[i])
    }
}

/// Deals sequences into the five pattern groups and each group into the
/// three ratio subgroups.
///
/// Sequences are sorted by descending frame count (ties broken by name),
/// then consecutive chunks of five are permuted so each pattern group
/// receives one; a trailing partial chunk goes to distinct randomly
/// chosen groups. Each group is then dealt over the three ratios the same
/// way with chunks of three. Group sizes at both levels differ by at most
/// one.
pub fn assign_patterns(sequences: &[SequenceMeta], seed: u64) -> Result<DatasetAssignment> {
    let mut seen = HashSet::new();
    for s in sequences {
        if !seen.insert(s.name.as_str()) {
            return Err(Error::Data(format!("duplicate sequence name `{}`", s.name)));
        }
    }

    let mut order: Vec<&SequenceMeta> = sequences.iter().collect();
    order.sort_by(|a, b| b.length.cmp(&a.length).then_with(|| a.name.cmp(&b.name)));

    let mut rng = rng_from_seed(seed);
    let mut groups: [Vec<&SequenceMeta>; 5] = Default::default();
    for chunk in order.chunks(PATTERNS.len()) {
        let mut slots: Vec<usize> = (0..PATTERNS.len()).collect();
        slots.shuffle(&mut rng);
        for (seq, &slot) in chunk.iter().zip(slots.iter()) {
            groups[slot].push(seq);
        }
    }

    let mut entries = Vec::with_capacity(sequences.len());
    for (gi, group) in groups.iter().enumerate() {
        // group members are already in descending length order
        for chunk in group.chunks(RATIOS.len()) {
            let mut slots: Vec<usize> = (0..RATIOS.len()).collect();
            slots.shuffle(&mut rng);
            for (seq, &slot) in chunk.iter().zip(slots.iter()) {
                entries.push(AssignmentEntry {
                    name: seq.name.clone(),
                    pattern: PATTERNS[gi],
                    ratio: RATIOS[slot],
                });
            }
        }
    }

    entries.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(DatasetAssignment { global_seed: seed, entries })
}

/// Per-sequence schedule seed: `global_seed XOR fnv1a64(name)`, stable
/// across runs and insertion orders.
pub fn sequence_seed(global_seed: u64, name: &str) -> u64 {
    global_seed ^ fnv1a64(name.as_bytes())
}

/// Runs the full construction: assignment, then one schedule per sequence
/// with its seed derived by [`sequence_seed`]. Schedules come back in
/// sorted name order.
pub fn build_missing_dataset(
    sequences: &[SequenceMeta],
    global_seed: u64,
) -> Result<(Vec<MissingSchedule>, DatasetAssignment)> {
    let assignment = assign_patterns(sequences, global_seed)?;
    let by_name: std::collections::BTreeMap<&str, &SequenceMeta> =
        sequences.iter().map(|s| (s.name.as_str(), s)).collect();

    let mut schedules = Vec::with_capacity(sequences.len());
    for entry in &assignment.entries {
        let meta = by_name[entry.name.as_str()];
        let seq_seed = sequence_seed(global_seed, &entry.name);
        let schedule = generate_schedule(meta, entry.pattern, entry.ratio, seq_seed)?;
        schedules.push(schedule);
    }
    Ok((schedules, assignment))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metas(lengths: &[usize]) -> Vec<SequenceMeta> {
        lengths
            .iter()
            .enumerate()
            .map(|(i, &l)| SequenceMeta::new(format!("seq{i:03}"), l).unwrap())
            .collect()
    }

    fn group_sizes(assignment: &DatasetAssignment) -> Vec<usize> {
        PATTERNS
            .iter()
            .map(|p| assignment.entries.iter().filter(|e| e.pattern == *p).count())
            .collect()
    }

    #[test]
    fn five_sequences_cover_each_pattern_once() {
        let seqs = metas(&[50, 40, 30, 20, 10]);
        let a = assign_patterns(&seqs, 1).unwrap();
        assert_eq!(group_sizes(&a), vec![1, 1, 1, 1, 1]);
    }

    #[test]
    fn seven_sequences_give_sizes_two_two_one_one_one() {
        let seqs = metas(&[70, 60, 50, 40, 30, 20, 10]);
        let a = assign_patterns(&seqs, 3).unwrap();
        let mut sizes = group_sizes(&a);
        sizes.sort_unstable_by(|x, y| y.cmp(x));
        assert_eq!(sizes, vec![2, 2, 1, 1, 1]);
    }

    #[test]
    fn balance_holds_at_both_levels() {
        let lengths: Vec<usize> = (0..37).map(|i| 20 + 7 * i).collect();
        let seqs = metas(&lengths);
        let a = assign_patterns(&seqs, 99).unwrap();

        let sizes = group_sizes(&a);
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);

        for p in PATTERNS {
            let ratio_sizes: Vec<usize> = RATIOS
                .iter()
                .map(|r| {
                    a.entries
                        .iter()
                        .filter(|e| e.pattern == p && e.ratio == *r)
                        .count()
                })
                .collect();
            let max = ratio_sizes.iter().max().unwrap();
            let min = ratio_sizes.iter().min().unwrap();
            assert!(max - min <= 1, "pattern {p}: {ratio_sizes:?}");
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut seqs = metas(&[10, 20]);
        seqs[1].name = seqs[0].name.clone();
        assert!(matches!(assign_patterns(&seqs, 0), Err(Error::Data(_))));
    }

    #[test]
    fn deterministic_under_seed_and_input_order() {
        let seqs = metas(&[31, 57, 12, 88, 45, 23, 67]);
        let a = assign_patterns(&seqs, 42).unwrap();
        let b = assign_patterns(&seqs, 42).unwrap();
        assert_eq!(a, b);

        let mut reversed = seqs.clone();
        reversed.reverse();
        let c = assign_patterns(&reversed, 42).unwrap();
        assert_eq!(a, c, "assignment must not depend on input order");
    }

    #[test]
    fn fifteen_equal_sequences_fill_the_grid() {
        let seqs = metas(&[100; 15]);
        let (schedules, assignment) = build_missing_dataset(&seqs, 5).unwrap();
        assert_eq!(schedules.len(), 15);
        for p in PATTERNS {
            for r in RATIOS {
                let n = assignment
                    .entries
                    .iter()
                    .filter(|e| e.pattern == p && e.ratio == r)
                    .count();
                assert_eq!(n, 1, "cell ({p}, {r}) occupied {n} times");
            }
        }
        for s in &schedules {
            s.validate().unwrap();
        }
    }
}
