use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::metrics::{evaluate_sequence, MetricConfig, MetricCurve, Scalars, SequenceEval};
use crate::eval::BoundingBox;
use crate::sim::{DatasetAssignment, MissingPattern, PATTERNS, RATIOS};

/// Everything needed to evaluate one sequence.
#[derive(Debug, Clone)]
pub struct SequenceData {
    pub name: String,
    pub prediction: Vec<BoundingBox>,
    pub gt_rgb: Vec<BoundingBox>,
    pub gt_tir: Option<Vec<BoundingBox>>,
}

/// Run provenance echoed into the report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub strategy: String,
    pub schedule_file_hash: String,
    pub config_hash: String,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub name: String,
    pub pattern: MissingPattern,
    pub ratio: u32,
    pub frames_scored: usize,
    pub frames_skipped: usize,
    pub scalars: Scalars,
    pub curve_max_scalars: Scalars,
}

/// Mean scalars over the sequences of one subset (pattern or ratio).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetTable {
    pub key: String,
    pub sequences: Vec<String>,
    pub scalars: Scalars,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverallCurves {
    pub precision: MetricCurve,
    pub success: MetricCurve,
    pub norm_precision: MetricCurve,
}

/// The full evaluation report; a pure function of (predictions, ground
/// truths, assignment), serialized with stable field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub metadata: ReportMeta,
    /// Unweighted mean of per-sequence scalars.
    pub overall: Scalars,
    /// Frame-count-weighted mean, exported alongside.
    pub overall_frame_weighted: Scalars,
    /// Whole-curve max realization of the dual-annotation rates.
    pub overall_curve_max: Scalars,
    pub curves: OverallCurves,
    pub per_pattern: Vec<SubsetTable>,
    pub per_ratio: Vec<SubsetTable>,
    pub per_sequence: Vec<SequenceRecord>,
    pub errata: Vec<String>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Flat per-sequence CSV for plotting.
    pub fn per_sequence_csv(&self) -> String {
        let mut out = String::from("sequence,pattern,ratio,frames_scored,frames_skipped,mpr,msr,npr\n");
        for r in &self.per_sequence {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.name, r.pattern, r.ratio, r.frames_scored, r.frames_skipped,
                r.scalars.mpr, r.scalars.msr, r.scalars.npr
            );
        }
        out
    }
}

fn mean_scalars<'a>(items: impl Iterator<Item = &'a Scalars>) -> Scalars {
    let mut acc = Scalars::zero();
    let mut n = 0usize;
    for s in items {
        acc.mpr += s.mpr;
        acc.msr += s.msr;
        acc.npr += s.npr;
        n += 1;
    }
    if n > 0 {
        acc.mpr /= n as f64;
        acc.msr /= n as f64;
        acc.npr /= n as f64;
    }
    acc
}

/// Evaluates a dataset: per-sequence metrics, overall means, and subset
/// tables keyed by the assignment's patterns and ratios.
///
/// Sequences listed in the assignment but absent from `data` (and vice
/// versa) land in the errata and are excluded from all averages.
pub fn evaluate_dataset(
    data: &[SequenceData],
    assignment: &DatasetAssignment,
    config: &MetricConfig,
    metadata: ReportMeta,
) -> Result<EvalReport> {
    let mut errata = Vec::new();
    let mut evaluated: Vec<(SequenceRecord, SequenceEval)> = Vec::new();

    let provided: std::collections::BTreeSet<&str> =
        data.iter().map(|d| d.name.as_str()).collect();
    for entry in &assignment.entries {
        if !provided.contains(entry.name.as_str()) {
            errata.push(format!("sequence `{}`: no result provided", entry.name));
        }
    }

    let mut sorted: Vec<&SequenceData> = data.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    for seq in sorted {
        let Some(entry) = assignment.lookup(&seq.name) else {
            errata.push(format!("sequence `{}`: not in the assignment", seq.name));
            continue;
        };
        let eval = evaluate_sequence(&seq.prediction, &seq.gt_rgb, seq.gt_tir.as_deref(), config)?;
        if eval.frames_skipped > 0 {
            errata.push(format!(
                "sequence `{}`: {} frame(s) skipped for degenerate ground truth",
                seq.name, eval.frames_skipped
            ));
        }
        evaluated.push((
            SequenceRecord {
                name: seq.name.clone(),
                pattern: entry.pattern,
                ratio: entry.ratio,
                frames_scored: eval.frames_scored,
                frames_skipped: eval.frames_skipped,
                scalars: eval.scalars,
                curve_max_scalars: eval.curve_max_scalars,
            },
            eval,
        ));
    }

    let overall = mean_scalars(evaluated.iter().map(|(r, _)| &r.scalars));
    let overall_curve_max = mean_scalars(evaluated.iter().map(|(r, _)| &r.curve_max_scalars));

    let total_frames: usize = evaluated.iter().map(|(r, _)| r.frames_scored).sum();
    let mut overall_frame_weighted = Scalars::zero();
    if total_frames > 0 {
        for (r, _) in &evaluated {
            let w = r.frames_scored as f64 / total_frames as f64;
            overall_frame_weighted.mpr += w * r.scalars.mpr;
            overall_frame_weighted.msr += w * r.scalars.msr;
            overall_frame_weighted.npr += w * r.scalars.npr;
        }
    }

    let curves = if evaluated.is_empty() {
        let empty = |thresholds: Vec<f64>| MetricCurve {
            values: vec![0.0; thresholds.len()],
            thresholds,
        };
        OverallCurves {
            precision: empty(config.precision_thresholds()),
            success: empty(config.success_thresholds()),
            norm_precision: empty(config.npr_thresholds()),
        }
    } else {
        OverallCurves {
            precision: MetricCurve::mean_of(
                &evaluated.iter().map(|(_, e)| &e.precision).collect::<Vec<_>>(),
            ),
            success: MetricCurve::mean_of(
                &evaluated.iter().map(|(_, e)| &e.success).collect::<Vec<_>>(),
            ),
            norm_precision: MetricCurve::mean_of(
                &evaluated.iter().map(|(_, e)| &e.norm_precision).collect::<Vec<_>>(),
            ),
        }
    };

    let per_pattern = PATTERNS
        .iter()
        .map(|&p| {
            let members: Vec<&SequenceRecord> =
                evaluated.iter().map(|(r, _)| r).filter(|r| r.pattern == p).collect();
            SubsetTable {
                key: p.label().to_string(),
                sequences: members.iter().map(|r| r.name.clone()).collect(),
                scalars: mean_scalars(members.iter().map(|r| &r.scalars)),
            }
        })
        .collect();

    let per_ratio = RATIOS
        .iter()
        .map(|&ratio| {
            let members: Vec<&SequenceRecord> =
                evaluated.iter().map(|(r, _)| r).filter(|r| r.ratio == ratio).collect();
            SubsetTable {
                key: format!("{ratio}"),
                sequences: members.iter().map(|r| r.name.clone()).collect(),
                scalars: mean_scalars(members.iter().map(|r| &r.scalars)),
            }
        })
        .collect();

    Ok(EvalReport {
        format_version: crate::FORMAT_VERSION,
        metadata,
        overall,
        overall_frame_weighted,
        overall_curve_max,
        curves,
        per_pattern,
        per_ratio,
        per_sequence: evaluated.into_iter().map(|(r, _)| r).collect(),
        errata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{assign_patterns, SequenceMeta};

    fn b(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(x, y, w, h)
    }

    fn dataset(n: usize) -> (Vec<SequenceData>, DatasetAssignment) {
        let metas: Vec<SequenceMeta> = (0..n)
            .map(|i| SequenceMeta::new(format!("seq{i:02}"), 10 + i).unwrap())
            .collect();
        let assignment = assign_patterns(&metas, 99).unwrap();
        let data = metas
            .iter()
            .map(|m| {
                let gt: Vec<BoundingBox> =
                    (0..m.length).map(|f| b(f as f64, 2.0, 8.0, 8.0)).collect();
                let pred: Vec<BoundingBox> =
                    (0..m.length).map(|f| b(f as f64 + 1.0, 2.5, 8.0, 8.0)).collect();
                SequenceData {
                    name: m.name.clone(),
                    prediction: pred,
                    gt_rgb: gt,
                    gt_tir: None,
                }
            })
            .collect();
        (data, assignment)
    }

    #[test]
    fn single_sequence_overall_equals_its_scalars() {
        let (data, assignment) = dataset(1);
        let report = evaluate_dataset(&data, &assignment, &MetricConfig::default(), ReportMeta::default()).unwrap();
        assert_eq!(report.per_sequence.len(), 1);
        assert_eq!(report.overall, report.per_sequence[0].scalars);
    }

    #[test]
    fn pattern_subsets_partition_the_dataset() {
        let (data, assignment) = dataset(13);
        let report = evaluate_dataset(&data, &assignment, &MetricConfig::default(), ReportMeta::default()).unwrap();
        let total: usize = report.per_pattern.iter().map(|t| t.sequences.len()).sum();
        assert_eq!(total, 13);
        let total_ratio: usize = report.per_ratio.iter().map(|t| t.sequences.len()).sum();
        assert_eq!(total_ratio, 13);
        assert!(report.errata.is_empty());
    }

    #[test]
    fn missing_sequence_goes_to_errata_and_out_of_averages() {
        let (mut data, assignment) = dataset(6);
        let dropped = data.pop().unwrap();
        let report = evaluate_dataset(&data, &assignment, &MetricConfig::default(), ReportMeta::default()).unwrap();
        assert_eq!(report.per_sequence.len(), 5);
        assert!(report.errata.iter().any(|e| e.contains(&dropped.name)));
    }

    #[test]
    fn report_json_is_deterministic() {
        let (data, assignment) = dataset(4);
        let r1 = evaluate_dataset(&data, &assignment, &MetricConfig::default(), ReportMeta::default()).unwrap();
        let r2 = evaluate_dataset(&data, &assignment, &MetricConfig::default(), ReportMeta::default()).unwrap();
        assert_eq!(r1.to_json().unwrap(), r2.to_json().unwrap());
    }
}
