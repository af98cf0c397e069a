use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{MissingSchedule, SequenceMeta};

/// On-disk schedule container: one JSON document per dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleFile {
    pub format_version: u32,
    pub global_seed: u64,
    pub sequences: Vec<MissingSchedule>,
}

impl ScheduleFile {
    pub fn new(global_seed: u64, sequences: Vec<MissingSchedule>) -> Self {
        ScheduleFile {
            format_version: crate::FORMAT_VERSION,
            global_seed,
            sequences,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ScheduleFile = serde_json::from_str(text)?;
        if file.format_version != crate::FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported schedule format_version {}",
                file.format_version
            )));
        }
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Compact per-sequence CSV: `frame_index,rgb,tir` with 0/1 flags.
pub fn schedule_csv(schedule: &MissingSchedule) -> String {
    let mut out = String::from("frame_index,rgb,tir\n");
    for (i, &(rgb, tir)) in schedule.frames.iter().enumerate() {
        let _ = writeln!(out, "{},{},{}", i, u8::from(rgb), u8::from(tir));
    }
    out
}

/// Parses sequence metadata: UTF-8 text, one `name,frame_count` record
/// per line. Blank lines are skipped; malformed lines report their line
/// number. `path` is used only for error messages.
pub fn parse_metadata_str(text: &str, path: &str) -> Result<Vec<SequenceMeta>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let Some((name, count)) = line.rsplit_once(',') else {
            return Err(Error::Parse {
                path: path.to_string(),
                line: lineno,
                message: format!("expected `name,frame_count`, got `{raw}`"),
            });
        };
        let name = name.trim();
        if name.is_empty() {
            return Err(Error::Parse {
                path: path.to_string(),
                line: lineno,
                message: "empty sequence name".to_string(),
            });
        }
        let length: usize = count.trim().parse().map_err(|_| Error::Parse {
            path: path.to_string(),
            line: lineno,
            message: format!("invalid frame count `{}`", count.trim()),
        })?;
        match SequenceMeta::new(name, length) {
            Ok(meta) => out.push(meta),
            Err(e) => {
                return Err(Error::Parse {
                    path: path.to_string(),
                    line: lineno,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

pub fn parse_metadata(path: &Path) -> Result<Vec<SequenceMeta>> {
    let text = std::fs::read_to_string(path)?;
    parse_metadata_str(&text, &path.display().to_string())
}
