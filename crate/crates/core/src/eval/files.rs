use crate::error::{Error, Result};
use crate::eval::BoundingBox;

/// Parses a box-per-line file: `x,y,w,h` with floats allowed. Tabs or
/// spaces are tolerated as separators since dataset dumps vary.
pub fn parse_box_file(text: &str, path: &str) -> Result<Vec<BoundingBox>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = if line.contains(',') {
            line.split(',').map(str::trim).collect()
        } else {
            line.split_whitespace().collect()
        };
        if fields.len() != 4 {
            return Err(Error::Parse {
                path: path.to_string(),
                line: idx + 1,
                message: format!("expected 4 fields `x,y,w,h`, got {}", fields.len()),
            });
        }
        let mut vals = [0.0f64; 4];
        for (slot, field) in vals.iter_mut().zip(&fields) {
            *slot = field.parse().map_err(|_| Error::Parse {
                path: path.to_string(),
                line: idx + 1,
                message: format!("invalid number `{field}`"),
            })?;
        }
        out.push(BoundingBox::new(vals[0], vals[1], vals[2], vals[3]));
    }
    Ok(out)
}
