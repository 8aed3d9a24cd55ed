//! Tusimple-style JSON-lines annotations.
//!
//! One JSON object per line with the fields `raw_file`, `h_samples` and
//! `lanes`; prediction files add a per-lane `scores` array. A lane holds one
//! x per `h_samples` entry, with `-2` for rows the lane does not cover.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-not-covered sentinel.
pub const MISSING: f64 = -2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub raw_file: String,
    pub h_samples: Vec<f64>,
    pub lanes: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

impl DatasetRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.h_samples.windows(2).any(|w| w[1] <= w[0]) {
            return Err("h_samples must be strictly increasing".into());
        }
        for (k, lane) in self.lanes.iter().enumerate() {
            if lane.len() != self.h_samples.len() {
                return Err(format!("lane {k} has {} entries, h_samples has {}", lane.len(), self.h_samples.len()));
            }
            if let Some(x) = lane.iter().find(|&&x| !x.is_finite() || (x < 0.0 && x != MISSING)) {
                return Err(format!("lane {k}: invalid x {x}"));
            }
            let covered = lane.iter().filter(|&&x| x != MISSING).count();
            if covered < 2 {
                return Err(format!("lane {k} covers {covered} row(s), need 2"));
            }
        }
        if let Some(scores) = &self.scores {
            if scores.len() != self.lanes.len() {
                return Err(format!("{} scores for {} lanes", scores.len(), self.lanes.len()));
            }
        }
        Ok(())
    }

    /// Covered `(x, y)` points of one lane.
    pub fn lane_points(&self, k: usize) -> Vec<(f64, f64)> {
        self.lanes[k]
            .iter()
            .zip(&self.h_samples)
            .filter(|(&x, _)| x != MISSING)
            .map(|(&x, &y)| (x, y))
            .collect()
    }

    pub fn lane_score(&self, k: usize) -> f64 {
        self.scores.as_ref().map_or(1.0, |s| s[k])
    }
}

/// Samples a dense polyline at `h_samples`, `MISSING` outside its y-span or
/// outside `[0, width]`.
pub fn lane_from_polyline(points: &[(f64, f64)], h_samples: &[f64], width: f64) -> Vec<f64> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.1.total_cmp(&b.1));
    h_samples
        .iter()
        .map(|&y| {
            for w in pts.windows(2) {
                let ((x0, y0), (x1, y1)) = (w[0], w[1]);
                if y >= y0 && y <= y1 && y1 > y0 {
                    let x = x0 + (x1 - x0) * (y - y0) / (y1 - y0);
                    return if (0.0..=width).contains(&x) { x } else { MISSING };
                }
            }
            MISSING
        })
        .collect()
}

pub fn write_dataset(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Dataset {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let rec: DatasetRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        rec.validate().map_err(err)?;
        out.push(rec);
    }
    Ok(out)
}
