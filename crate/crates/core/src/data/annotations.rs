use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, DataError};

/// `[start, end]` in seconds.
pub type Window = [f64; 2];

/// One query over one video, stored as a single JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub qid: String,
    pub vid: String,
    pub query_text: String,
    /// Seconds.
    pub duration: f64,
    /// Seconds per clip.
    pub clip_len: f64,
    pub relevant_windows: Vec<Window>,
    /// Per-clip relevance in `[0, 1]`; absent for moment-only sets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saliency: Option<Vec<f64>>,
    #[serde(default)]
    pub relevant_clip_ids: Vec<usize>,
}

/// Number of clips covering `duration`, i.e. `ceil(duration / clip_len)`.
pub fn n_clips(duration: f64, clip_len: f64) -> usize {
    let ratio = duration / clip_len;
    let rounded = ratio.round();
    if (ratio - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        ratio.ceil() as usize
    }
}

impl Annotation {
    pub fn n_clips(&self) -> usize {
        n_clips(self.duration, self.clip_len)
    }

    /// Checks every invariant; nothing is clamped or repaired.
    pub fn validate(&self) -> Result<(), String> {
        if !(self.clip_len > 0.0 && self.clip_len.is_finite()) {
            return Err(format!("clip_len must be positive, got {}", self.clip_len));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(format!("duration must be positive, got {}", self.duration));
        }
        if self.relevant_windows.is_empty() {
            return Err("no relevant windows".into());
        }
        for &[start, end] in &self.relevant_windows {
            if !(start.is_finite() && end.is_finite()) {
                return Err("non-finite window bound".into());
            }
            if start >= end {
                return Err(format!("window [{start}, {end}]: start ≥ end"));
            }
            if start < 0.0 || end > self.duration {
                return Err(format!(
                    "window [{start}, {end}] outside [0, {}]",
                    self.duration
                ));
            }
        }
        let clips = self.n_clips();
        if let Some(s) = &self.saliency {
            if s.len() != clips {
                return Err(format!(
                    "saliency has {} entries, expected {clips}",
                    s.len()
                ));
            }
            if let Some(bad) = s.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(format!("saliency value {bad} outside [0, 1]"));
            }
        }
        if let Some(&bad) = self.relevant_clip_ids.iter().find(|&&c| c >= clips) {
            return Err(format!("relevant clip id {bad} ≥ clip count {clips}"));
        }
        Ok(())
    }
}

pub fn parse_annotations(text: &str) -> Result<Vec<Annotation>, DataError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let ann: Annotation = serde_json::from_str(line).map_err(|e| DataError::Annotation {
            line: line_no,
            message: e.to_string(),
        })?;
        ann.validate().map_err(|message| DataError::Annotation {
            line: line_no,
            message,
        })?;
        out.push(ann);
    }
    Ok(out)
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<Annotation>, DataError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_annotations(&text)
}

pub fn write_annotations(path: impl AsRef<Path>, anns: &[Annotation]) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for a in anns {
        serde_json::to_writer(&mut buf, a)?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))
}
