//! Line-delimited landmark sequence files (`.lmk.jsonl`).
//!
//! One JSON object per line: `{"label": ..., "frames": [{t_ms, handedness,
//! loc: [wx, wy, s], pts: [[x, y, z] x 21]}]}`. Coordinates are written with
//! nine significant digits.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FrameLandmarks, HandLocation, Handedness, LandmarkSequence, NUM_LANDMARKS};
use crate::error::{Error, Result};

/// Wire form of a single frame, shared by files, the HTTP API and the stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub t_ms: i64,
    pub handedness: Handedness,
    pub loc: [f64; 3],
    pub pts: Vec<[f64; 3]>,
}

impl FrameRecord {
    pub fn from_frame(frame: &FrameLandmarks) -> Self {
        let loc = &frame.location;
        FrameRecord {
            t_ms: frame.timestamp_ms,
            handedness: frame.handedness,
            loc: [round9(loc.wrist_x), round9(loc.wrist_y), round9(loc.hand_scale)],
            pts: frame
                .points
                .iter()
                .map(|p| [round9(p[0]), round9(p[1]), round9(p[2])])
                .collect(),
        }
    }

    /// Converts and validates; errors name the violated invariant.
    pub fn to_frame(&self) -> Result<FrameLandmarks> {
        if self.pts.len() != NUM_LANDMARKS {
            return Err(Error::InvalidFrame(format!(
                "expected {NUM_LANDMARKS} points, found {}",
                self.pts.len()
            )));
        }
        let mut points = [[0.0; 3]; NUM_LANDMARKS];
        points.copy_from_slice(&self.pts);
        let frame = FrameLandmarks {
            points,
            handedness: self.handedness,
            location: HandLocation {
                wrist_x: self.loc[0],
                wrist_y: self.loc[1],
                hand_scale: self.loc[2],
            },
            timestamp_ms: self.t_ms,
        };
        frame.validate()?;
        Ok(frame)
    }
}

#[derive(Serialize, Deserialize)]
struct SequenceRecord {
    label: Option<String>,
    frames: Vec<FrameRecord>,
}

/// Rounds to nine significant decimal digits.
fn round9(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().unwrap_or(x)
}

pub fn write_sequences(path: impl AsRef<Path>, seqs: &[LandmarkSequence]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_sequences_to(&mut w, seqs)?;
    w.flush()?;
    Ok(())
}

pub fn write_sequences_to<W: Write>(mut w: W, seqs: &[LandmarkSequence]) -> Result<()> {
    for seq in seqs {
        let rec = SequenceRecord {
            label: seq.label.clone(),
            frames: seq.frames.iter().map(FrameRecord::from_frame).collect(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_sequences(path: impl AsRef<Path>) -> Result<Vec<LandmarkSequence>> {
    let path = path.as_ref();
    let file = File::open(path)?;
    read_sequences_from(BufReader::new(file), path)
}

/// `origin` is only used to label parse errors.
pub fn read_sequences_from<R: BufRead>(reader: R, origin: &Path) -> Result<Vec<LandmarkSequence>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| Error::Parse {
            path: origin.to_path_buf(),
            line: idx + 1,
            reason,
        };
        let rec: SequenceRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let mut frames = Vec::with_capacity(rec.frames.len());
        for (i, fr) in rec.frames.iter().enumerate() {
            frames.push(fr.to_frame().map_err(|e| parse_err(format!("frame {i}: {e}")))?);
        }
        let seq = LandmarkSequence::new(frames, rec.label);
        seq.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(seq);
    }
    Ok(out)
}
