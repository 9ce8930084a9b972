//! Hand landmark frames, normalization and the MNAE accuracy metric.
//!
//! Landmark indices follow the 21-point hand convention: 0 is the wrist,
//! 1-4 the thumb (CMC, MCP, IP, tip), then four points per finger from the
//! MCP joint outwards for index (5-8), middle (9-12), ring (13-16) and
//! pinky (17-20).

mod io;

pub use io::{read_sequences, read_sequences_from, write_sequences, write_sequences_to, FrameRecord};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_LANDMARKS: usize = 21;
/// Length of a flattened, normalized frame (x, y, z per landmark).
pub const NORMALIZED_LEN: usize = NUM_LANDMARKS * 3;
pub const WRIST: usize = 0;
pub const MIDDLE_MCP: usize = 9;
pub const INDEX_MCP: usize = 5;
pub const PINKY_MCP: usize = 17;

pub type Point3 = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Handedness {
    Left,
    Right,
}

impl Handedness {
    /// Signed scalar fed to the embedder: -1 for left, +1 for right.
    pub fn sign(self) -> f64 {
        match self {
            Handedness::Left => -1.0,
            Handedness::Right => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Handedness::Left => "left",
            Handedness::Right => "right",
        }
    }
}

impl std::str::FromStr for Handedness {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Handedness::Left),
            "right" => Ok(Handedness::Right),
            other => Err(Error::InvalidFrame(format!("unknown handedness {other:?}"))),
        }
    }
}

/// Where the hand sits in the image, in image-normalized units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HandLocation {
    pub wrist_x: f64,
    pub wrist_y: f64,
    pub hand_scale: f64,
}

/// One detected hand in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLandmarks {
    pub points: [Point3; NUM_LANDMARKS],
    pub handedness: Handedness,
    pub location: HandLocation,
    pub timestamp_ms: i64,
}

impl FrameLandmarks {
    /// Builds a frame whose location is derived from the points themselves.
    pub fn from_points(points: [Point3; NUM_LANDMARKS], handedness: Handedness, timestamp_ms: i64) -> Self {
        let hand_scale = distance(&points[WRIST], &points[MIDDLE_MCP]);
        FrameLandmarks {
            points,
            handedness,
            location: HandLocation {
                wrist_x: points[WRIST][0],
                wrist_y: points[WRIST][1],
                hand_scale,
            },
            timestamp_ms,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(Error::InvalidFrame(format!("landmark {i} has a non-finite coordinate")));
            }
        }
        let loc = &self.location;
        if !(loc.wrist_x.is_finite() && loc.wrist_y.is_finite()) {
            return Err(Error::InvalidFrame("location is not finite".into()));
        }
        if !(loc.hand_scale.is_finite() && loc.hand_scale > 0.0) {
            return Err(Error::InvalidFrame(format!(
                "hand_scale must be positive, got {}",
                loc.hand_scale
            )));
        }
        Ok(())
    }

    /// Wrist to middle-finger MCP distance in the frame's own units.
    pub fn reference_length(&self) -> f64 {
        distance(&self.points[WRIST], &self.points[MIDDLE_MCP])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSequence {
    pub frames: Vec<FrameLandmarks>,
    pub label: Option<String>,
}

impl LandmarkSequence {
    pub fn new(frames: Vec<FrameLandmarks>, label: Option<String>) -> Self {
        LandmarkSequence { frames, label }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Checks every frame plus strict timestamp ordering.
    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::InvalidFrame("sequence has no frames".into()));
        }
        for (i, f) in self.frames.iter().enumerate() {
            f.validate()
                .map_err(|e| Error::InvalidFrame(format!("frame {i}: {e}")))?;
            if i > 0 && f.timestamp_ms <= self.frames[i - 1].timestamp_ms {
                return Err(Error::InvalidFrame(format!(
                    "frame {i}: timestamp {} does not follow {}",
                    f.timestamp_ms,
                    self.frames[i - 1].timestamp_ms
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScaleReference {
    WristToMiddleMcp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationConfig {
    pub scale_reference: ScaleReference,
    pub keep_rotation: bool,
    pub epsilon: f64,
}

impl Default for NormalizationConfig {
    fn default() -> Self {
        NormalizationConfig {
            scale_reference: ScaleReference::WristToMiddleMcp,
            keep_rotation: true,
            epsilon: 1e-6,
        }
    }
}

/// Translates the wrist to the origin and scales so the wrist to
/// middle-MCP distance is one. With `keep_rotation == false` the hand is
/// additionally rotated into a canonical frame (middle MCP on +y, index to
/// pinky MCP direction in the x-y plane).
pub fn normalize_landmarks(frame: &FrameLandmarks, cfg: &NormalizationConfig) -> Result<[f64; NORMALIZED_LEN]> {
    if !(cfg.epsilon > 0.0) {
        return Err(Error::InvalidArgument("normalization epsilon must be positive".into()));
    }
    let ScaleReference::WristToMiddleMcp = cfg.scale_reference;
    let origin = frame.points[WRIST];
    let reference = frame.reference_length();
    if !(reference >= cfg.epsilon) {
        return Err(Error::DegenerateHand {
            distance: reference,
            epsilon: cfg.epsilon,
        });
    }

    let mut local = [[0.0; 3]; NUM_LANDMARKS];
    for (dst, p) in local.iter_mut().zip(frame.points.iter()) {
        for k in 0..3 {
            dst[k] = (p[k] - origin[k]) / reference;
        }
    }

    if !cfg.keep_rotation {
        local = canonical_rotation(&local, cfg.epsilon)?;
    }

    let mut out = [0.0; NORMALIZED_LEN];
    for (i, p) in local.iter().enumerate() {
        out[i * 3..i * 3 + 3].copy_from_slice(p);
    }
    Ok(out)
}

fn canonical_rotation(points: &[Point3; NUM_LANDMARKS], epsilon: f64) -> Result<[Point3; NUM_LANDMARKS]> {
    let up = scale3(&points[MIDDLE_MCP], 1.0 / norm3(&points[MIDDLE_MCP]));
    let across = sub3(&points[INDEX_MCP], &points[PINKY_MCP]);
    let across = sub3(&across, &scale3(&up, dot3(&across, &up)));
    let across_len = norm3(&across);
    if across_len < epsilon {
        return Err(Error::DegenerateHand {
            distance: across_len,
            epsilon,
        });
    }
    let across = scale3(&across, 1.0 / across_len);
    let normal = cross3(&across, &up);

    let mut out = [[0.0; 3]; NUM_LANDMARKS];
    for (dst, p) in out.iter_mut().zip(points.iter()) {
        *dst = [dot3(p, &across), dot3(p, &up), dot3(p, &normal)];
    }
    // Index 9 lies exactly on the up axis.
    out[MIDDLE_MCP] = [0.0, 1.0, 0.0];
    Ok(out)
}

/// Mean normalized absolute error, in percent of the ground-truth hand scale.
///
/// For every frame the Euclidean error of each landmark is divided by the
/// truth frame's wrist to middle-MCP distance; the result is averaged over
/// all landmarks of all frames and multiplied by 100.
pub fn mnae(predicted: &[FrameLandmarks], truth: &[FrameLandmarks]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: predicted.len(),
            right: truth.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::InvalidArgument("mnae needs at least one frame".into()));
    }
    let epsilon = NormalizationConfig::default().epsilon;
    let mut total = 0.0;
    for (p, t) in predicted.iter().zip(truth) {
        let scale = t.reference_length();
        if !(scale >= epsilon) {
            return Err(Error::DegenerateHand {
                distance: scale,
                epsilon,
            });
        }
        let frame_err: f64 = p.points.iter().zip(t.points.iter()).map(|(a, b)| distance(a, b)).sum();
        total += frame_err / scale;
    }
    Ok(100.0 * total / (truth.len() * NUM_LANDMARKS) as f64)
}

pub(crate) fn distance(a: &Point3, b: &Point3) -> f64 {
    norm3(&sub3(a, b))
}

pub(crate) fn sub3(a: &Point3, b: &Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn scale3(a: &Point3, s: f64) -> Point3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub(crate) fn dot3(a: &Point3, b: &Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm3(a: &Point3) -> f64 {
    dot3(a, a).sqrt()
}

pub(crate) fn cross3(a: &Point3, b: &Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}
