//! Procedural hand kinematics: a 21-joint skeleton posed by finger flexion
//! angles, projected into image-normalized coordinates.
//!
//! The canonical hand lies in the x-y plane with fingers along +y and the
//! thumb on the +x side; flexion curls fingers towards -z. Left hands are the
//! x-mirror of right hands before projection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::landmark::{FrameLandmarks, Handedness, LandmarkSequence, Point3, NUM_LANDMARKS};

pub const NUM_BONES: usize = 20;
/// 15 flexion angles (MCP, PIP, DIP per finger, thumb first) + thumb abduction + thumb rotation.
pub const NUM_JOINT_ANGLES: usize = 17;
pub const MAX_FLEXION: f64 = 1.9;
const THUMB_ABDUCTION: usize = 15;
const THUMB_ROTATION: usize = 16;
const MAX_THUMB_SWING: f64 = 1.9;

pub const BACKGROUND: &str = "background";

/// Bone lengths in landmark order: bone `i` ends at landmark `i + 1`.
/// The middle finger chain (bones 8..12) sums to one.
pub const CANONICAL_BONES: [f64; NUM_BONES] = [
    0.16, 0.22, 0.17, 0.14, // thumb
    0.40, 0.26, 0.16, 0.11, // index
    0.40, 0.28, 0.19, 0.13, // middle
    0.38, 0.25, 0.17, 0.12, // ring
    0.35, 0.19, 0.12, 0.10, // pinky
];

/// Parent landmark of every non-wrist landmark.
pub const PARENT: [usize; NUM_LANDMARKS] = [0, 0, 1, 2, 3, 0, 5, 6, 7, 0, 9, 10, 11, 0, 13, 14, 15, 0, 17, 18, 19];

// Metacarpal and finger base directions, radians from +y towards +x.
const METACARPAL_ANGLE: [f64; 4] = [0.22, 0.0, -0.2, -0.38];
const FINGER_ANGLE: [f64; 4] = [0.10, 0.0, -0.10, -0.20];
const THUMB_CMC_ANGLE: f64 = 0.9;
const THUMB_BASE_ANGLE: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseKind {
    Letter,
    Gesture,
    Background,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandPoseSpec {
    pub name: String,
    pub kind: PoseKind,
    pub joint_angles: [f64; NUM_JOINT_ANGLES],
    /// Euler angles (x, y, z), applied as Rz·Ry·Rx about the wrist.
    pub global_rotation: [f64; 3],
    pub bone_lengths: [f64; NUM_BONES],
}

impl HandPoseSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidPose {
            name: self.name.clone(),
            reason,
        };
        for (i, a) in self.joint_angles[..15].iter().enumerate() {
            if !(0.0..=MAX_FLEXION).contains(a) {
                return Err(bad(format!("flexion angle {i} = {a} outside [0, {MAX_FLEXION}]")));
            }
        }
        for i in [THUMB_ABDUCTION, THUMB_ROTATION] {
            let a = self.joint_angles[i];
            if !(a.abs() <= MAX_THUMB_SWING) {
                return Err(bad(format!("thumb angle {i} = {a} outside ±{MAX_THUMB_SWING}")));
            }
        }
        if !self.global_rotation.iter().all(|r| r.is_finite()) {
            return Err(bad("non-finite global rotation".into()));
        }
        if let Some(l) = self.bone_lengths.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return Err(bad(format!("bone length {l} must be positive")));
        }
        Ok(())
    }

    /// Joint-space blend `(1 - t)·self + t·other`, keeping `self`'s name and kind.
    pub fn interpolate(&self, other: &HandPoseSpec, t: f64) -> HandPoseSpec {
        let mut out = self.clone();
        for i in 0..NUM_JOINT_ANGLES {
            out.joint_angles[i] = (1.0 - t) * self.joint_angles[i] + t * other.joint_angles[i];
        }
        for i in 0..3 {
            out.global_rotation[i] = (1.0 - t) * self.global_rotation[i] + t * other.global_rotation[i];
        }
        for i in 0..NUM_BONES {
            out.bone_lengths[i] = (1.0 - t) * self.bone_lengths[i] + t * other.bone_lengths[i];
        }
        out
    }

    /// Wrist-relative 3D joint positions in the canonical (right-hand) frame.
    pub fn forward_kinematics(&self) -> [Point3; NUM_LANDMARKS] {
        let a = &self.joint_angles;
        let bones = &self.bone_lengths;
        let mut pts = [[0.0; 3]; NUM_LANDMARKS];
        let toward_palm = [0.0, 0.0, -1.0];

        // Thumb: fixed CMC offset, then a chain whose flex plane tilts across
        // the palm with the rotation angle.
        pts[1] = scale_add(&[0.0; 3], &planar(THUMB_CMC_ANGLE), bones[0]);
        let base = THUMB_BASE_ANGLE + a[THUMB_ABDUCTION];
        let u = planar(base);
        let across = [-base.cos(), base.sin(), 0.0];
        let (sr, cr) = a[THUMB_ROTATION].sin_cos();
        let m = [
            cr * toward_palm[0] + sr * across[0],
            cr * toward_palm[1] + sr * across[1],
            cr * toward_palm[2] + sr * across[2],
        ];
        chain(&mut pts, 1, &u, &m, &a[0..3], &bones[1..4]);

        for f in 0..4 {
            let mcp = 5 + 4 * f;
            pts[mcp] = scale_add(&[0.0; 3], &planar(METACARPAL_ANGLE[f]), bones[4 + 4 * f]);
            let u = planar(FINGER_ANGLE[f]);
            chain(
                &mut pts,
                mcp,
                &u,
                &toward_palm,
                &a[3 + 3 * f..6 + 3 * f],
                &bones[5 + 4 * f..8 + 4 * f],
            );
        }

        let rot = rotation_matrix(&self.global_rotation);
        for p in pts.iter_mut() {
            *p = apply(&rot, p);
        }
        pts
    }
}

fn planar(angle: f64) -> Point3 {
    [angle.sin(), angle.cos(), 0.0]
}

fn scale_add(p: &Point3, d: &Point3, s: f64) -> Point3 {
    [p[0] + s * d[0], p[1] + s * d[1], p[2] + s * d[2]]
}

/// Lays out three phalanges from `start` with cumulative flexion.
fn chain(pts: &mut [Point3; NUM_LANDMARKS], start: usize, u: &Point3, m: &Point3, flex: &[f64], bones: &[f64]) {
    let mut phi = 0.0;
    for k in 0..3 {
        phi += flex[k];
        let (s, c) = phi.sin_cos();
        let d = [c * u[0] + s * m[0], c * u[1] + s * m[1], c * u[2] + s * m[2]];
        pts[start + k + 1] = scale_add(&pts[start + k], &d, bones[k]);
    }
}

fn rotation_matrix(euler: &[f64; 3]) -> [[f64; 3]; 3] {
    let (sx, cx) = euler[0].sin_cos();
    let (sy, cy) = euler[1].sin_cos();
    let (sz, cz) = euler[2].sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    mat_mul(&rz, &mat_mul(&ry, &rx))
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn apply(m: &[[f64; 3]; 3], p: &Point3) -> Point3 {
    [
        m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2],
        m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2],
        m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2],
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub seed: u64,
    /// Per-coordinate Gaussian jitter in units of the hand's reference length.
    pub noise_sigma: f64,
    pub fps: u32,
    pub transition_frames: u32,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            seed: 0,
            noise_sigma: 0.01,
            fps: 12,
            transition_frames: 4,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if !(1..=1000).contains(&self.fps) {
            return Err(Error::InvalidArgument(format!(
                "fps must be in 1..=1000, got {}",
                self.fps
            )));
        }
        Ok(())
    }

    fn frame_ms(&self, index: u64) -> i64 {
        (index * 1000 / self.fps as u64) as i64
    }
}

/// Image placement of the wrist and the size of the canonical skeleton.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub center_x: f64,
    pub center_y: f64,
    pub scale: f64,
}

impl Default for Placement {
    fn default() -> Self {
        Placement {
            center_x: 0.5,
            center_y: 0.65,
            scale: 0.3,
        }
    }
}

/// Independent RNG stream per (seed, purpose, index).
fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(index as u128 * 1024);
    rng
}

const STREAM_FRAME_NOISE: u64 = 1;
const STREAM_SEQUENCE: u64 = 2;
const STREAM_SAMPLE: u64 = 3;

/// Renders `pose` at `placement`, adding Gaussian noise drawn from `rng`.
pub fn render_at(
    pose: &HandPoseSpec,
    handedness: Handedness,
    placement: Placement,
    noise_sigma: f64,
    rng: &mut impl Rng,
    timestamp_ms: i64,
) -> Result<FrameLandmarks> {
    pose.validate()?;
    let local = pose.forward_kinematics();
    let mirror = match handedness {
        Handedness::Right => 1.0,
        Handedness::Left => -1.0,
    };
    let s = placement.scale;
    let noise = if noise_sigma > 0.0 {
        let reference = s * pose.bone_lengths[8];
        Some(Normal::new(0.0, noise_sigma * reference).map_err(|e| Error::InvalidArgument(e.to_string()))?)
    } else {
        None
    };
    let mut points = [[0.0; 3]; NUM_LANDMARKS];
    for (dst, p) in points.iter_mut().zip(local.iter()) {
        *dst = [
            placement.center_x + s * (mirror * p[0]),
            placement.center_y - s * p[1],
            s * p[2],
        ];
        if let Some(n) = &noise {
            for c in dst.iter_mut() {
                *c += n.sample(rng);
            }
        }
    }
    Ok(FrameLandmarks::from_points(points, handedness, timestamp_ms))
}

/// Renders one frame at the default placement. Noise is keyed by
/// `(gen.seed, frame_index)`.
pub fn render_pose(
    pose: &HandPoseSpec,
    handedness: Handedness,
    gen: &GenSpec,
    frame_index: u64,
) -> Result<FrameLandmarks> {
    gen.validate()?;
    let mut rng = stream_rng(gen.seed, STREAM_FRAME_NOISE, frame_index);
    render_at(
        pose,
        handedness,
        Placement::default(),
        gen.noise_sigma,
        &mut rng,
        gen.frame_ms(frame_index),
    )
}

struct PoseBuilder {
    thumb: [f64; 5],
    fingers: [[f64; 3]; 4],
    rotation: [f64; 3],
}

const EXT: [f64; 3] = [0.05, 0.05, 0.05];
const HALF: [f64; 3] = [0.7, 0.6, 0.3];
const CURL: [f64; 3] = [1.5, 1.6, 1.0];
const ROUND: [f64; 3] = [0.9, 0.8, 0.5];
// Thumb: [cmc, mcp, ip flexion, abduction, rotation]
const THUMB_OUT: [f64; 5] = [0.1, 0.1, 0.1, 0.6, 0.0];
const THUMB_IN: [f64; 5] = [0.5, 0.8, 0.6, -0.2, 1.2];
const THUMB_SIDE: [f64; 5] = [0.1, 0.1, 0.1, -0.4, 0.0];
const THUMB_HALF: [f64; 5] = [0.4, 0.3, 0.2, 0.2, 0.6];
const THUMB_TIGHT: [f64; 5] = [0.9, 1.0, 0.8, -0.3, 1.4];

impl PoseBuilder {
    fn new(thumb: [f64; 5], fingers: [[f64; 3]; 4]) -> Self {
        PoseBuilder {
            thumb,
            fingers,
            rotation: [0.0; 3],
        }
    }

    fn rotated(mut self, z: f64) -> Self {
        self.rotation[2] = z;
        self
    }

    fn build(self, name: &str, kind: PoseKind) -> HandPoseSpec {
        let mut joint_angles = [0.0; NUM_JOINT_ANGLES];
        joint_angles[0..3].copy_from_slice(&self.thumb[0..3]);
        for (f, angles) in self.fingers.iter().enumerate() {
            joint_angles[3 + 3 * f..6 + 3 * f].copy_from_slice(angles);
        }
        joint_angles[THUMB_ABDUCTION] = self.thumb[3];
        joint_angles[THUMB_ROTATION] = self.thumb[4];
        HandPoseSpec {
            name: name.to_string(),
            kind,
            joint_angles,
            global_rotation: self.rotation,
            bone_lengths: CANONICAL_BONES,
        }
    }
}

/// Toy fingerspelling alphabet, in CTC id order (id = position + 1).
pub const TOY_ALPHABET: [char; 12] = ['a', 'b', 'c', 'd', 'e', 'f', 'g', 'h', 'i', 'k', 'l', 'o'];

/// Gesture names in the builtin set, in a stable order.
pub const BUILTIN_GESTURES: [&str; 8] = [
    "thumb_up",
    "thumb_down",
    "victory",
    "open_palm",
    "pointing_up",
    "rock",
    "call",
    "ok",
];

/// 12 letters, 8 gestures and 4 background shapes.
pub fn builtin_alphabet() -> Vec<HandPoseSpec> {
    use PoseKind::*;
    let p = PoseBuilder::new;
    vec![
        p(THUMB_SIDE, [CURL, CURL, CURL, CURL]).build("a", Letter),
        p(THUMB_IN, [EXT, EXT, EXT, EXT]).build("b", Letter),
        p(THUMB_HALF, [HALF, HALF, HALF, HALF]).build("c", Letter),
        p(THUMB_IN, [EXT, HALF, HALF, HALF]).build("d", Letter),
        p(THUMB_TIGHT, [CURL, CURL, CURL, CURL]).build("e", Letter),
        p(THUMB_HALF, [ROUND, EXT, EXT, EXT]).build("f", Letter),
        p(THUMB_OUT, [EXT, CURL, CURL, CURL]).rotated(-1.3).build("g", Letter),
        p(THUMB_IN, [EXT, EXT, CURL, CURL]).rotated(-1.3).build("h", Letter),
        p(THUMB_IN, [CURL, CURL, CURL, EXT]).build("i", Letter),
        p(THUMB_OUT, [EXT, EXT, CURL, CURL]).build("k", Letter),
        p(THUMB_OUT, [EXT, CURL, CURL, CURL]).build("l", Letter),
        p(THUMB_HALF, [ROUND, ROUND, ROUND, ROUND]).build("o", Letter),
        p(THUMB_SIDE, [CURL, CURL, CURL, CURL])
            .rotated(1.4)
            .build("thumb_up", Gesture),
        p(THUMB_SIDE, [CURL, CURL, CURL, CURL])
            .rotated(-1.7)
            .build("thumb_down", Gesture),
        p(THUMB_IN, [EXT, EXT, CURL, CURL]).build("victory", Gesture),
        p(THUMB_OUT, [EXT, EXT, EXT, EXT]).build("open_palm", Gesture),
        p(THUMB_IN, [EXT, CURL, CURL, CURL]).build("pointing_up", Gesture),
        p(THUMB_IN, [EXT, CURL, CURL, EXT]).build("rock", Gesture),
        p(THUMB_OUT, [CURL, CURL, CURL, EXT]).build("call", Gesture),
        p(THUMB_HALF, [[1.0, 0.9, 0.6], EXT, EXT, EXT])
            .rotated(0.3)
            .build("ok", Gesture),
        p([0.2, 0.2, 0.1, 0.3, 0.3], [[0.3, 0.3, 0.2]; 4]).build("relaxed", Background),
        p(THUMB_HALF, [[0.2, 1.2, 1.0]; 4]).build("claw", Background),
        p(THUMB_IN, [EXT, EXT, EXT, CURL]).build("three", Background),
        p(THUMB_OUT, [HALF, EXT, HALF, EXT])
            .rotated(0.6)
            .build("crossed", Background),
    ]
}

fn find_pose<'a>(poses: &'a [HandPoseSpec], name: &str) -> Result<&'a HandPoseSpec> {
    poses
        .iter()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::UnknownPose(name.to_string()))
}

/// Per-sample viewpoint variation: rotation jitter ±0.3 rad per axis,
/// scale ×[0.8, 1.25] and a random image position.
fn jitter(pose: &HandPoseSpec, rng: &mut impl Rng) -> (HandPoseSpec, Placement) {
    let mut pose = pose.clone();
    for r in pose.global_rotation.iter_mut() {
        *r += rng.random_range(-0.3..=0.3);
    }
    let base = Placement::default();
    let placement = Placement {
        center_x: rng.random_range(0.3..0.7),
        center_y: rng.random_range(0.5..0.8),
        scale: base.scale * rng.random_range(0.8..=1.25),
    };
    (pose, placement)
}

/// Renders a fingerspelled word: `fps / 2` hold frames per character plus
/// `transition_frames` joint-space interpolations between consecutive
/// characters. One viewpoint jitter is drawn per sequence.
pub fn gen_fingerspelling(word: &str, handedness: Handedness, gen: &GenSpec) -> Result<LandmarkSequence> {
    gen.validate()?;
    let poses = builtin_alphabet();
    let letters: Vec<&HandPoseSpec> = word
        .chars()
        .map(|c| {
            if TOY_ALPHABET.contains(&c) {
                find_pose(&poses, &c.to_string())
            } else {
                Err(Error::UnknownCharacter(c))
            }
        })
        .collect::<Result<_>>()?;
    if letters.is_empty() {
        return Err(Error::InvalidArgument("empty word".into()));
    }

    let mut seq_rng = stream_rng(gen.seed, STREAM_SEQUENCE, 0);
    let rot_jitter: [f64; 3] = std::array::from_fn(|_| seq_rng.random_range(-0.3..=0.3));
    let (_, placement) = jitter(letters[0], &mut seq_rng);
    let mut noise_rng = stream_rng(gen.seed, STREAM_FRAME_NOISE, 0);

    let hold = (gen.fps / 2).max(1);
    let mut frames = Vec::new();
    let mut push = |pose: &HandPoseSpec, frames: &mut Vec<FrameLandmarks>| -> Result<()> {
        let mut pose = pose.clone();
        for (r, j) in pose.global_rotation.iter_mut().zip(&rot_jitter) {
            *r += j;
        }
        let idx = frames.len() as u64;
        frames.push(render_at(
            &pose,
            handedness,
            placement,
            gen.noise_sigma,
            &mut noise_rng,
            gen.frame_ms(idx),
        )?);
        Ok(())
    };
    for (i, pose) in letters.iter().enumerate() {
        for _ in 0..hold {
            push(pose, &mut frames)?;
        }
        if let Some(next) = letters.get(i + 1) {
            for j in 0..gen.transition_frames {
                let t = (j + 1) as f64 / (gen.transition_frames + 1) as f64;
                push(&pose.interpolate(next, t), &mut frames)?;
            }
        }
    }
    Ok(LandmarkSequence::new(frames, Some(word.to_string())))
}

/// Random words over the toy alphabet with lengths in `[min_len, max_len]`.
pub fn random_words(count: usize, min_len: usize, max_len: usize, seed: u64) -> Result<Vec<String>> {
    if min_len == 0 || min_len > max_len {
        return Err(Error::InvalidArgument(format!(
            "bad word length range {min_len}..={max_len}"
        )));
    }
    let mut rng = stream_rng(seed, STREAM_SAMPLE, 0);
    Ok((0..count)
        .map(|_| {
            let len = rng.random_range(min_len..=max_len);
            (0..len)
                .map(|_| TOY_ALPHABET[rng.random_range(0..TOY_ALPHABET.len())])
                .collect()
        })
        .collect())
}

/// Fingerspelling corpus: one sequence per word, alternating hands, each
/// word keyed to its own noise stream derived from `gen.seed`.
pub fn gen_fingerspelling_corpus(words: &[String], gen: &GenSpec) -> Result<Vec<LandmarkSequence>> {
    words
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let hand = if i % 2 == 0 {
                Handedness::Right
            } else {
                Handedness::Left
            };
            let spec = GenSpec {
                seed: gen.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64 + 1),
                ..*gen
            };
            gen_fingerspelling(w, hand, &spec)
        })
        .collect()
}

/// Labeled single-frame samples: `per_class` per named gesture followed by
/// `background_count` background samples (half builtin background shapes,
/// half interpolants between two random builtin poses).
pub fn gen_gesture_dataset(
    classes: &[&str],
    per_class: usize,
    background_count: usize,
    gen: &GenSpec,
) -> Result<Vec<(FrameLandmarks, String)>> {
    gen.validate()?;
    if per_class == 0 {
        return Err(Error::InvalidArgument("per_class must be at least 1".into()));
    }
    let poses = builtin_alphabet();
    let targets: Vec<&HandPoseSpec> = classes
        .iter()
        .map(|&c| {
            if c == BACKGROUND {
                Err(Error::InvalidArgument("\"background\" is reserved".into()))
            } else {
                find_pose(&poses, c)
            }
        })
        .collect::<Result<_>>()?;
    let backgrounds: Vec<&HandPoseSpec> = poses.iter().filter(|p| p.kind == PoseKind::Background).collect();

    let mut out = Vec::with_capacity(classes.len() * per_class + background_count);
    let mut index = 0u64;
    let sample = |pose: &HandPoseSpec, rng: &mut ChaCha8Rng, label: &str, out: &mut Vec<_>| -> Result<()> {
        let hand = if rng.random::<bool>() {
            Handedness::Right
        } else {
            Handedness::Left
        };
        let (pose, placement) = jitter(pose, rng);
        let frame = render_at(&pose, hand, placement, gen.noise_sigma, rng, 0)?;
        out.push((frame, label.to_string()));
        Ok(())
    };
    for pose in &targets {
        for _ in 0..per_class {
            let mut rng = stream_rng(gen.seed, STREAM_SAMPLE, index);
            index += 1;
            sample(pose, &mut rng, &pose.name, &mut out)?;
        }
    }
    for b in 0..background_count {
        let mut rng = stream_rng(gen.seed, STREAM_SAMPLE, index);
        index += 1;
        let pose = if b % 2 == 0 {
            backgrounds[rng.random_range(0..backgrounds.len())].clone()
        } else {
            let a = &poses[rng.random_range(0..poses.len())];
            let c = &poses[rng.random_range(0..poses.len())];
            a.interpolate(c, rng.random_range(0.35..0.65))
        };
        sample(&pose, &mut rng, BACKGROUND, &mut out)?;
    }
    Ok(out)
}
