//! Procedural sprite characters, motion and OpenPose-style skeleton renders.
//!
//! Everything here is a pure function of its seed and arguments, so a clip on
//! disk can always be regenerated file-for-file.

mod clip;
mod render;

pub use clip::{emit_clip, gen_dataset, list_clips, load_clip, load_png, ClipRecord, DatasetConfig, MANIFEST_NAME};
pub use render::{render_frame, render_skeleton, torso_pixel_bounds, OPENPOSE_COLORS};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 13;
pub const NUM_BONES: usize = 12;

/// Joint indices. The pelvis is the kinematic root.
pub mod joint {
    pub const PELVIS: usize = 0;
    pub const NECK: usize = 1;
    pub const HEAD: usize = 2;
    pub const L_SHOULDER: usize = 3;
    pub const L_ELBOW: usize = 4;
    pub const L_WRIST: usize = 5;
    pub const R_SHOULDER: usize = 6;
    pub const R_ELBOW: usize = 7;
    pub const R_WRIST: usize = 8;
    pub const L_HIP: usize = 9;
    pub const L_KNEE: usize = 10;
    pub const R_HIP: usize = 11;
    pub const R_KNEE: usize = 12;
}

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "pelvis",
    "neck",
    "head",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "l_hip",
    "l_knee",
    "r_hip",
    "r_knee",
];

/// `(parent, child)` joint pairs in topological order; every child appears once.
pub const BONES: [(usize, usize); NUM_BONES] = [
    (joint::PELVIS, joint::NECK),
    (joint::NECK, joint::HEAD),
    (joint::NECK, joint::L_SHOULDER),
    (joint::L_SHOULDER, joint::L_ELBOW),
    (joint::L_ELBOW, joint::L_WRIST),
    (joint::NECK, joint::R_SHOULDER),
    (joint::R_SHOULDER, joint::R_ELBOW),
    (joint::R_ELBOW, joint::R_WRIST),
    (joint::PELVIS, joint::L_HIP),
    (joint::L_HIP, joint::L_KNEE),
    (joint::PELVIS, joint::R_HIP),
    (joint::R_HIP, joint::R_KNEE),
];

pub const TORSO_BONE: usize = 0;

/// Rest orientation of each bone, radians, image coordinates (y points down).
const REST_ANGLES: [f64; NUM_BONES] = [
    -std::f64::consts::FRAC_PI_2,
    -std::f64::consts::FRAC_PI_2,
    std::f64::consts::PI,
    std::f64::consts::FRAC_PI_2 + 0.35,
    std::f64::consts::FRAC_PI_2 + 0.15,
    0.0,
    std::f64::consts::FRAC_PI_2 - 0.35,
    std::f64::consts::FRAC_PI_2 - 0.15,
    std::f64::consts::PI,
    std::f64::consts::FRAC_PI_2 + 0.12,
    0.0,
    std::f64::consts::FRAC_PI_2 - 0.12,
];

const MEAN_PROPORTIONS: [f64; NUM_BONES] = [1.0, 0.32, 0.3, 0.55, 0.5, 0.3, 0.55, 0.5, 0.22, 0.75, 0.22, 0.75];

/// Oscillation range per bone (radians) before amplitude scaling.
const SWING_RANGE: [f64; NUM_BONES] = [0.15, 0.25, 0.1, 1.0, 0.8, 0.1, 1.0, 0.8, 0.05, 0.6, 0.05, 0.6];

/// Torso length in normalized image units; all bone lengths are relative to it.
pub const TORSO_LENGTH: f64 = 0.28;
const ROOT_REST: (f64, f64) = (0.5, 0.56);
const ROOT_BOB: f64 = 0.03;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterSpec {
    pub seed: u64,
    pub limb_colors: Vec<[u8; 3]>,
    pub proportions: Vec<f64>,
    pub head_radius: f64,
}

impl CharacterSpec {
    pub fn bone_length(&self, bone: usize) -> f64 {
        self.proportions[bone] * TORSO_LENGTH
    }

    /// Rest pose of this character, root at the default position.
    pub fn rest_pose(&self) -> PoseFrame {
        let offsets = [0.0; NUM_BONES];
        forward_kinematics(&self.proportions, ROOT_REST, &offsets)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseFrame {
    pub joints: Vec<[f64; 2]>,
}

impl PoseFrame {
    pub fn new(joints: Vec<[f64; 2]>) -> Result<Self> {
        if joints.len() != NUM_JOINTS {
            return Err(Error::invalid(format!(
                "pose must have {NUM_JOINTS} joints, got {}",
                joints.len()
            )));
        }
        if joints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("pose contains non-finite coordinates"));
        }
        Ok(Self { joints })
    }

    /// Vertical extent of the skeleton.
    pub fn height(&self) -> f64 {
        let (lo, hi) = self
            .joints
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), j| {
                (lo.min(j[1]), hi.max(j[1]))
            });
        hi - lo
    }

    pub fn root(&self) -> [f64; 2] {
        self.joints[joint::PELVIS]
    }

    pub fn bone_length(&self, bone: usize) -> f64 {
        let (a, b) = BONES[bone];
        let (pa, pb) = (self.joints[a], self.joints[b]);
        ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSequence {
    pub frames: Vec<PoseFrame>,
    pub fps: f64,
}

impl PoseSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Largest Euclidean displacement of any joint between consecutive frames.
    pub fn max_step_displacement(&self) -> f64 {
        self.frames
            .windows(2)
            .flat_map(|w| {
                w[0].joints
                    .iter()
                    .zip(&w[1].joints)
                    .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
            })
            .fold(0.0, f64::max)
    }
}

pub const DEFAULT_FPS: f64 = 12.0;

fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    mix_seed(seed, salt)
}

pub fn gen_character(seed: u64) -> CharacterSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xC4A2));
    let limb_colors = (0..NUM_BONES)
        .map(|_| {
            // Keep colors well away from the dark background.
            let mut c = [0u8; 3];
            for v in c.iter_mut() {
                *v = rng.random_range(40..=255);
            }
            let bright = *c.iter().max().unwrap();
            if bright < 140 {
                let k = rng.random_range(0..3);
                c[k] = rng.random_range(160..=255);
            }
            c
        })
        .collect();
    let proportions = MEAN_PROPORTIONS
        .iter()
        .enumerate()
        .map(|(i, m)| {
            if i == TORSO_BONE {
                1.0
            } else {
                m * rng.random_range(0.85..1.15)
            }
        })
        .collect();
    let head_radius = rng.random_range(0.05..0.075);
    CharacterSpec {
        seed,
        limb_colors,
        proportions,
        head_radius,
    }
}

fn forward_kinematics(proportions: &[f64], root: (f64, f64), offsets: &[f64; NUM_BONES]) -> PoseFrame {
    let mut joints = vec![[0.0; 2]; NUM_JOINTS];
    let mut abs_offset = [0.0; NUM_JOINTS];
    joints[joint::PELVIS] = [root.0, root.1];
    for (b, &(parent, child)) in BONES.iter().enumerate() {
        let acc = abs_offset[parent] + offsets[b];
        abs_offset[child] = acc;
        let theta = REST_ANGLES[b] + acc;
        let len = proportions[b] * TORSO_LENGTH;
        let p = joints[parent];
        joints[child] = [p[0] + len * theta.cos(), p[1] + len * theta.sin()];
    }
    for j in joints.iter_mut() {
        j[0] = j[0].clamp(0.0, 1.0);
        j[1] = j[1].clamp(0.0, 1.0);
    }
    PoseFrame { joints }
}

/// Per-frame joint displacement bound for unit swing scale and unit angular rate.
fn unit_displacement_bound() -> f64 {
    let mut chain_swing = [0.0; NUM_JOINTS];
    let mut bound = [ROOT_BOB; NUM_JOINTS];
    // Proportions vary by at most 15%; bound with the upper end.
    for (b, &(parent, child)) in BONES.iter().enumerate() {
        chain_swing[child] = chain_swing[parent] + SWING_RANGE[b];
        let len = MEAN_PROPORTIONS[b] * 1.15 * TORSO_LENGTH;
        bound[child] = bound[parent] + len * chain_swing[child];
    }
    bound.into_iter().fold(0.0, f64::max)
}

/// Motion of a generic skeleton with average proportions.
///
/// Per-bone sinusoidal angle offsets with seeded phases plus a vertical root
/// bob. Consecutive frames never move any joint by more than
/// `motion_amplitude` (normalized units).
pub fn gen_pose_sequence(seed: u64, length: usize, motion_amplitude: f64) -> Result<PoseSequence> {
    gen_motion(&MEAN_PROPORTIONS, seed, length, motion_amplitude)
}

/// Same motion model, driven through a specific character's bone lengths.
pub fn gen_character_motion(
    character: &CharacterSpec,
    seed: u64,
    length: usize,
    motion_amplitude: f64,
) -> Result<PoseSequence> {
    gen_motion(&character.proportions, seed, length, motion_amplitude)
}

fn gen_motion(proportions: &[f64], seed: u64, length: usize, motion_amplitude: f64) -> Result<PoseSequence> {
    if length < 1 {
        return Err(Error::invalid("pose sequence length must be >= 1"));
    }
    if !motion_amplitude.is_finite() || motion_amplitude < 0.0 {
        return Err(Error::invalid("motion amplitude must be finite and >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x9053));
    let period: f64 = rng.random_range(20.0..36.0);
    let omega = std::f64::consts::TAU / period;
    let phases: Vec<f64> = (0..NUM_BONES + 1)
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();
    // |sin a - sin b| <= |a - b| makes this a strict per-frame bound.
    let scale = motion_amplitude / (omega * unit_displacement_bound()) * (1.0 - 1e-9);
    let frames = (0..length)
        .map(|k| {
            let phase = omega * k as f64;
            let mut offsets = [0.0; NUM_BONES];
            for (b, o) in offsets.iter_mut().enumerate() {
                *o = scale * SWING_RANGE[b] * (phase + phases[b]).sin();
            }
            let bob = scale * ROOT_BOB * (phase + phases[NUM_BONES]).sin();
            forward_kinematics(proportions, (ROOT_REST.0, ROOT_REST.1 + bob), &offsets)
        })
        .collect();
    Ok(PoseSequence {
        frames,
        fps: DEFAULT_FPS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn character_is_deterministic() {
        assert_eq!(gen_character(7), gen_character(7));
    }

    #[test]
    fn neighbouring_seeds_give_distinct_characters() {
        let distinct = (0..100u64)
            .filter(|&s| gen_character(s) != gen_character(s + 1))
            .count();
        assert!(distinct as f64 / 100.0 > 0.99);
    }

    #[test]
    fn proportions_positive_for_many_seeds() {
        for s in 0..200 {
            let c = gen_character(s);
            assert!(c.proportions.iter().all(|&p| p > 0.0));
            assert!(c.head_radius > 0.0);
            assert_eq!(c.limb_colors.len(), NUM_BONES);
        }
    }

    #[test]
    fn single_frame_sequence() {
        let seq = gen_pose_sequence(3, 1, 0.04).unwrap();
        assert_eq!(seq.len(), 1);
        assert_eq!(seq.frames[0].joints.len(), NUM_JOINTS);
    }

    #[test]
    fn zero_length_is_rejected() {
        assert!(matches!(gen_pose_sequence(3, 0, 0.04), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn zero_amplitude_freezes_motion() {
        let c = gen_character(2);
        let seq = gen_character_motion(&c, 5, 12, 0.0).unwrap();
        assert!(seq.frames.iter().all(|f| f == &seq.frames[0]));
    }

    #[test]
    fn displacement_bounded_by_amplitude() {
        let c = gen_character(4);
        let generic = gen_pose_sequence(3, 24, 0.04).unwrap();
        assert!(generic.max_step_displacement() <= 0.04);
        for amp in [0.01, 0.04, 0.1] {
            let seq = gen_character_motion(&c, 3, 24, amp).unwrap();
            // Exhaustive scan over every joint of every consecutive frame pair.
            for w in seq.frames.windows(2) {
                for (a, b) in w[0].joints.iter().zip(&w[1].joints) {
                    let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                    assert!(d <= amp, "step {d} exceeds {amp}");
                }
            }
            assert!(seq.max_step_displacement() > 0.0);
        }
    }

    #[test]
    fn bone_lengths_follow_proportions() {
        let c = gen_character(11);
        let pose = c.rest_pose();
        // Bones that stay inside the unit square keep their exact length.
        for b in 0..NUM_BONES {
            assert!((pose.bone_length(b) - c.bone_length(b)).abs() < 1e-12);
        }
    }
}
