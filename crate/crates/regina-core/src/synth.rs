//! Synthetic skeleton-action generator and dataset manifest.
//!
//! Produces a desk-scale corpus of parametric motions on the 9-joint tree:
//! still, wave (arm sinusoid), jump (vertical sinusoid of all joints), bow
//! (forward pitch ramp of the upper body), kick (leg swing). Subjects vary by
//! body scale and tempo, cameras by yaw angle, repetitions by phase and
//! additive coordinate noise. Everything is a pure function of the seed.

use crate::skeleton::{BoneTopology, SkeletonSequence, Stream};
use alloc::string::String;
use alloc::vec::Vec;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

/// Dataset split rule: by performer identity or by camera viewpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    /// Cross-subject: even subject ids train, odd ones test.
    Xsub,
    /// Cross-view: camera 0 tests, all other cameras train.
    Xview,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Xsub => "xsub",
            Split::Xview => "xview",
        }
    }
}

impl core::str::FromStr for Split {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, SynthError> {
        match s {
            "xsub" => Ok(Split::Xsub),
            "xview" => Ok(Split::Xview),
            other => Err(SynthError::BadSplit {
                name: String::from(other),
            }),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("at most {max} motion classes are defined, got {got}")]
    TooManyClasses { max: usize, got: usize },
    #[error("need at least 2 subjects, got {0}")]
    TooFewSubjects(usize),
    #[error("need at least 2 cameras, got {0}")]
    TooFewCameras(usize),
    #[error("need at least 1 repetition")]
    NoReps,
    #[error("need at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("noise standard deviation must be finite and non-negative, got {0}")]
    BadNoise(f64),
    #[error("unknown split '{name}' (expected 'xsub' or 'xview')")]
    BadSplit { name: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub subjects: usize,
    pub cameras: usize,
    pub reps: usize,
    pub frames: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 5,
            subjects: 8,
            cameras: 2,
            reps: 10,
            frames: 64,
            noise_std: 0.01,
            seed: 0,
        }
    }
}

/// One generated or ingested sample as listed in a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestItem {
    pub path: String,
    pub label: usize,
    pub subject: u32,
    pub camera: u32,
}

/// Dataset index: sample list plus the id partition of its split rule.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub train_ids: Vec<u32>,
    pub test_ids: Vec<u32>,
    pub items: Vec<ManifestItem>,
}

impl DatasetManifest {
    /// Item indices for (train, test) under the requested rule. When it
    /// differs from the stored split the partition is re-derived from the
    /// rule; otherwise the stored id lists decide.
    pub fn partition(&self, split: Split) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, item) in self.items.iter().enumerate() {
            let is_train = if split == self.split {
                let id = match split {
                    Split::Xsub => item.subject,
                    Split::Xview => item.camera,
                };
                self.train_ids.contains(&id)
            } else {
                match split {
                    Split::Xsub => item.subject % 2 == 0,
                    Split::Xview => item.camera != 0,
                }
            };
            if is_train {
                train.push(i);
            } else {
                test.push(i);
            }
        }
        (train, test)
    }
}

/// Number of motion programs known to the generator.
pub const MAX_CLASSES: usize = 5;

pub const CLASS_NAMES: [&str; MAX_CLASSES] = ["still", "wave", "jump", "bow", "kick"];

// rest pose of the 9-joint skeleton, meters, y up, z forward
const REST: [[f64; 3]; 9] = [
    [0.0, 0.90, 0.0],   // pelvis (center)
    [0.0, 1.25, 0.0],   // spine
    [0.0, 1.55, 0.0],   // head
    [-0.25, 1.25, 0.0], // left elbow
    [-0.45, 1.05, 0.0], // left hand
    [0.25, 1.25, 0.0],  // right elbow
    [0.45, 1.05, 0.0],  // right hand
    [-0.12, 0.0, 0.0],  // left foot
    [0.12, 0.0, 0.0],   // right foot
];

const TAU: f64 = 2.0 * core::f64::consts::PI;

/// Stable per-entity stream seed: FNV-1a over a tag and id list, mixed into
/// the base seed. Keeps independent entities on independent random streams.
pub(crate) fn mix_seed(base: u64, tag: &str, ids: &[u64]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    for id in ids {
        for b in id.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    base ^ h
}

fn pose_at(class: usize, phase: f64, ramp: f64, joints: &mut [[f64; 3]; 9]) {
    *joints = REST;
    match class {
        0 => {} // still
        1 => {
            // wave: right arm oscillates, hand leading the elbow
            let swing = libm::sin(phase);
            joints[5][1] += 0.18 * swing;
            joints[6][1] += 0.38 * swing;
            joints[6][0] += 0.10 * libm::cos(phase);
        }
        2 => {
            // jump: vertical sinusoid of the whole body
            let lift = 0.20 * libm::sin(phase);
            for j in joints.iter_mut() {
                j[1] += lift;
            }
        }
        3 => {
            // bow: upper body pitches forward around the pelvis, ramping up
            let pitch = 0.8 * ramp;
            let (s, c) = (libm::sin(pitch), libm::cos(pitch));
            let pelvis = REST[0];
            for j in joints.iter_mut().take(7).skip(1) {
                let dy = j[1] - pelvis[1];
                let dz = j[2] - pelvis[2];
                j[1] = pelvis[1] + dy * c - dz * s;
                j[2] = pelvis[2] + dy * s + dz * c;
            }
        }
        4 => {
            // kick: right leg swings forward about the pelvis
            let beta = 0.9 * libm::sin(phase);
            let (s, c) = (libm::sin(beta), libm::cos(beta));
            let pelvis = REST[0];
            let dy = REST[8][1] - pelvis[1];
            joints[8][1] = pelvis[1] + dy * c;
            joints[8][2] = pelvis[2] - dy * s;
        }
        _ => unreachable!("class count is validated"),
    }
}

/// Generate the dataset: a manifest plus one sequence per item, in the same
/// order. Deterministic function of the config.
pub fn synth_generate(
    config: &SynthConfig,
) -> Result<(DatasetManifest, Vec<SkeletonSequence>), SynthError> {
    if config.classes < 2 {
        return Err(SynthError::TooFewClasses(config.classes));
    }
    if config.classes > MAX_CLASSES {
        return Err(SynthError::TooManyClasses {
            max: MAX_CLASSES,
            got: config.classes,
        });
    }
    if config.subjects < 2 {
        return Err(SynthError::TooFewSubjects(config.subjects));
    }
    if config.cameras < 2 {
        return Err(SynthError::TooFewCameras(config.cameras));
    }
    if config.reps == 0 {
        return Err(SynthError::NoReps);
    }
    if config.frames < 2 {
        return Err(SynthError::TooFewFrames(config.frames));
    }
    if !(config.noise_std.is_finite() && config.noise_std >= 0.0) {
        return Err(SynthError::BadNoise(config.noise_std));
    }

    // per-subject body scale and tempo, per-camera yaw
    let mut scales = Vec::with_capacity(config.subjects);
    let mut tempos = Vec::with_capacity(config.subjects);
    for s in 0..config.subjects {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, "subject", &[s as u64]));
        scales.push(rng.gen_range(0.85..1.15));
        tempos.push(rng.gen_range(0.8..1.2));
    }
    let mut yaws = Vec::with_capacity(config.cameras);
    for c in 0..config.cameras {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, "camera", &[c as u64]));
        yaws.push(rng.gen_range(-0.6..0.6));
    }

    let cycles = [0.0, 2.0, 1.5, 1.0, 2.0];
    let mut items = Vec::new();
    let mut sequences = Vec::new();
    for class in 0..config.classes {
        for subject in 0..config.subjects {
            for camera in 0..config.cameras {
                for rep in 0..config.reps {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                        config.seed,
                        "sample",
                        &[class as u64, subject as u64, camera as u64, rep as u64],
                    ));
                    let phase0 = rng.gen_range(0.0..TAU);
                    let noise = Normal::new(0.0, config.noise_std)
                        .map_err(|_| SynthError::BadNoise(config.noise_std))?;
                    let (yaw_s, yaw_c) = (libm::sin(yaws[camera]), libm::cos(yaws[camera]));

                    let mut data = alloc::vec![0.0; 9 * config.frames * 3];
                    let mut joints = REST;
                    for f in 0..config.frames {
                        let u = f as f64 / config.frames as f64;
                        let phase = phase0 + TAU * cycles[class] * tempos[subject] * u;
                        let ramp = f as f64 / (config.frames - 1) as f64;
                        pose_at(class, phase, ramp, &mut joints);
                        for (j, p) in joints.iter().enumerate() {
                            let scaled = [p[0] * scales[subject], p[1] * scales[subject], p[2] * scales[subject]];
                            // yaw about the vertical axis, then noise
                            let x = scaled[0] * yaw_c + scaled[2] * yaw_s;
                            let z = -scaled[0] * yaw_s + scaled[2] * yaw_c;
                            let mut v = [x, scaled[1], z];
                            if config.noise_std > 0.0 {
                                for coord in v.iter_mut() {
                                    *coord += noise.sample(&mut rng);
                                }
                            }
                            let o = (j * config.frames + f) * 3;
                            data[o..o + 3].copy_from_slice(&v);
                        }
                    }
                    let idx = items.len();
                    items.push(ManifestItem {
                        path: alloc::format!("seq_{:05}.json", idx),
                        label: class,
                        subject: subject as u32,
                        camera: camera as u32,
                    });
                    sequences.push(
                        SkeletonSequence::new(
                            9,
                            config.frames,
                            3,
                            data,
                            class,
                            subject as u32,
                            camera as u32,
                            Stream::Joint,
                        )
                        .expect("generated data is finite and sized"),
                    );
                }
            }
        }
    }

    let train_ids = (0..config.subjects as u32).filter(|s| s % 2 == 0).collect();
    let test_ids = (0..config.subjects as u32).filter(|s| s % 2 == 1).collect();
    Ok((
        DatasetManifest {
            split: Split::Xsub,
            train_ids,
            test_ids,
            items,
        },
        sequences,
    ))
}

/// The topology matching generated sequences.
pub fn synth_topology() -> BoneTopology {
    BoneTopology::synthetic9()
}
