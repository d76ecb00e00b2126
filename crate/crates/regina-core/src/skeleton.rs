//! Skeleton sequence data model and preprocessing.
//!
//! A sequence stores `joints x frames x dims` coordinates flat in joint-major
//! order. Preprocessing covers temporal normalization (loop-pad or truncate),
//! centering on a reference joint, and derivation of the bone stream as
//! coordinate differences along the skeleton tree.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use thiserror::Error;

/// Which signal a sequence carries: raw joint positions or bone vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Joint,
    Bone,
}

impl Stream {
    pub fn as_str(self) -> &'static str {
        match self {
            Stream::Joint => "joint",
            Stream::Bone => "bone",
        }
    }
}

impl core::str::FromStr for Stream {
    type Err = SkeletonError;

    fn from_str(s: &str) -> Result<Self, SkeletonError> {
        match s {
            "joint" => Ok(Stream::Joint),
            "bone" => Ok(Stream::Bone),
            other => Err(SkeletonError::BadStream {
                name: String::from(other),
            }),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SkeletonError {
    #[error("data length {got} does not match joints*frames*dims = {want}")]
    ExtentMismatch { want: usize, got: usize },
    #[error("non-finite coordinate at flat index {index}")]
    NonFinite { index: usize },
    #[error("sequence has no frames")]
    NoFrames,
    #[error("target frame count must be at least 1")]
    BadTargetLength,
    #[error("bone stream requested from a sequence that is already bones")]
    AlreadyBones,
    #[error("topology covers {topology} joints but sequence has {sequence}")]
    JointCountMismatch { topology: usize, sequence: usize },
    #[error("invalid topology: {reason}")]
    BadTopology { reason: String },
    #[error("unknown stream '{name}' (expected 'joint' or 'bone')")]
    BadStream { name: String },
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// A skeleton tree: directed edges from a source joint toward the periphery,
/// rooted at `center`. Every joint except the center is the target of exactly
/// one edge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoneTopology {
    pub joints: usize,
    pub center: usize,
    /// (source, target) pairs; the source is the joint nearer the center.
    pub edges: Vec<(usize, usize)>,
}

impl BoneTopology {
    pub fn new(
        joints: usize,
        center: usize,
        edges: Vec<(usize, usize)>,
    ) -> Result<Self, SkeletonError> {
        let bad = |reason: String| SkeletonError::BadTopology { reason };
        if center >= joints {
            return Err(bad(alloc::format!(
                "center joint {} out of range for {} joints",
                center, joints
            )));
        }
        let mut parent = vec![usize::MAX; joints];
        for &(src, tgt) in &edges {
            if src >= joints || tgt >= joints {
                return Err(bad(alloc::format!("edge ({}, {}) out of range", src, tgt)));
            }
            if tgt == center {
                return Err(bad(String::from("center joint must not be an edge target")));
            }
            if parent[tgt] != usize::MAX {
                return Err(bad(alloc::format!("joint {} is the target of two edges", tgt)));
            }
            parent[tgt] = src;
        }
        for j in 0..joints {
            if j == center {
                continue;
            }
            if parent[j] == usize::MAX {
                return Err(bad(alloc::format!("joint {} is not reached by any edge", j)));
            }
            // walking up must reach the center; in a tree that takes < joints steps
            let mut cur = j;
            let mut steps = 0;
            while cur != center {
                cur = parent[cur];
                steps += 1;
                if steps >= joints {
                    return Err(bad(alloc::format!("cycle through joint {}", j)));
                }
            }
        }
        Ok(BoneTopology { joints, center, edges })
    }

    /// The 9-joint tree used by the synthetic generator: pelvis center, spine,
    /// head, two 2-joint arms off the spine, two 1-joint legs off the pelvis.
    pub fn synthetic9() -> Self {
        BoneTopology::new(
            9,
            0,
            vec![
                (0, 1), // pelvis -> spine
                (1, 2), // spine -> head
                (1, 3), // spine -> left elbow
                (3, 4), // left elbow -> left hand
                (1, 5), // spine -> right elbow
                (5, 6), // right elbow -> right hand
                (0, 7), // pelvis -> left foot
                (0, 8), // pelvis -> right foot
            ],
        )
        .expect("built-in topology is valid")
    }

    /// The 25-joint Kinect-v2 tree used by NTU RGB+D recordings, rooted at the
    /// shoulder-spine joint (index 20).
    pub fn ntu25() -> Self {
        // (target, source) pairs in the dataset's 1-based numbering, flipped
        // and shifted to 0-based below.
        const LINKS: [(usize, usize); 24] = [
            (1, 2), (2, 21), (3, 21), (4, 3), (5, 21), (6, 5), (7, 6), (8, 7),
            (9, 21), (10, 9), (11, 10), (12, 11), (13, 1), (14, 13), (15, 14),
            (16, 15), (17, 1), (18, 17), (19, 18), (20, 19), (22, 23), (23, 8),
            (24, 25), (25, 12),
        ];
        let edges = LINKS.iter().map(|&(tgt, src)| (src - 1, tgt - 1)).collect();
        BoneTopology::new(25, 20, edges).expect("built-in topology is valid")
    }

    /// Source joint of the edge targeting `joint`, or None for the center.
    pub fn source_of(&self, joint: usize) -> Option<usize> {
        self.edges
            .iter()
            .find(|&&(_, tgt)| tgt == joint)
            .map(|&(src, _)| src)
    }
}

/// A skeleton sequence: `joints x frames x dims` coordinates plus sample
/// metadata. Data is flat joint-major: index `(j * frames + f) * dims + d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    pub joints: usize,
    pub frames: usize,
    pub dims: usize,
    pub data: Vec<f64>,
    pub label: usize,
    pub subject: u32,
    pub camera: u32,
    pub stream: Stream,
}

impl SkeletonSequence {
    pub fn new(
        joints: usize,
        frames: usize,
        dims: usize,
        data: Vec<f64>,
        label: usize,
        subject: u32,
        camera: u32,
        stream: Stream,
    ) -> Result<Self, SkeletonError> {
        let want = joints * frames * dims;
        if data.len() != want {
            return Err(SkeletonError::ExtentMismatch { want, got: data.len() });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(SkeletonError::NonFinite { index });
        }
        Ok(SkeletonSequence {
            joints,
            frames,
            dims,
            data,
            label,
            subject,
            camera,
            stream,
        })
    }

    fn offset(&self, joint: usize, frame: usize) -> usize {
        (joint * self.frames + frame) * self.dims
    }

    /// Coordinates of one joint in one frame.
    pub fn joint_frame(&self, joint: usize, frame: usize) -> &[f64] {
        let o = self.offset(joint, frame);
        &self.data[o..o + self.dims]
    }

    /// Loop-pad (repeat from the start) or truncate to exactly `t_out` frames.
    pub fn normalize_temporal(&self, t_out: usize) -> Result<SkeletonSequence, SkeletonError> {
        if self.frames == 0 {
            return Err(SkeletonError::NoFrames);
        }
        if t_out == 0 {
            return Err(SkeletonError::BadTargetLength);
        }
        let mut data = vec![0.0; self.joints * t_out * self.dims];
        for j in 0..self.joints {
            for f in 0..t_out {
                let src = self.offset(j, f % self.frames);
                let dst = (j * t_out + f) * self.dims;
                data[dst..dst + self.dims].copy_from_slice(&self.data[src..src + self.dims]);
            }
        }
        Ok(SkeletonSequence {
            frames: t_out,
            data,
            ..self.clone()
        })
    }

    /// Subtract the first-frame coordinates of the topology's center joint
    /// from every joint of every frame.
    pub fn center_sequence(&self, topology: &BoneTopology) -> Result<SkeletonSequence, SkeletonError> {
        if topology.joints != self.joints {
            return Err(SkeletonError::JointCountMismatch {
                topology: topology.joints,
                sequence: self.joints,
            });
        }
        if self.frames == 0 {
            return Err(SkeletonError::NoFrames);
        }
        let origin: Vec<f64> = self.joint_frame(topology.center, 0).to_vec();
        let mut out = self.clone();
        for j in 0..self.joints {
            for f in 0..self.frames {
                let o = self.offset(j, f);
                for d in 0..self.dims {
                    out.data[o + d] -= origin[d];
                }
            }
        }
        Ok(out)
    }

    /// Bone vectors: for each edge (source, target) the target slot becomes
    /// target minus source coordinates; the center slot is all zeros.
    pub fn to_bone_stream(&self, topology: &BoneTopology) -> Result<SkeletonSequence, SkeletonError> {
        if self.stream == Stream::Bone {
            return Err(SkeletonError::AlreadyBones);
        }
        if topology.joints != self.joints {
            return Err(SkeletonError::JointCountMismatch {
                topology: topology.joints,
                sequence: self.joints,
            });
        }
        let mut out = self.clone();
        out.stream = Stream::Bone;
        out.data.iter_mut().for_each(|v| *v = 0.0);
        for &(src, tgt) in &topology.edges {
            for f in 0..self.frames {
                let s = self.offset(src, f);
                let t = self.offset(tgt, f);
                for d in 0..self.dims {
                    out.data[t + d] = self.data[t + d] - self.data[s + d];
                }
            }
        }
        Ok(out)
    }
}

/// Parse an NTU-style `.skeleton` text file into one sequence per tracked
/// body. Layout: line 1 is the frame count; each frame starts with a body
/// count; each body has a metadata line (first field is the body id), a joint
/// count line, then one line per joint whose first three fields are x y z.
///
/// Bodies are keyed by id in order of first appearance; a body's sequence
/// contains the frames it was tracked in. Only x, y, z are kept. Labels and
/// subject/camera ids are not part of the file and default to zero.
pub fn parse_ntu_skeleton(text: &str) -> Result<Vec<SkeletonSequence>, SkeletonError> {
    struct Cursor<'a> {
        lines: core::str::Lines<'a>,
        line_no: usize,
    }
    impl<'a> Cursor<'a> {
        fn next_line(&mut self, what: &str) -> Result<&'a str, SkeletonError> {
            for line in self.lines.by_ref() {
                self.line_no += 1;
                let trimmed = line.trim();
                if !trimmed.is_empty() {
                    return Ok(trimmed);
                }
            }
            Err(SkeletonError::Parse {
                line: self.line_no + 1,
                reason: alloc::format!("truncated file, expected {}", what),
            })
        }
        fn next_count(&mut self, what: &str) -> Result<usize, SkeletonError> {
            let line_no = self.line_no + 1;
            let line = self.next_line(what)?;
            line.split_whitespace()
                .next()
                .unwrap()
                .parse()
                .map_err(|_| SkeletonError::Parse {
                    line: line_no,
                    reason: alloc::format!("non-numeric {}", what),
                })
        }
    }

    let mut cur = Cursor { lines: text.lines(), line_no: 0 };
    let frame_count = cur.next_count("frame count")?;
    if frame_count == 0 {
        return Err(SkeletonError::Parse {
            line: 1,
            reason: String::from("empty recording (zero frames declared)"),
        });
    }

    // per body: (id, joint count, frames as flat t-major coords)
    let mut bodies: Vec<(String, usize, Vec<f64>)> = Vec::new();
    for _ in 0..frame_count {
        let body_count = cur.next_count("body count")?;
        for _ in 0..body_count {
            let meta = cur.next_line("body metadata")?;
            let id = String::from(meta.split_whitespace().next().unwrap());
            let joint_count = cur.next_count("joint count")?;
            let slot = match bodies.iter().position(|(bid, _, _)| *bid == id) {
                Some(i) => i,
                None => {
                    bodies.push((id, joint_count, Vec::new()));
                    bodies.len() - 1
                }
            };
            if bodies[slot].1 != joint_count {
                return Err(SkeletonError::Parse {
                    line: cur.line_no,
                    reason: alloc::format!(
                        "joint count changed from {} to {} for one body",
                        bodies[slot].1, joint_count
                    ),
                });
            }
            for _ in 0..joint_count {
                let line_no = cur.line_no + 1;
                let line = cur.next_line("joint coordinates")?;
                let mut fields = line.split_whitespace();
                for _ in 0..3 {
                    let field = fields.next().ok_or_else(|| SkeletonError::Parse {
                        line: line_no,
                        reason: String::from("fewer than 3 coordinate fields"),
                    })?;
                    let v: f64 = field.parse().map_err(|_| SkeletonError::Parse {
                        line: line_no,
                        reason: alloc::format!("non-numeric coordinate '{}'", field),
                    })?;
                    bodies[slot].2.push(v);
                }
            }
        }
    }

    // reorder each body's frame-major buffer into the joint-major layout
    let mut out = Vec::with_capacity(bodies.len());
    for (_, joints, tmajor) in bodies {
        let frames = tmajor.len() / (joints * 3);
        let mut data = vec![0.0; tmajor.len()];
        for f in 0..frames {
            for j in 0..joints {
                let src = (f * joints + j) * 3;
                let dst = (j * frames + f) * 3;
                data[dst..dst + 3].copy_from_slice(&tmajor[src..src + 3]);
            }
        }
        out.push(SkeletonSequence::new(joints, frames, 3, data, 0, 0, 0, Stream::Joint)?);
    }
    Ok(out)
}
