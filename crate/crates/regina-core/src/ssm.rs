//! Self-similarity descriptor: pairwise frame distances of a skeleton
//! sequence, averaged over joints.
//!
//! For frames p and q the entry is `(1/n) * sum_j ||v_jp - v_jq||` under the
//! chosen norm. Only the upper triangle is computed and mirrored, so symmetry
//! and the zero diagonal hold exactly rather than within tolerance.

use crate::skeleton::SkeletonSequence;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use thiserror::Error;

/// Distance norm applied to each joint displacement before averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    L2,
    L1,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::L2 => "l2",
            Metric::L1 => "l1",
        }
    }
}

impl core::str::FromStr for Metric {
    type Err = SsmError;

    fn from_str(s: &str) -> Result<Self, SsmError> {
        match s {
            "l2" => Ok(Metric::L2),
            "l1" => Ok(Metric::L1),
            other => Err(SsmError::BadMetric {
                name: String::from(other),
            }),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SsmError {
    #[error("sequence has no frames")]
    NoFrames,
    #[error("sequence has no joints, distance mean is undefined")]
    NoJoints,
    #[error("values length {got} does not match frames^2 = {want}")]
    SizeMismatch { want: usize, got: usize },
    #[error("unknown metric '{name}' (expected 'l2' or 'l1')")]
    BadMetric { name: String },
}

/// Square frame-by-frame distance matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfSimilarityMatrix {
    pub frames: usize,
    pub metric: Metric,
    pub values: Vec<f64>,
}

impl SelfSimilarityMatrix {
    pub fn new(frames: usize, metric: Metric, values: Vec<f64>) -> Result<Self, SsmError> {
        if values.len() != frames * frames {
            return Err(SsmError::SizeMismatch {
                want: frames * frames,
                got: values.len(),
            });
        }
        Ok(SelfSimilarityMatrix { frames, metric, values })
    }

    pub fn get(&self, p: usize, q: usize) -> f64 {
        self.values[p * self.frames + q]
    }
}

/// One structural defect found by [`validate_ssm`].
#[derive(Debug, Clone, PartialEq)]
pub enum SsmViolation {
    Asymmetry { p: usize, q: usize, delta: f64 },
    NonZeroDiagonal { p: usize, value: f64 },
    Negative { p: usize, q: usize, value: f64 },
    NonFinite { p: usize, q: usize },
}

impl core::fmt::Display for SsmViolation {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            SsmViolation::Asymmetry { p, q, delta } => {
                write!(f, "asymmetry at ({}, {}): |d_pq - d_qp| = {}", p, q, delta)
            }
            SsmViolation::NonZeroDiagonal { p, value } => {
                write!(f, "nonzero diagonal at {}: {}", p, value)
            }
            SsmViolation::Negative { p, q, value } => {
                write!(f, "negative entry at ({}, {}): {}", p, q, value)
            }
            SsmViolation::NonFinite { p, q } => write!(f, "non-finite entry at ({}, {})", p, q),
        }
    }
}

/// Compute the self-similarity matrix of a sequence.
pub fn compute_ssm(seq: &SkeletonSequence, metric: Metric) -> Result<SelfSimilarityMatrix, SsmError> {
    let (n, t) = (seq.joints, seq.frames);
    if t == 0 {
        return Err(SsmError::NoFrames);
    }
    if n == 0 {
        return Err(SsmError::NoJoints);
    }
    let mut values = vec![0.0; t * t];
    for p in 0..t {
        for q in (p + 1)..t {
            let mut total = 0.0;
            for j in 0..n {
                let vp = seq.joint_frame(j, p);
                let vq = seq.joint_frame(j, q);
                match metric {
                    Metric::L2 => {
                        let mut sq = 0.0;
                        for d in 0..seq.dims {
                            let diff = vp[d] - vq[d];
                            sq += diff * diff;
                        }
                        total += libm::sqrt(sq);
                    }
                    Metric::L1 => {
                        for d in 0..seq.dims {
                            total += libm::fabs(vp[d] - vq[d]);
                        }
                    }
                }
            }
            let dist = total / n as f64;
            values[p * t + q] = dist;
            values[q * t + p] = dist;
        }
    }
    SelfSimilarityMatrix::new(t, metric, values)
}

/// Report any asymmetry beyond 1e-12, nonzero diagonal, negative or
/// non-finite entry. An empty list means the matrix is structurally sound.
pub fn validate_ssm(ssm: &SelfSimilarityMatrix) -> Vec<SsmViolation> {
    let t = ssm.frames;
    let mut out = Vec::new();
    for p in 0..t {
        for q in 0..t {
            let v = ssm.get(p, q);
            if !v.is_finite() {
                out.push(SsmViolation::NonFinite { p, q });
                continue;
            }
            if v < 0.0 {
                out.push(SsmViolation::Negative { p, q, value: v });
            }
            if p == q && v != 0.0 {
                out.push(SsmViolation::NonZeroDiagonal { p, value: v });
            }
            if p < q {
                let delta = libm::fabs(v - ssm.get(q, p));
                if delta > 1e-12 {
                    out.push(SsmViolation::Asymmetry { p, q, delta });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use crate::skeleton::Stream;

    fn seq_from(joints: usize, frames: usize, fill: impl Fn(usize, usize, usize) -> f64) -> SkeletonSequence {
        let dims = 3;
        let mut data = vec![0.0; joints * frames * dims];
        for j in 0..joints {
            for f in 0..frames {
                for d in 0..dims {
                    data[(j * frames + f) * dims + d] = fill(j, f, d);
                }
            }
        }
        SkeletonSequence::new(joints, frames, dims, data, 0, 0, 0, Stream::Joint).unwrap()
    }

    #[test]
    fn static_sequence_gives_all_zero_matrix() {
        let seq = seq_from(4, 5, |j, _, d| (j + d) as f64);
        let ssm = compute_ssm(&seq, Metric::L2).unwrap();
        assert!(ssm.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_joint_two_frame_hand_value() {
        // frame 1: joints (0,0,0), (1,0,0); frame 2: joints (0,0,0), (1,1,0).
        // joint 0 moves 0, joint 1 moves 1 under both norms; mean is 0.5.
        let data = vec![
            0.0, 0.0, 0.0, 0.0, 0.0, 0.0, // joint 0, frames 1 and 2
            1.0, 0.0, 0.0, 1.0, 1.0, 0.0, // joint 1, frames 1 and 2
        ];
        let seq = SkeletonSequence::new(2, 2, 3, data, 0, 0, 0, Stream::Joint).unwrap();
        for metric in [Metric::L2, Metric::L1] {
            let ssm = compute_ssm(&seq, metric).unwrap();
            assert_eq!(ssm.values, vec![0.0, 0.5, 0.5, 0.0], "metric {:?}", metric);
        }
    }

    #[test]
    fn symmetry_and_zero_diagonal_hold_exactly() {
        let seq = seq_from(5, 7, |j, f, d| ((j * 31 + f * 17 + d * 7) % 13) as f64 * 0.37);
        for metric in [Metric::L2, Metric::L1] {
            let ssm = compute_ssm(&seq, metric).unwrap();
            for p in 0..7 {
                assert_eq!(ssm.get(p, p), 0.0);
                for q in 0..7 {
                    assert_eq!(ssm.get(p, q), ssm.get(q, p));
                }
            }
        }
    }

    #[test]
    fn matches_reference_on_irregular_sequence() {
        let seq = seq_from(3, 6, |j, f, d| ((j * 5 + f * 11 + d * 3) % 17) as f64 * 0.21 - 1.0);
        for (metric, l1) in [(Metric::L2, false), (Metric::L1, true)] {
            let ssm = compute_ssm(&seq, metric).unwrap();
            let want = reference::naive_ssm(&seq.data, 3, 6, 3, l1);
            for (i, (g, w)) in ssm.values.iter().zip(&want).enumerate() {
                assert!((g - w).abs() < 1e-12, "entry {}: {} vs {}", i, g, w);
            }
        }
    }

    #[test]
    fn translation_invariant_and_scale_equivariant() {
        let base = |j: usize, f: usize, d: usize| ((j * 3 + f * 5 + d) % 9) as f64 * 0.25;
        let seq = seq_from(4, 5, base);
        let shifted = seq_from(4, 5, |j, f, d| base(j, f, d) + [4.0, -2.0, 0.5][d]);
        let doubled = seq_from(4, 5, |j, f, d| base(j, f, d) * 2.0);
        for metric in [Metric::L2, Metric::L1] {
            let ssm = compute_ssm(&seq, metric).unwrap();
            assert_eq!(ssm.values, compute_ssm(&shifted, metric).unwrap().values);
            let scaled = compute_ssm(&doubled, metric).unwrap();
            for (a, b) in ssm.values.iter().zip(&scaled.values) {
                assert_eq!(a * 2.0, *b);
            }
        }
    }

    #[test]
    fn joint_relabeling_leaves_matrix_unchanged() {
        let base = |j: usize, f: usize, d: usize| ((j * 7 + f * 2 + d * 5) % 11) as f64 * 0.5;
        let seq = seq_from(4, 4, base);
        let relabel = [2usize, 0, 3, 1];
        let permuted = seq_from(4, 4, |j, f, d| base(relabel[j], f, d));
        for metric in [Metric::L2, Metric::L1] {
            let a = compute_ssm(&seq, metric).unwrap();
            let b = compute_ssm(&permuted, metric).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn l1_dominates_l2_pointwise() {
        let seq = seq_from(5, 6, |j, f, d| ((j * 19 + f * 23 + d * 29) % 31) as f64 * 0.13);
        let l2 = compute_ssm(&seq, Metric::L2).unwrap();
        let l1 = compute_ssm(&seq, Metric::L1).unwrap();
        for (a, b) in l1.values.iter().zip(&l2.values) {
            assert!(a >= b, "l1 {} < l2 {}", a, b);
        }
    }

    #[test]
    fn rejects_degenerate_sequences() {
        let empty_frames = SkeletonSequence::new(2, 0, 3, vec![], 0, 0, 0, Stream::Joint).unwrap();
        assert_eq!(compute_ssm(&empty_frames, Metric::L2).unwrap_err(), SsmError::NoFrames);
        let empty_joints = SkeletonSequence::new(0, 2, 3, vec![], 0, 0, 0, Stream::Joint).unwrap();
        assert_eq!(compute_ssm(&empty_joints, Metric::L2).unwrap_err(), SsmError::NoJoints);
    }

    #[test]
    fn validate_accepts_computed_matrices() {
        let seq = seq_from(3, 5, |j, f, d| ((j + 2 * f + 3 * d) % 7) as f64);
        let ssm = compute_ssm(&seq, Metric::L2).unwrap();
        assert!(validate_ssm(&ssm).is_empty());
    }

    #[test]
    fn validate_reports_each_defect_kind() {
        let mut m = SelfSimilarityMatrix::new(2, Metric::L2, vec![0.0, 1.0, 2.0, 0.0]).unwrap();
        let v = validate_ssm(&m);
        assert!(matches!(v[0], SsmViolation::Asymmetry { p: 0, q: 1, .. }), "{:?}", v);

        m.values = vec![0.5, 1.0, 1.0, 0.0];
        assert!(validate_ssm(&m)
            .iter()
            .any(|v| matches!(v, SsmViolation::NonZeroDiagonal { p: 0, .. })));

        m.values = vec![0.0, -1.0, -1.0, 0.0];
        assert!(validate_ssm(&m)
            .iter()
            .any(|v| matches!(v, SsmViolation::Negative { .. })));

        m.values = vec![0.0, f64::NAN, f64::NAN, 0.0];
        let v = validate_ssm(&m);
        assert!(v.iter().all(|v| matches!(v, SsmViolation::NonFinite { .. })) && v.len() == 2, "{:?}", v);
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let err = SelfSimilarityMatrix::new(3, Metric::L2, vec![0.0; 8]).unwrap_err();
        assert_eq!(err, SsmError::SizeMismatch { want: 9, got: 8 });
    }
}
