//! Skeleton graph construction and the convolution units that consume it.
//!
//! The joint graph is split into three partitions by hop distance to the
//! center joint: self-connections (root), neighbors nearer the center
//! (centripetal), and neighbors farther away (centrifugal). Each partition is
//! degree-normalized as `D^{-1/2} A D^{-1/2}` and drives its own weight
//! matrix in the spatial convolution. Temporal units come in two flavors: a
//! plain strided 1-D convolution over frames, and the weighted variant whose
//! per-tap multipliers are read from a (optionally conv-smoothed)
//! self-similarity matrix.

use crate::skeleton::{BoneTopology, SkeletonError};
use crate::ssm::SelfSimilarityMatrix;
use crate::tensor::{Tape, TensorError, TensorId};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

/// Number of spatial partitions (root, centripetal, centrifugal).
pub const PARTITIONS: usize = 3;

/// Configuration of the self-similarity temporal weighting.
///
/// Tap count and stride are not stored here: they belong to the temporal
/// unit itself (the model's blocks), and the ops below take them as explicit
/// arguments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReginaConfig {
    /// Master switch; off means plain baseline temporal convolutions.
    pub enabled: bool,
    /// Side length of the square kernel smoothing the SSM. Odd.
    pub kernel_size: usize,
    /// When false the smoothing kernel is dropped entirely and raw SSM
    /// entries weight the taps (ablation: rigid, pre-defined weighting).
    pub learnable_conv: bool,
    /// Share one smoothing kernel across all blocks instead of one per block.
    pub shared_kernel: bool,
    /// Replace the tap weights by exact ones. The network then must match the
    /// baseline bit for bit; used by the equivalence oracles.
    pub force_ones: bool,
}

impl Default for ReginaConfig {
    fn default() -> Self {
        ReginaConfig {
            enabled: true,
            kernel_size: 3,
            learnable_conv: true,
            shared_kernel: false,
            force_ones: false,
        }
    }
}

impl ReginaConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(TensorError::Incompatible {
                op: "regina_config",
                detail: format!("kernel_size must be odd, got {}", self.kernel_size),
            });
        }
        Ok(())
    }
}

/// The partitioned, normalized skeleton graph.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGraph {
    pub joints: usize,
    pub center: usize,
    /// 0/1 adjacency per partition, row-major `n x n`; index order is
    /// root, centripetal, centrifugal.
    pub partitions: [Vec<f64>; PARTITIONS],
    /// `D^{-1/2} A_p D^{-1/2}` per partition.
    pub normalized: [Vec<f64>; PARTITIONS],
}

/// Build the partitioned graph from a skeleton tree. The topology is
/// re-validated so hand-assembled (non-tree) inputs are rejected.
pub fn build_graph(topology: &BoneTopology) -> Result<SpatialGraph, SkeletonError> {
    let topology = BoneTopology::new(topology.joints, topology.center, topology.edges.clone())?;
    let n = topology.joints;

    // hop distance to the center over the undirected edge set
    let mut dist = vec![usize::MAX; n];
    dist[topology.center] = 0;
    let mut frontier = vec![topology.center];
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for &v in &frontier {
            for &(a, b) in &topology.edges {
                let other = if a == v { b } else if b == v { a } else { continue };
                if dist[other] == usize::MAX {
                    dist[other] = dist[v] + 1;
                    next.push(other);
                }
            }
        }
        frontier = next;
    }

    let mut root = vec![0.0; n * n];
    let mut centripetal = vec![0.0; n * n];
    let mut centrifugal = vec![0.0; n * n];
    for i in 0..n {
        root[i * n + i] = 1.0;
    }
    for &(a, b) in &topology.edges {
        for (i, j) in [(a, b), (b, a)] {
            // j is a neighbor of i; classify by who is nearer the center
            if dist[j] <= dist[i] {
                centripetal[i * n + j] = 1.0;
            } else {
                centrifugal[i * n + j] = 1.0;
            }
        }
    }

    let normalized = [
        normalize_adjacency(&root, n),
        normalize_adjacency(&centripetal, n),
        normalize_adjacency(&centrifugal, n),
    ];
    Ok(SpatialGraph {
        joints: n,
        center: topology.center,
        partitions: [root, centripetal, centrifugal],
        normalized,
    })
}

/// `D^{-1/2} A D^{-1/2}` with `D` the diagonal of row sums. Zero-degree rows
/// (and the matching columns) map to zero: the inverse of 0 is taken as 0.
pub fn normalize_adjacency(a: &[f64], n: usize) -> Vec<f64> {
    let mut inv_sqrt = vec![0.0; n];
    for i in 0..n {
        let rs: f64 = a[i * n..(i + 1) * n].iter().sum();
        if rs > 0.0 {
            inv_sqrt[i] = 1.0 / libm::sqrt(rs);
        }
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = inv_sqrt[i] * a[i * n + j] * inv_sqrt[j];
        }
    }
    out
}

fn bad(op: &'static str, detail: String) -> TensorError {
    TensorError::Incompatible { op, detail }
}

/// Spatial graph convolution: `sum_p  A_p_norm · X · W_p`, aggregating joints
/// through each normalized partition and mixing channels through its weight
/// matrix. `x` is `[c_in, t, n]` or batched `[b, c_in, t, n]`; each weight is
/// `[c_in, c_out]`.
pub fn spatial_gcn(
    tape: &mut Tape,
    x: TensorId,
    graph: &SpatialGraph,
    weights: &[TensorId; PARTITIONS],
) -> Result<TensorId, TensorError> {
    let rank = tape.shape(x).len();
    if rank != 3 && rank != 4 {
        return Err(bad(
            "spatial_gcn",
            format!("input must be [c,t,n] or [b,c,t,n], got rank {}", rank),
        ));
    }
    let n = *tape.shape(x).last().unwrap();
    if n != graph.joints {
        return Err(bad(
            "spatial_gcn",
            format!("input has {} joints but graph has {}", n, graph.joints),
        ));
    }

    // per partition: move channels last, mix them with W_p, then aggregate
    // joints by right-multiplying with A_p^T (so rows of A_p weight joints)
    let (to_clast, to_nlast, from_clast): (&[usize], &[usize], &[usize]) = if rank == 3 {
        (&[1, 2, 0], &[0, 2, 1], &[1, 0, 2])
    } else {
        (&[0, 2, 3, 1], &[0, 1, 3, 2], &[0, 2, 1, 3])
    };
    let mut total: Option<TensorId> = None;
    for (p, w) in weights.iter().enumerate() {
        let at = transpose(&graph.normalized[p], n);
        let at = tape.constant(&[n, n], at)?;
        let h = tape.permute(x, to_clast)?;
        let h = tape.matmul(h, *w)?;
        let h = tape.permute(h, to_nlast)?;
        let h = tape.matmul(h, at)?;
        let h = tape.permute(h, from_clast)?;
        total = Some(match total {
            None => h,
            Some(acc) => tape.add(acc, h)?,
        });
    }
    Ok(total.unwrap())
}

fn transpose(m: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[j * n + i] = m[i * n + j];
        }
    }
    out
}

/// Plain strided temporal convolution over frames (the non-weighted unit).
pub fn temporal_conv_baseline(
    tape: &mut Tape,
    x: TensorId,
    w: TensorId,
    stride: usize,
) -> Result<TensorId, TensorError> {
    tape.temporal_conv(x, w, stride)
}

/// Per-tap weights from a self-similarity matrix: optionally smooth it with
/// `kernel` (odd square, same padding), then for each output frame `tau`
/// (stepped by `stride`) and tap offset `delta` read
/// `M[tau*stride, clamp(tau*stride + delta)]`. Output is `[t', taps]`.
///
/// `kernel = None` is the non-learnable ablation: raw SSM entries are used.
pub fn regina_weights(
    tape: &mut Tape,
    ssm: &SelfSimilarityMatrix,
    kernel: Option<TensorId>,
    taps: usize,
    stride: usize,
    t_layer: usize,
) -> Result<TensorId, TensorError> {
    if ssm.frames != t_layer {
        return Err(bad(
            "regina_weights",
            format!("ssm is {} frames but the layer runs at {}", ssm.frames, t_layer),
        ));
    }
    let t = ssm.frames;
    match kernel {
        Some(k) => {
            let s = tape.constant(&[1, t, t], ssm.values.clone())?;
            let m = tape.conv2d(s, k)?;
            tape.tap_gather(m, taps, stride)
        }
        None => {
            let s = tape.constant(&[t, t], ssm.values.clone())?;
            tape.tap_gather(s, taps, stride)
        }
    }
}

/// Temporal convolution with each tap sample scaled by its weight from `r`
/// (`[t', taps]`, broadcast over channels and joints).
pub fn regina_temporal_conv(
    tape: &mut Tape,
    x: TensorId,
    r: TensorId,
    w: TensorId,
    stride: usize,
) -> Result<TensorId, TensorError> {
    tape.temporal_conv_weighted(x, r, w, stride)
}

/// Subsample a self-similarity matrix to a layer's temporal length by taking
/// every `cumulative_stride`-th row and column. Hollowness and symmetry are
/// preserved (principal submatrix).
pub fn resize_ssm_for_layer(
    ssm: &SelfSimilarityMatrix,
    cumulative_stride: usize,
) -> Result<SelfSimilarityMatrix, TensorError> {
    if cumulative_stride == 0 {
        return Err(bad("resize_ssm", String::from("cumulative stride must be at least 1")));
    }
    if cumulative_stride == 1 {
        return Ok(ssm.clone());
    }
    let t = ssm.frames;
    let tp = (t + cumulative_stride - 1) / cumulative_stride;
    let mut values = vec![0.0; tp * tp];
    for p in 0..tp {
        for q in 0..tp {
            values[p * tp + q] = ssm.get(p * cumulative_stride, q * cumulative_stride);
        }
    }
    Ok(SelfSimilarityMatrix::new(tp, ssm.metric, values)
        .expect("subsampled matrix is square by construction"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use crate::skeleton::BoneTopology;
    use crate::ssm::{validate_ssm, Metric};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_close(got: &[f64], want: &[f64], tol: f64, what: &str) {
        assert_eq!(got.len(), want.len(), "{}: length mismatch", what);
        for (i, (g, w)) in got.iter().zip(want).enumerate() {
            assert!((g - w).abs() <= tol, "{}: index {} got {} want {}", what, i, g, w);
        }
    }

    #[test]
    fn single_joint_graph_is_pure_root() {
        let topo = BoneTopology::new(1, 0, vec![]).unwrap();
        let g = build_graph(&topo).unwrap();
        assert_eq!(g.partitions[0], vec![1.0]);
        assert_eq!(g.partitions[1], vec![0.0]);
        assert_eq!(g.partitions[2], vec![0.0]);
        assert_eq!(g.normalized[0], vec![1.0]);
    }

    #[test]
    fn three_joint_chain_partitions_by_hop_distance() {
        // joints 0 - 1 - 2 with the center in the middle
        let topo = BoneTopology::new(3, 1, vec![(1, 0), (1, 2)]).unwrap();
        let g = build_graph(&topo).unwrap();
        let n = 3;
        // ends see the middle as centripetal
        assert_eq!(g.partitions[1][n + 1], 0.0, "middle row stays out of centripetal");
        assert_eq!(g.partitions[1][1], 1.0, "entry (0,1)");
        assert_eq!(g.partitions[1][2 * n + 1], 1.0, "entry (2,1)");
        // the middle sees both ends as centrifugal
        assert_eq!(g.partitions[2][n], 1.0, "entry (1,0)");
        assert_eq!(g.partitions[2][n + 2], 1.0, "entry (1,2)");
        assert_eq!(g.partitions[1].iter().sum::<f64>(), 2.0);
        assert_eq!(g.partitions[2].iter().sum::<f64>(), 2.0);
    }

    #[test]
    fn partitions_sum_to_adjacency_plus_identity() {
        for topo in [BoneTopology::synthetic9(), BoneTopology::ntu25()] {
            let g = build_graph(&topo).unwrap();
            let n = topo.joints;
            let mut want = vec![0.0; n * n];
            for i in 0..n {
                want[i * n + i] = 1.0;
            }
            for &(a, b) in &topo.edges {
                want[a * n + b] = 1.0;
                want[b * n + a] = 1.0;
            }
            let mut got = vec![0.0; n * n];
            for p in &g.partitions {
                for (o, v) in got.iter_mut().zip(p) {
                    *o += v;
                }
            }
            assert_eq!(got, want, "topology with {} joints", n);
        }
    }

    #[test]
    fn normalize_identity_and_single_edge() {
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        assert_eq!(normalize_adjacency(&eye, 2), eye);
        let edge = vec![0.0, 1.0, 1.0, 0.0];
        assert_eq!(normalize_adjacency(&edge, 2), edge);
    }

    #[test]
    fn normalize_three_node_star_gives_inverse_sqrt_two() {
        let a = vec![0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let out = normalize_adjacency(&a, 3);
        let w = 1.0 / libm::sqrt(2.0);
        let want = vec![0.0, w, w, w, 0.0, 0.0, w, 0.0, 0.0];
        assert_close(&out, &want, 1e-12, "star normalization");
    }

    #[test]
    fn normalize_maps_zero_degree_rows_to_zero() {
        let a = vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let out = normalize_adjacency(&a, 3);
        assert_eq!(&out[3..6], &[0.0, 0.0, 0.0]);
        assert_eq!(out[2], 1.0);
        assert_eq!(out[6], 1.0);
    }

    #[test]
    fn normalized_full_graph_spectral_radius_is_bounded() {
        for topo in [BoneTopology::synthetic9(), BoneTopology::ntu25()] {
            let n = topo.joints;
            let mut a = vec![0.0; n * n];
            for i in 0..n {
                a[i * n + i] = 1.0;
            }
            for &(s, t) in &topo.edges {
                a[s * n + t] = 1.0;
                a[t * n + s] = 1.0;
            }
            let norm = normalize_adjacency(&a, n);
            let rho = reference::spectral_radius(&norm, n, 300);
            assert!(rho <= 1.0 + 1e-9, "{} joints: spectral radius {}", n, rho);
        }
    }

    #[test]
    fn matches_reference_on_small_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..20 {
            let n = rng.gen_range(1..=4);
            let t = rng.gen_range(1..=6);
            let c_in = rng.gen_range(1..=3);
            let c_out = rng.gen_range(1..=3);
            // random symmetric 0/1 adjacency split arbitrarily into 3 parts
            let mut parts = [vec![0.0; n * n], vec![0.0; n * n], vec![0.0; n * n]];
            for i in 0..n {
                parts[0][i * n + i] = 1.0;
                for j in (i + 1)..n {
                    if rng.gen_bool(0.6) {
                        let p = rng.gen_range(1..=2);
                        parts[p][i * n + j] = 1.0;
                        parts[p][j * n + i] = 1.0;
                    }
                }
            }
            let normalized = [
                normalize_adjacency(&parts[0], n),
                normalize_adjacency(&parts[1], n),
                normalize_adjacency(&parts[2], n),
            ];
            let graph = SpatialGraph {
                joints: n,
                center: 0,
                partitions: parts,
                normalized: normalized.clone(),
            };
            let xdata: Vec<f64> = (0..c_in * t * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let wdata: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..c_in * c_out).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();

            let mut tape = Tape::new();
            let x = tape.constant(&[c_in, t, n], xdata.clone()).unwrap();
            let ws = [
                tape.param(&[c_in, c_out], wdata[0].clone()).unwrap(),
                tape.param(&[c_in, c_out], wdata[1].clone()).unwrap(),
                tape.param(&[c_in, c_out], wdata[2].clone()).unwrap(),
            ];
            let y = spatial_gcn(&mut tape, x, &graph, &ws).unwrap();
            assert_eq!(tape.shape(y), &[c_out, t, n]);

            let a_ref: Vec<Vec<f64>> = normalized.to_vec();
            let want = reference::naive_spatial_gcn(&xdata, c_in, t, n, &a_ref, &wdata, c_out);
            assert_close(tape.data(y), &want, 1e-12, &format!("case {}", case));
        }
    }

    #[test]
    fn batched_input_matches_per_sample_results() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (b, c_in, c_out, t, n) = (3, 2, 4, 5, 9);
        let graph = build_graph(&BoneTopology::synthetic9()).unwrap();
        let xdata: Vec<f64> = (0..b * c_in * t * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wdata: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..c_in * c_out).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();

        let mut tape = Tape::new();
        let x = tape.constant(&[b, c_in, t, n], xdata.clone()).unwrap();
        let ws = [
            tape.param(&[c_in, c_out], wdata[0].clone()).unwrap(),
            tape.param(&[c_in, c_out], wdata[1].clone()).unwrap(),
            tape.param(&[c_in, c_out], wdata[2].clone()).unwrap(),
        ];
        let y = spatial_gcn(&mut tape, x, &graph, &ws).unwrap();
        assert_eq!(tape.shape(y), &[b, c_out, t, n]);
        let per = c_in * t * n;
        let out_per = c_out * t * n;
        for s in 0..b {
            let mut tape1 = Tape::new();
            let x1 = tape1.constant(&[c_in, t, n], xdata[s * per..(s + 1) * per].to_vec()).unwrap();
            let ws1 = [
                tape1.param(&[c_in, c_out], wdata[0].clone()).unwrap(),
                tape1.param(&[c_in, c_out], wdata[1].clone()).unwrap(),
                tape1.param(&[c_in, c_out], wdata[2].clone()).unwrap(),
            ];
            let y1 = spatial_gcn(&mut tape1, x1, &graph, &ws1).unwrap();
            assert_eq!(
                &tape.data(y)[s * out_per..(s + 1) * out_per],
                tape1.data(y1),
                "sample {}",
                s
            );
        }
    }

    #[test]
    fn identity_graph_with_identity_weights_is_identity() {
        let topo = BoneTopology::new(1, 0, vec![]).unwrap();
        let graph = build_graph(&topo).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(&[2, 3, 1], vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.5]).unwrap();
        let eye = tape.param(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let zero = tape.param(&[2, 2], vec![0.0; 4]).unwrap();
        let y = spatial_gcn(&mut tape, x, &graph, &[eye, zero, zero]).unwrap();
        assert_eq!(tape.data(y), tape.data(x));
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let graph = build_graph(&BoneTopology::synthetic9()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(&[1, 2, 9], vec![0.7; 18]).unwrap();
        let zero = tape.param(&[1, 2], vec![0.0, 0.0]).unwrap();
        let y = spatial_gcn(&mut tape, x, &graph, &[zero, zero, zero]).unwrap();
        assert!(tape.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spatial_gcn_rejects_joint_mismatch() {
        let graph = build_graph(&BoneTopology::synthetic9()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(&[1, 2, 5], vec![0.0; 10]).unwrap();
        let w = tape.param(&[1, 1], vec![1.0]).unwrap();
        assert!(spatial_gcn(&mut tape, x, &graph, &[w, w, w]).is_err());
    }

    #[test]
    fn spatial_gcn_gradients_match_finite_differences() {
        let graph = build_graph(&BoneTopology::new(3, 1, vec![(1, 0), (1, 2)]).unwrap()).unwrap();
        let run = |p: &[Vec<f64>]| -> Result<(f64, Vec<Vec<f64>>), TensorError> {
            let mut tape = Tape::new();
            let x = tape.constant(&[2, 3, 3], (0..18).map(|i| ((i as f64) * 0.53).sin()).collect())?;
            let ws = [
                tape.param(&[2, 2], p[0].clone())?,
                tape.param(&[2, 2], p[1].clone())?,
                tape.param(&[2, 2], p[2].clone())?,
            ];
            let y = spatial_gcn(&mut tape, x, &graph, &ws)?;
            let y2 = tape.hadamard(y, y)?;
            let loss = tape.mean(y2, &[0, 1, 2])?;
            tape.backward(loss)?;
            Ok((
                tape.data(loss)[0],
                ws.iter().map(|&w| tape.grad(w).unwrap().to_vec()).collect(),
            ))
        };
        let mut params: Vec<Vec<f64>> = (0..3)
            .map(|p| (0..4).map(|i| 0.3 * ((p * 4 + i) as f64 + 0.7).cos()).collect())
            .collect();
        let (_, analytic) = run(&params).unwrap();
        let err = crate::tensor::grad_check(|p| run(p).map(|(l, _)| l), &mut params, &analytic, 1e-5).unwrap();
        assert!(err < 1e-7, "spatial gcn grad err {}", err);
    }

    fn hollow_ssm(t: usize, scale: f64) -> SelfSimilarityMatrix {
        let mut values = vec![0.0; t * t];
        for p in 0..t {
            for q in 0..t {
                values[p * t + q] = (p as f64 - q as f64).abs() * scale;
            }
        }
        SelfSimilarityMatrix::new(t, Metric::L2, values).unwrap()
    }

    #[test]
    fn unit_kernel_reads_raw_ssm_entries() {
        let ssm = hollow_ssm(5, 0.25);
        let mut tape = Tape::new();
        let k = tape.param(&[1, 1], vec![1.0]).unwrap();
        let r = regina_weights(&mut tape, &ssm, Some(k), 3, 1, 5).unwrap();
        // interior rows: |tau - (tau+delta)| * 0.25 = {0.25, 0, 0.25}
        assert_eq!(tape.data(r)[3..6], [0.25, 0.0, 0.25]);
        // the diagonal tap always reads the hollow diagonal
        for tau in 0..5 {
            assert_eq!(tape.data(r)[tau * 3 + 1], 0.0, "diagonal tap at {}", tau);
        }
        // kernel-free ablation path gives the same numbers
        let mut tape2 = Tape::new();
        let raw = regina_weights(&mut tape2, &ssm, None, 3, 1, 5).unwrap();
        assert_eq!(tape.data(r), tape2.data(raw));
    }

    #[test]
    fn regina_weights_match_reference_with_smoothing() {
        let ssm = hollow_ssm(6, 0.5);
        let kdata = vec![0.1, 0.2, 0.1, 0.2, 0.8, 0.2, 0.1, 0.2, 0.1];
        let mut tape = Tape::new();
        let k = tape.param(&[3, 3], kdata.clone()).unwrap();
        let r = regina_weights(&mut tape, &ssm, Some(k), 5, 2, 6).unwrap();
        assert_eq!(tape.shape(r), &[3, 5]);
        let want = reference::naive_tap_weights(&ssm.values, 6, Some((&kdata, 3)), 5, 2);
        assert_close(tape.data(r), &want, 1e-12, "smoothed tap weights");
    }

    #[test]
    fn regina_weights_reject_length_mismatch() {
        let ssm = hollow_ssm(4, 1.0);
        let mut tape = Tape::new();
        assert!(regina_weights(&mut tape, &ssm, None, 3, 1, 8).is_err());
    }

    #[test]
    fn tap_weights_are_bilinear_in_ssm_and_kernel() {
        // scaling the SSM up and the kernel down by the same power of two
        // must leave the weights bit-identical
        let ssm = hollow_ssm(6, 0.5);
        let scaled = hollow_ssm(6, 0.5 * 4.0);
        let kdata = vec![0.5, -0.25, 0.125, 0.0, 1.0, 0.25, -0.5, 0.75, 0.0625];
        let kscaled: Vec<f64> = kdata.iter().map(|v| v / 4.0).collect();
        let mut tape = Tape::new();
        let k = tape.param(&[3, 3], kdata).unwrap();
        let r = regina_weights(&mut tape, &ssm, Some(k), 3, 1, 6).unwrap();
        let mut tape2 = Tape::new();
        let k2 = tape2.param(&[3, 3], kscaled).unwrap();
        let r2 = regina_weights(&mut tape2, &scaled, Some(k2), 3, 1, 6).unwrap();
        assert_eq!(tape.data(r), tape2.data(r2));
    }

    #[test]
    fn weighted_unit_with_all_ones_matches_baseline() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for case in 0..10 {
            let (c_in, c_out) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let t = rng.gen_range(2..=8);
            let n = rng.gen_range(1..=4);
            let stride = rng.gen_range(1..=2);
            let taps = [1, 3, 5][rng.gen_range(0..3)];
            let tp = (t + stride - 1) / stride;
            let xdata: Vec<f64> = (0..c_in * t * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let wdata: Vec<f64> = (0..c_out * c_in * taps).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let mut tape = Tape::new();
            let x = tape.constant(&[c_in, t, n], xdata.clone()).unwrap();
            let w = tape.param(&[c_out, c_in, taps], wdata.clone()).unwrap();
            let ones = tape.constant(&[tp, taps], vec![1.0; tp * taps]).unwrap();
            let weighted = regina_temporal_conv(&mut tape, x, ones, w, stride).unwrap();

            let mut tape2 = Tape::new();
            let x2 = tape2.constant(&[c_in, t, n], xdata).unwrap();
            let w2 = tape2.param(&[c_out, c_in, taps], wdata).unwrap();
            let plain = temporal_conv_baseline(&mut tape2, x2, w2, stride).unwrap();

            assert_eq!(tape.data(weighted), tape2.data(plain), "case {}", case);
        }
    }

    #[test]
    fn weighted_unit_with_zeros_annihilates() {
        let mut tape = Tape::new();
        let x = tape.constant(&[2, 4, 3], vec![1.0; 24]).unwrap();
        let w = tape.param(&[2, 2, 3], vec![0.5; 12]).unwrap();
        let zeros = tape.constant(&[4, 3], vec![0.0; 12]).unwrap();
        let y = regina_temporal_conv(&mut tape, x, zeros, w, 1).unwrap();
        assert!(tape.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weighted_unit_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for case in 0..10 {
            let (c_in, c_out, t, n, taps, stride) = (2, 2, 3, 2, 3, 1);
            let _ = case;
            let xdata: Vec<f64> = (0..c_in * t * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let wdata: Vec<f64> = (0..c_out * c_in * taps).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let rdata: Vec<f64> = (0..t * taps).map(|_| rng.gen_range(0.0..2.0)).collect();
            let mut tape = Tape::new();
            let x = tape.constant(&[c_in, t, n], xdata.clone()).unwrap();
            let w = tape.param(&[c_out, c_in, taps], wdata.clone()).unwrap();
            let r = tape.constant(&[t, taps], rdata.clone()).unwrap();
            let y = regina_temporal_conv(&mut tape, x, r, w, stride).unwrap();
            let want = reference::naive_temporal_conv(
                &xdata, c_in, t, n, &wdata, c_out, taps, stride, Some(&rdata),
            );
            assert_close(tape.data(y), &want, 1e-12, "weighted unit vs loops");
        }
    }

    #[test]
    fn resize_is_identity_at_stride_one_and_subsamples_at_two() {
        let ssm = hollow_ssm(8, 0.5);
        assert_eq!(resize_ssm_for_layer(&ssm, 1).unwrap(), ssm);
        let half = resize_ssm_for_layer(&ssm, 2).unwrap();
        assert_eq!(half.frames, 4);
        for p in 0..4 {
            for q in 0..4 {
                assert_eq!(half.get(p, q), ssm.get(2 * p, 2 * q));
            }
        }
        assert!(validate_ssm(&half).is_empty(), "subsampling keeps structure");
        assert!(resize_ssm_for_layer(&ssm, 0).is_err());
    }

    #[test]
    fn end_to_end_block_gradients_match_finite_differences() {
        // spatial + weighted temporal unit, differentiating through the
        // smoothing kernel as well
        let graph = build_graph(&BoneTopology::new(3, 1, vec![(1, 0), (1, 2)]).unwrap()).unwrap();
        let ssm = hollow_ssm(6, 0.4);
        let run = |p: &[Vec<f64>]| -> Result<(f64, Vec<Vec<f64>>), TensorError> {
            let mut tape = Tape::new();
            let x = tape.constant(&[2, 6, 3], (0..36).map(|i| ((i as f64) * 0.37).sin()).collect())?;
            let ws = [
                tape.param(&[2, 2], p[0].clone())?,
                tape.param(&[2, 2], p[1].clone())?,
                tape.param(&[2, 2], p[2].clone())?,
            ];
            let wt = tape.param(&[2, 2, 3], p[3].clone())?;
            let kernel = tape.param(&[3, 3], p[4].clone())?;
            let h = spatial_gcn(&mut tape, x, &graph, &ws)?;
            let r = regina_weights(&mut tape, &ssm, Some(kernel), 3, 2, 6)?;
            let y = regina_temporal_conv(&mut tape, h, r, wt, 2)?;
            let y2 = tape.hadamard(y, y)?;
            let loss = tape.mean(y2, &[0, 1, 2])?;
            tape.backward(loss)?;
            let ids = [ws[0], ws[1], ws[2], wt, kernel];
            Ok((
                tape.data(loss)[0],
                ids.iter().map(|&id| tape.grad(id).unwrap().to_vec()).collect(),
            ))
        };
        let mut params: Vec<Vec<f64>> = vec![
            (0..4).map(|i| 0.4 * ((i as f64) * 1.1).cos()).collect(),
            (0..4).map(|i| 0.4 * ((i as f64) * 1.7).sin()).collect(),
            (0..4).map(|i| 0.3 * ((i as f64) + 0.2).cos()).collect(),
            (0..12).map(|i| 0.25 * ((i as f64) * 0.9).sin()).collect(),
            {
                let mut k = vec![0.0; 9];
                k[4] = 1.0;
                k
            },
        ];
        let (_, analytic) = run(&params).unwrap();
        let err = crate::tensor::grad_check(|p| run(p).map(|(l, _)| l), &mut params, &analytic, 1e-5).unwrap();
        assert!(err < 1e-6, "block grad err {}", err);
    }
}
