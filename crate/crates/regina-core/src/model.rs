//! Network assembly: a stack of spatial-temporal blocks over the skeleton
//! graph, a pooled affine head, deterministic parameter initialization,
//! checkpoint state, and evaluation metrics.
//!
//! Every parameter is owned by the model under a stable name and staged onto
//! a fresh tape per forward pass. Initialization draws each parameter from
//! its own seed stream keyed by name, so two models built from the same seed
//! share bit-identical values for every parameter name they have in common,
//! regardless of which extra parameters either of them owns.

use crate::graph::{
    build_graph, regina_temporal_conv, regina_weights, resize_ssm_for_layer, spatial_gcn,
    temporal_conv_baseline, ReginaConfig, SpatialGraph, PARTITIONS,
};
use crate::skeleton::{BoneTopology, SkeletonError, SkeletonSequence};
use crate::ssm::SelfSimilarityMatrix;
use crate::synth::mix_seed;
use crate::tensor::{BnMode, BnStats, Tape, TensorError, TensorId};
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("block {block}: c_in {got} does not chain from previous c_out {expect}")]
    ChannelChain { block: usize, expect: usize, got: usize },
    #[error("bad input: {0}")]
    Input(String),
    #[error("sequence needs a self-similarity matrix when the weighting is enabled")]
    MissingSsm,
    #[error("checkpoint state: {0}")]
    State(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
}

/// One spatial+temporal block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockConfig {
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Input coordinate channels (3 for x, y, z).
    pub dims: usize,
    /// Joint count n.
    pub joints: usize,
    /// Temporal length T every sequence is normalized to.
    pub temporal: usize,
    pub num_classes: usize,
    /// Tap count of every temporal convolution. Odd.
    pub temporal_kernel: usize,
    pub blocks: Vec<BlockConfig>,
    pub regina: ReginaConfig,
}

impl ModelConfig {
    /// Desk-scale default: 3 blocks (3->16, 16->32 strided, 32->64) on the
    /// 9-joint skeleton at 64 frames.
    pub fn desk(num_classes: usize) -> Self {
        ModelConfig {
            dims: 3,
            joints: 9,
            temporal: 64,
            num_classes,
            temporal_kernel: 9,
            blocks: vec![
                BlockConfig { c_in: 3, c_out: 16, stride: 1 },
                BlockConfig { c_in: 16, c_out: 32, stride: 2 },
                BlockConfig { c_in: 32, c_out: 64, stride: 1 },
            ],
            regina: ReginaConfig::default(),
        }
    }

    /// Gradient-check scale: 4 joints, 8 frames, two thin blocks (the second
    /// carries the residual path).
    pub fn tiny(num_classes: usize) -> Self {
        ModelConfig {
            dims: 3,
            joints: 4,
            temporal: 8,
            num_classes,
            temporal_kernel: 5,
            blocks: vec![
                BlockConfig { c_in: 3, c_out: 6, stride: 1 },
                BlockConfig { c_in: 6, c_out: 6, stride: 1 },
            ],
            regina: ReginaConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let cfg = |msg: String| Err(ModelError::Config(msg));
        if self.dims == 0 || self.joints == 0 || self.temporal == 0 {
            return cfg(format!(
                "dims/joints/temporal must be positive, got {}/{}/{}",
                self.dims, self.joints, self.temporal
            ));
        }
        if self.num_classes < 2 {
            return cfg(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.temporal_kernel % 2 == 0 || self.temporal_kernel == 0 {
            return cfg(format!("temporal kernel must be odd, got {}", self.temporal_kernel));
        }
        if self.blocks.is_empty() {
            return cfg(String::from("need at least one block"));
        }
        let mut expect = self.dims;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.c_in != expect {
                return Err(ModelError::ChannelChain { block: i, expect, got: b.c_in });
            }
            if b.c_out == 0 {
                return cfg(format!("block {}: c_out must be positive", i));
            }
            if b.stride != 1 && b.stride != 2 {
                return cfg(format!("block {}: stride must be 1 or 2, got {}", i, b.stride));
            }
            expect = b.c_out;
        }
        self.regina.validate()?;
        Ok(())
    }

    fn uses_kernel(&self) -> bool {
        self.regina.enabled && self.regina.learnable_conv && !self.regina.force_ones
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Param {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// One sample of a forward batch.
pub struct BatchItem<'a> {
    pub sequence: &'a SkeletonSequence,
    pub ssm: Option<&'a SelfSimilarityMatrix>,
}

/// Handle to a staged forward pass: the logits tensor plus the tape ids of
/// every trainable parameter, for reading gradients after backward.
pub struct ForwardPass {
    pub logits: TensorId,
    pub param_ids: BTreeMap<String, TensorId>,
}

/// Full parameter-and-statistics snapshot for persistence.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointState {
    pub entries: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

pub struct Model {
    pub config: ModelConfig,
    pub graph: SpatialGraph,
    params: BTreeMap<String, Param>,
    stats: BTreeMap<String, BnStats>,
}

impl Model {
    /// Build and initialize a model. The topology must match the configured
    /// joint count.
    pub fn new(config: ModelConfig, topology: &BoneTopology, seed: u64) -> Result<Model, ModelError> {
        config.validate()?;
        if topology.joints != config.joints {
            return Err(ModelError::Input(format!(
                "topology has {} joints but config wants {}",
                topology.joints, config.joints
            )));
        }
        let graph = build_graph(topology)?;

        let mut params = BTreeMap::new();
        let mut stats = BTreeMap::new();
        let k = config.regina.kernel_size;
        for (i, b) in config.blocks.iter().enumerate() {
            for p in 0..PARTITIONS {
                let name = format!("block{}.spatial.w{}", i, p);
                let init = uniform_init(seed, &name, &[b.c_in, b.c_out], b.c_in);
                params.insert(name, init);
            }
            params.insert(format!("block{}.norm1.gamma", i), ones(&[b.c_out]));
            params.insert(format!("block{}.norm1.beta", i), zeros(&[b.c_out]));
            stats.insert(format!("block{}.norm1", i), BnStats::new(b.c_out));
            let name = format!("block{}.temporal.w", i);
            let shape = [b.c_out, b.c_out, config.temporal_kernel];
            let init = uniform_init(seed, &name, &shape, b.c_out * config.temporal_kernel);
            params.insert(name, init);
            params.insert(format!("block{}.norm2.gamma", i), ones(&[b.c_out]));
            params.insert(format!("block{}.norm2.beta", i), zeros(&[b.c_out]));
            stats.insert(format!("block{}.norm2", i), BnStats::new(b.c_out));
            if config.uses_kernel() && !config.regina.shared_kernel {
                let name = format!("block{}.taps.kernel", i);
                let init = near_identity_kernel(seed, &name, k);
                params.insert(name, init);
            }
        }
        if config.uses_kernel() && config.regina.shared_kernel {
            let init = near_identity_kernel(seed, "taps.kernel", k);
            params.insert(String::from("taps.kernel"), init);
        }
        let c_last = config.blocks.last().unwrap().c_out;
        let name = "head.w";
        let init = uniform_init(seed, name, &[c_last, config.num_classes], c_last);
        params.insert(String::from(name), init);
        params.insert(String::from("head.b"), zeros(&[config.num_classes]));

        Ok(Model { config, graph, params, stats })
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }

    pub fn param_shape(&self, name: &str) -> Option<&[usize]> {
        self.params.get(name).map(|p| p.shape.as_slice())
    }

    pub fn param_values(&self, name: &str) -> Option<&[f64]> {
        self.params.get(name).map(|p| p.data.as_slice())
    }

    pub(crate) fn param_values_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.params.get_mut(name).map(|p| &mut p.data)
    }

    /// Overwrite one parameter's values (external drivers such as the
    /// gradient checker). The length must match the declared shape.
    pub fn set_param(&mut self, name: &str, values: Vec<f64>) -> Result<(), ModelError> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| ModelError::State(format!("unknown parameter '{}'", name)))?;
        if values.len() != p.data.len() {
            return Err(ModelError::State(format!(
                "parameter '{}' takes {} values, got {}",
                name,
                p.data.len(),
                values.len()
            )));
        }
        p.data = values;
        Ok(())
    }

    /// Everything that must persist: trainable parameters plus batch-norm
    /// running statistics (as `<norm>.running_mean` / `.running_var`).
    pub fn export_state(&self) -> CheckpointState {
        let mut entries = BTreeMap::new();
        for (name, p) in &self.params {
            entries.insert(name.clone(), (p.shape.clone(), p.data.clone()));
        }
        for (name, s) in &self.stats {
            entries.insert(
                format!("{}.running_mean", name),
                (vec![s.mean.len()], s.mean.clone()),
            );
            entries.insert(
                format!("{}.running_var", name),
                (vec![s.var.len()], s.var.clone()),
            );
        }
        CheckpointState { entries }
    }

    /// Restore a snapshot. Every model entry must be present with the right
    /// shape and no unknown names may appear.
    pub fn import_state(&mut self, state: &CheckpointState) -> Result<(), ModelError> {
        let want = self.export_state();
        for name in want.entries.keys() {
            if !state.entries.contains_key(name) {
                return Err(ModelError::State(format!("missing entry '{}'", name)));
            }
        }
        for (name, (shape, data)) in &state.entries {
            let (want_shape, _) = want
                .entries
                .get(name)
                .ok_or_else(|| ModelError::State(format!("unknown entry '{}'", name)))?;
            if shape != want_shape {
                return Err(ModelError::State(format!(
                    "entry '{}' has shape {:?}, expected {:?}",
                    name, shape, want_shape
                )));
            }
            let numel: usize = shape.iter().product();
            if data.len() != numel {
                return Err(ModelError::State(format!(
                    "entry '{}' has {} values for shape {:?}",
                    name, data.len(), shape
                )));
            }
            if let Some(suffix) = name.strip_suffix(".running_mean") {
                self.stats.get_mut(suffix).unwrap().mean = data.clone();
            } else if let Some(suffix) = name.strip_suffix(".running_var") {
                self.stats.get_mut(suffix).unwrap().var = data.clone();
            } else {
                self.params.get_mut(name).unwrap().data = data.clone();
            }
        }
        Ok(())
    }

    /// Stage the batch and every parameter onto the tape and run the block
    /// stack. Returns logits `[batch, classes]`.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        batch: &[BatchItem],
        mode: BnMode,
    ) -> Result<ForwardPass, ModelError> {
        let cfg = &self.config;
        if batch.is_empty() {
            return Err(ModelError::Input(String::from("empty batch")));
        }
        let needs_ssm = cfg.regina.enabled && !cfg.regina.force_ones;
        for (s, item) in batch.iter().enumerate() {
            let seq = item.sequence;
            if seq.joints != cfg.joints || seq.frames != cfg.temporal || seq.dims != cfg.dims {
                return Err(ModelError::Input(format!(
                    "sample {}: sequence is {}x{}x{}, model wants {}x{}x{}",
                    s, seq.joints, seq.frames, seq.dims, cfg.joints, cfg.temporal, cfg.dims
                )));
            }
            match item.ssm {
                Some(ssm) if ssm.frames != cfg.temporal => {
                    return Err(ModelError::Input(format!(
                        "sample {}: ssm has {} frames, model wants {}",
                        s, ssm.frames, cfg.temporal
                    )));
                }
                None if needs_ssm => return Err(ModelError::MissingSsm),
                _ => {}
            }
        }

        let mut param_ids = BTreeMap::new();
        for (name, p) in &self.params {
            let id = tape.param(&p.shape, p.data.clone())?;
            param_ids.insert(name.clone(), id);
        }
        let pid = |name: &str| -> TensorId { param_ids[name] };

        let (b, c, t, n) = (batch.len(), cfg.dims, cfg.temporal, cfg.joints);
        let mut xdata = vec![0.0; b * c * t * n];
        for (s, item) in batch.iter().enumerate() {
            let seq = item.sequence;
            for j in 0..n {
                for f in 0..t {
                    let src = (j * t + f) * c;
                    for d in 0..c {
                        xdata[((s * c + d) * t + f) * n + j] = seq.data[src + d];
                    }
                }
            }
        }
        let mut h = tape.constant(&[b, c, t, n], xdata)?;

        let mut t_cur = t;
        let mut cum_stride = 1;
        let blocks = cfg.blocks.clone();
        for (i, blk) in blocks.iter().enumerate() {
            let block_in = h;
            let ws = [
                pid(&format!("block{}.spatial.w0", i)),
                pid(&format!("block{}.spatial.w1", i)),
                pid(&format!("block{}.spatial.w2", i)),
            ];
            h = spatial_gcn(tape, h, &self.graph, &ws)?;
            let gamma = pid(&format!("block{}.norm1.gamma", i));
            let beta = pid(&format!("block{}.norm1.beta", i));
            let stats = self.stats.get_mut(&format!("block{}.norm1", i)).unwrap();
            h = tape.batch_norm(h, gamma, beta, stats, 1, mode)?;
            h = tape.relu(h)?;

            let wt = pid(&format!("block{}.temporal.w", i));
            let tp = (t_cur + blk.stride - 1) / blk.stride;
            if cfg.regina.enabled {
                let r = if cfg.regina.force_ones {
                    let taps = cfg.temporal_kernel;
                    tape.constant(&[b, tp, taps], vec![1.0; b * tp * taps])?
                } else {
                    let kernel = if cfg.regina.learnable_conv {
                        Some(if cfg.regina.shared_kernel {
                            pid("taps.kernel")
                        } else {
                            pid(&format!("block{}.taps.kernel", i))
                        })
                    } else {
                        None
                    };
                    let mut rows = Vec::with_capacity(b);
                    for item in batch {
                        let ssm = item.ssm.expect("checked above");
                        let layer = resize_ssm_for_layer(ssm, cum_stride)?;
                        rows.push(regina_weights(
                            tape,
                            &layer,
                            kernel,
                            cfg.temporal_kernel,
                            blk.stride,
                            t_cur,
                        )?);
                    }
                    tape.stack(&rows)?
                };
                h = regina_temporal_conv(tape, h, r, wt, blk.stride)?;
            } else {
                h = temporal_conv_baseline(tape, h, wt, blk.stride)?;
            }
            let gamma = pid(&format!("block{}.norm2.gamma", i));
            let beta = pid(&format!("block{}.norm2.beta", i));
            let stats = self.stats.get_mut(&format!("block{}.norm2", i)).unwrap();
            h = tape.batch_norm(h, gamma, beta, stats, 1, mode)?;
            h = tape.relu(h)?;
            if blk.c_in == blk.c_out && blk.stride == 1 {
                h = tape.add(h, block_in)?;
            }
            t_cur = tp;
            cum_stride *= blk.stride;
        }

        let pooled = tape.mean(h, &[2, 3])?;
        let logits = tape.matmul(pooled, pid("head.w"))?;
        let logits = tape.add(logits, pid("head.b"))?;
        Ok(ForwardPass { logits, param_ids })
    }

    /// Write tape gradients back into a name-keyed map (used by the trainer
    /// and the gradient checker).
    pub fn gradients(&self, tape: &Tape, pass: &ForwardPass) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (name, &id) in &pass.param_ids {
            let grad = tape
                .grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; self.params[name].data.len()]);
            out.insert(name.clone(), grad);
        }
        out
    }

}

fn zeros(shape: &[usize]) -> Param {
    Param {
        shape: shape.to_vec(),
        data: vec![0.0; shape.iter().product()],
    }
}

fn ones(shape: &[usize]) -> Param {
    Param {
        shape: shape.to_vec(),
        data: vec![1.0; shape.iter().product()],
    }
}

/// Fan-in scaled uniform init on the parameter's own named stream.
fn uniform_init(seed: u64, name: &str, shape: &[usize], fan_in: usize) -> Param {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, name, &[]));
    let bound = 1.0 / libm::sqrt(fan_in as f64);
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Param { shape: shape.to_vec(), data }
}

/// Identity-like kernel (center 1, elsewhere 0) plus uniform noise of 0.01,
/// so training starts close to raw self-similarity weighting.
fn near_identity_kernel(seed: u64, name: &str, k: usize) -> Param {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, name, &[]));
    let mut data = vec![0.0; k * k];
    data[(k / 2) * k + (k / 2)] = 1.0;
    for v in data.iter_mut() {
        *v += rng.gen_range(-0.01..0.01);
    }
    Param { shape: vec![k, k], data }
}

/// Evaluation metrics over a scored split.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub top1: f64,
    pub top5: f64,
    /// Per-class accuracy; NaN-free (classes without samples report 0).
    pub per_class: Vec<f64>,
    /// Confusion counts, `confusion[true_class][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Rank of `class` within one score row under the deterministic tie rule:
/// ties are broken toward the lower class index.
fn rank_of(scores: &[f64], class: usize) -> usize {
    let target = scores[class];
    let mut rank = 0;
    for (c, &s) in scores.iter().enumerate() {
        if s > target || (s == target && c < class) {
            rank += 1;
        }
    }
    rank
}

/// Argmax with ties broken toward the lower class index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (c, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = c;
        }
    }
    best
}

/// Compute Top-1/Top-5, per-class accuracy, and the confusion matrix from
/// per-sample score rows.
pub fn metrics_from_scores(
    scores: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
) -> Result<Metrics, ModelError> {
    if scores.len() != labels.len() {
        return Err(ModelError::Input(format!(
            "{} score rows for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(ModelError::Input(String::from("empty evaluation split")));
    }
    let mut top1 = 0usize;
    let mut top5 = 0usize;
    let mut per_class_hit = vec![0usize; classes];
    let mut per_class_count = vec![0usize; classes];
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (row, &label) in scores.iter().zip(labels) {
        if row.len() != classes {
            return Err(ModelError::Input(format!(
                "score row has {} entries for {} classes",
                row.len(),
                classes
            )));
        }
        if label >= classes {
            return Err(ModelError::Input(format!("label {} out of range", label)));
        }
        let rank = rank_of(row, label);
        let pred = argmax(row);
        confusion[label][pred] += 1;
        per_class_count[label] += 1;
        if rank < 1 {
            top1 += 1;
            per_class_hit[label] += 1;
        }
        if rank < 5 {
            top5 += 1;
        }
    }
    let total = scores.len() as f64;
    let per_class = per_class_hit
        .iter()
        .zip(&per_class_count)
        .map(|(&h, &c)| if c == 0 { 0.0 } else { h as f64 / c as f64 })
        .collect();
    Ok(Metrics {
        top1: top1 as f64 / total,
        top5: top5 as f64 / total,
        per_class,
        confusion,
    })
}

/// Two-stream fusion: validate both score sets as probability rows, add them
/// elementwise, and take the per-sample argmax.
pub fn fuse_scores(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Vec<usize>, ModelError> {
    if a.len() != b.len() {
        return Err(ModelError::Input(format!(
            "stream sizes differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let check = |rows: &[Vec<f64>], tag: &str| -> Result<(), ModelError> {
        for (i, row) in rows.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if libm::fabs(sum - 1.0) > 1e-6 || row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(ModelError::Input(format!(
                    "{} row {} is not a probability distribution (sum {})",
                    tag, i, sum
                )));
            }
        }
        Ok(())
    };
    check(a, "first stream")?;
    check(b, "second stream")?;
    let mut out = Vec::with_capacity(a.len());
    for (ra, rb) in a.iter().zip(b) {
        if ra.len() != rb.len() {
            return Err(ModelError::Input(format!(
                "row widths differ: {} vs {}",
                ra.len(),
                rb.len()
            )));
        }
        let fused: Vec<f64> = ra.iter().zip(rb).map(|(x, y)| x + y).collect();
        out.push(argmax(&fused));
    }
    Ok(out)
}
