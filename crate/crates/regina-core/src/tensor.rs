//! f64 tensors on a replayable tape with reverse-mode differentiation.
//!
//! Every op records a node holding the ids of its operands plus whatever the
//! backward rule needs (softmax probabilities, batch-norm normalized values).
//! [`Tape::backward`] walks the nodes in reverse recording order and
//! accumulates gradients additively, so a tensor consumed twice receives the
//! sum of both contributions.
//!
//! Shapes are row-major; a scalar has shape `[]` and one element. Gradients
//! only flow into tensors created with `requires_grad`, and ops whose inputs
//! are all constant record nothing.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

pub type TensorId = usize;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape {shape:?} holds {want} values but {got} were supplied")]
    DataLength {
        shape: Vec<usize>,
        want: usize,
        got: usize,
    },
    #[error("{op}: {detail}")]
    Incompatible { op: &'static str, detail: String },
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("tape already consumed by backward; rebuild the graph first")]
    TapeConsumed,
    #[error("unknown tensor id {0}")]
    BadId(TensorId),
    #[error("mean over zero elements")]
    EmptyMean,
    #[error("batch norm saw a channel with zero elements")]
    EmptyChannel,
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("gradient check: {0}")]
    GradCheck(String),
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for d in (0..shape.len()).rev() {
        s[d] = acc;
        acc *= shape[d];
    }
    s
}

/// Per-axis strides of `b` aligned to `a`'s axes, 0 where `b` is stretched.
/// `b` broadcasts into `a` when, right-aligned, every axis matches or is 1.
fn broadcast_strides(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if b.len() > a.len() {
        return None;
    }
    let bs = strides_of(b);
    let offset = a.len() - b.len();
    let mut out = vec![0usize; a.len()];
    for d in 0..a.len() {
        if d < offset {
            out[d] = 0;
        } else {
            let bd = b[d - offset];
            if bd == a[d] {
                out[d] = bs[d - offset];
            } else if bd == 1 {
                out[d] = 0;
            } else {
                return None;
            }
        }
    }
    Some(out)
}

/// Walks linear indices of `shape` while maintaining the matching offset into
/// a second buffer described by `strides` (0 entries skip an axis).
struct StridedIter {
    shape: Vec<usize>,
    strides: Vec<usize>,
    idx: Vec<usize>,
    offset: usize,
    done: bool,
}

impl StridedIter {
    fn new(shape: &[usize], strides: Vec<usize>) -> Self {
        StridedIter {
            done: numel(shape) == 0,
            idx: vec![0; shape.len()],
            offset: 0,
            shape: shape.to_vec(),
            strides,
        }
    }

    fn step(&mut self) {
        for d in (0..self.shape.len()).rev() {
            self.idx[d] += 1;
            self.offset += self.strides[d];
            if self.idx[d] < self.shape[d] {
                return;
            }
            self.offset -= self.strides[d] * self.shape[d];
            self.idx[d] = 0;
        }
        self.done = true;
    }
}

// ---------------------------------------------------------------------------
// tape storage

#[derive(Debug, Clone)]
struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running stats updated with momentum [`BN_MOMENTUM`].
    Train,
    /// Batch statistics; running stats left untouched. Used when the same
    /// forward must be re-evaluated without side effects (gradient checking).
    TrainFrozen,
    /// Running statistics only; batch elements stay independent.
    Eval,
}

/// Running batch-norm statistics, owned by the model rather than the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        BnStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Debug)]
enum Node {
    Add {
        a: TensorId,
        b: TensorId,
        out: TensorId,
    },
    Hadamard {
        a: TensorId,
        b: TensorId,
        out: TensorId,
    },
    Matmul {
        a: TensorId,
        b: TensorId,
        out: TensorId,
    },
    Conv2d {
        input: TensorId,
        kernel: TensorId,
        out: TensorId,
    },
    Relu {
        x: TensorId,
        out: TensorId,
    },
    Sum {
        x: TensorId,
        out: TensorId,
        axes: Vec<usize>,
    },
    Mean {
        x: TensorId,
        out: TensorId,
        axes: Vec<usize>,
        count: usize,
    },
    Permute {
        x: TensorId,
        out: TensorId,
        order: Vec<usize>,
    },
    Slice {
        x: TensorId,
        out: TensorId,
        axis: usize,
        start: usize,
        step: usize,
    },
    BatchNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        out: TensorId,
        channel_axis: usize,
        coupled: bool,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: TensorId,
        out: TensorId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    /// 1-D convolution along the time axis of `[.., c, t, n]`, optionally with
    /// per-frame per-tap weights `r` (the self-similarity route).
    TemporalConv {
        x: TensorId,
        r: Option<TensorId>,
        w: TensorId,
        out: TensorId,
        stride: usize,
    },
    /// R[tau, delta] = M[tau*stride, clamp(tau*stride + delta - pad)].
    TapGather {
        m: TensorId,
        out: TensorId,
        taps: usize,
        stride: usize,
    },
    Stack {
        parts: Vec<TensorId>,
        out: TensorId,
    },
}

/// Recording tape. Create leaves with [`Tape::create`], build the graph with
/// the op methods, then call [`Tape::backward`] on a scalar loss.
#[derive(Debug, Default)]
pub struct Tape {
    tensors: Vec<Tensor>,
    nodes: Vec<Node>,
    consumed: bool,
    relu_fault: f64,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Negative control for the gradient checker: scales the relu backward
    /// rule by `1 + fault` so a deliberately wrong gradient is observable.
    pub fn inject_relu_backward_fault(&mut self, fault: f64) {
        self.relu_fault = fault;
    }

    pub fn create(
        &mut self,
        shape: &[usize],
        data: Vec<f64>,
        requires_grad: bool,
    ) -> Result<TensorId, TensorError> {
        let want = numel(shape);
        if data.len() != want {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                want,
                got: data.len(),
            });
        }
        self.tensors.push(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad,
            grad: None,
        });
        Ok(self.tensors.len() - 1)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<TensorId, TensorError> {
        self.create(shape, data, false)
    }

    pub fn param(&mut self, shape: &[usize], data: Vec<f64>) -> Result<TensorId, TensorError> {
        self.create(shape, data, true)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.tensors[id].shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.tensors[id].data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.tensors[id].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.tensors[id].requires_grad
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn check_id(&self, id: TensorId) -> Result<(), TensorError> {
        if id < self.tensors.len() {
            Ok(())
        } else {
            Err(TensorError::BadId(id))
        }
    }

    fn push_result(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
    ) -> TensorId {
        self.tensors.push(Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
        });
        self.tensors.len() - 1
    }

    fn any_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|&id| self.tensors[id].requires_grad)
    }

    // -- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary_broadcast(a, b, "add", |x, y| x + y, true)
    }

    pub fn hadamard(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary_broadcast(a, b, "hadamard", |x, y| x * y, false)
    }

    fn binary_broadcast(
        &mut self,
        a: TensorId,
        b: TensorId,
        opname: &'static str,
        f: impl Fn(f64, f64) -> f64,
        is_add: bool,
    ) -> Result<TensorId, TensorError> {
        self.check_id(a)?;
        self.check_id(b)?;
        let (ashape, bshape) = (&self.tensors[a].shape, &self.tensors[b].shape);
        let bstrides = broadcast_strides(ashape, bshape).ok_or_else(|| {
            TensorError::Incompatible {
                op: opname,
                detail: format!("{:?} does not broadcast into {:?}", bshape, ashape),
            }
        })?;
        let ashape = ashape.clone();
        let adata = &self.tensors[a].data;
        let bdata = &self.tensors[b].data;
        let mut out = Vec::with_capacity(adata.len());
        let mut it = StridedIter::new(&ashape, bstrides);
        for &av in adata.iter() {
            out.push(f(av, bdata[it.offset]));
            it.step();
        }
        let rg = self.any_grad(&[a, b]);
        let id = self.push_result(ashape, out, rg);
        if rg {
            self.nodes.push(if is_add {
                Node::Add { a, b, out: id }
            } else {
                Node::Hadamard { a, b, out: id }
            });
        }
        Ok(id)
    }

    // -- linear algebra ----------------------------------------------------

    /// `a` is `[.., m, k]` (leading axes batched), `b` is `[k, n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_id(a)?;
        self.check_id(b)?;
        let ashape = self.tensors[a].shape.clone();
        let bshape = self.tensors[b].shape.clone();
        if ashape.len() < 2 || bshape.len() != 2 {
            return Err(TensorError::Incompatible {
                op: "matmul",
                detail: format!(
                    "need [.., m, k] x [k, n], got {:?} x {:?}",
                    ashape, bshape
                ),
            });
        }
        let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let (k2, n) = (bshape[0], bshape[1]);
        if k != k2 {
            return Err(TensorError::Incompatible {
                op: "matmul",
                detail: format!("inner dims differ: {:?} x {:?}", ashape, bshape),
            });
        }
        let batch = numel(&ashape[..ashape.len() - 2]);
        let adata = &self.tensors[a].data;
        let bdata = &self.tensors[b].data;
        let mut out = vec![0.0f64; batch * m * n];
        for bi in 0..batch {
            let abase = bi * m * k;
            let obase = bi * m * n;
            for i in 0..m {
                for kk in 0..k {
                    let av = adata[abase + i * k + kk];
                    let brow = &bdata[kk * n..kk * n + n];
                    let orow = &mut out[obase + i * n..obase + i * n + n];
                    for j in 0..n {
                        orow[j] += av * brow[j];
                    }
                }
            }
        }
        let mut oshape = ashape[..ashape.len() - 2].to_vec();
        oshape.push(m);
        oshape.push(n);
        let rg = self.any_grad(&[a, b]);
        let id = self.push_result(oshape, out, rg);
        if rg {
            self.nodes.push(Node::Matmul { a, b, out: id });
        }
        Ok(id)
    }

    /// Single-channel 2-D cross-correlation with same padding and an odd
    /// square kernel. Input `[1, h, w]`, kernel `[k, k]`, output `[1, h, w]`.
    pub fn conv2d(&mut self, input: TensorId, kernel: TensorId) -> Result<TensorId, TensorError> {
        self.check_id(input)?;
        self.check_id(kernel)?;
        let ishape = self.tensors[input].shape.clone();
        let kshape = self.tensors[kernel].shape.clone();
        if ishape.len() != 3 || ishape[0] != 1 {
            return Err(TensorError::Incompatible {
                op: "conv2d",
                detail: format!("input must be [1, h, w], got {:?}", ishape),
            });
        }
        if kshape.len() != 2 || kshape[0] != kshape[1] {
            return Err(TensorError::Incompatible {
                op: "conv2d",
                detail: format!("kernel must be square [k, k], got {:?}", kshape),
            });
        }
        let k = kshape[0];
        if k % 2 == 0 || k == 0 {
            return Err(TensorError::Incompatible {
                op: "conv2d",
                detail: format!("kernel size must be odd, got {}", k),
            });
        }
        let (h, w) = (ishape[1], ishape[2]);
        let p = (k - 1) / 2;
        let idata = &self.tensors[input].data;
        let kdata = &self.tensors[kernel].data;
        let mut out = vec![0.0f64; h * w];
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for u in 0..k {
                    let ii = i as isize + u as isize - p as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let row = ii as usize * w;
                    for v in 0..k {
                        let jj = j as isize + v as isize - p as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        acc += idata[row + jj as usize] * kdata[u * k + v];
                    }
                }
                out[i * w + j] = acc;
            }
        }
        let rg = self.any_grad(&[input, kernel]);
        let id = self.push_result(ishape, out, rg);
        if rg {
            self.nodes.push(Node::Conv2d {
                input,
                kernel,
                out: id,
            });
        }
        Ok(id)
    }

    // -- shape ops ---------------------------------------------------------

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        self.check_id(x)?;
        let shape = self.tensors[x].shape.clone();
        let out: Vec<f64> = self.tensors[x].data.iter().map(|&v| v.max(0.0)).collect();
        let rg = self.tensors[x].requires_grad;
        let id = self.push_result(shape, out, rg);
        if rg {
            self.nodes.push(Node::Relu { x, out: id });
        }
        Ok(id)
    }

    pub fn sum(&mut self, x: TensorId, axes: &[usize]) -> Result<TensorId, TensorError> {
        self.reduce(x, axes, false)
    }

    pub fn mean(&mut self, x: TensorId, axes: &[usize]) -> Result<TensorId, TensorError> {
        self.reduce(x, axes, true)
    }

    fn reduce(
        &mut self,
        x: TensorId,
        axes: &[usize],
        is_mean: bool,
    ) -> Result<TensorId, TensorError> {
        self.check_id(x)?;
        let shape = self.tensors[x].shape.clone();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        for &ax in &axes {
            if ax >= shape.len() {
                return Err(TensorError::Axis {
                    axis: ax,
                    rank: shape.len(),
                });
            }
        }
        let reduced: Vec<bool> = (0..shape.len()).map(|d| axes.contains(&d)).collect();
        let oshape: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, r)| !**r)
            .map(|(s, _)| *s)
            .collect();
        let count: usize = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, r)| **r)
            .map(|(s, _)| *s)
            .product();
        if is_mean && count == 0 {
            return Err(TensorError::EmptyMean);
        }
        // Strides into the output for each input axis; reduced axes get 0.
        let ostrides_dense = strides_of(&oshape);
        let mut proj = vec![0usize; shape.len()];
        let mut od = 0;
        for d in 0..shape.len() {
            if !reduced[d] {
                proj[d] = ostrides_dense[od];
                od += 1;
            }
        }
        let mut out = vec![0.0f64; numel(&oshape)];
        let xdata = &self.tensors[x].data;
        let mut it = StridedIter::new(&shape, proj.clone());
        for &v in xdata.iter() {
            out[it.offset] += v;
            it.step();
        }
        if is_mean {
            let inv = 1.0 / count as f64;
            for v in out.iter_mut() {
                *v *= inv;
            }
        }
        let rg = self.tensors[x].requires_grad;
        let id = self.push_result(oshape, out, rg);
        if rg {
            self.nodes.push(if is_mean {
                Node::Mean {
                    x,
                    out: id,
                    axes,
                    count,
                }
            } else {
                Node::Sum { x, out: id, axes }
            });
        }
        Ok(id)
    }

    pub fn permute(&mut self, x: TensorId, order: &[usize]) -> Result<TensorId, TensorError> {
        self.check_id(x)?;
        let shape = self.tensors[x].shape.clone();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if order.len() != rank || order.iter().any(|&d| d >= rank || core::mem::replace(&mut seen[d], true)) {
            return Err(TensorError::Incompatible {
                op: "permute",
                detail: format!("order {:?} is not a permutation of 0..{}", order, rank),
            });
        }
        let oshape: Vec<usize> = order.iter().map(|&d| shape[d]).collect();
        let xstrides = strides_of(&shape);
        let gather: Vec<usize> = order.iter().map(|&d| xstrides[d]).collect();
        let xdata = &self.tensors[x].data;
        let mut out = Vec::with_capacity(xdata.len());
        let mut it = StridedIter::new(&oshape, gather);
        for _ in 0..xdata.len() {
            out.push(xdata[it.offset]);
            it.step();
        }
        let rg = self.tensors[x].requires_grad;
        let id = self.push_result(oshape, out, rg);
        if rg {
            self.nodes.push(Node::Permute {
                x,
                out: id,
                order: order.to_vec(),
            });
        }
        Ok(id)
    }

    pub fn slice(
        &mut self,
        x: TensorId,
        axis: usize,
        start: usize,
        stop: usize,
        step: usize,
    ) -> Result<TensorId, TensorError> {
        self.check_id(x)?;
        let shape = self.tensors[x].shape.clone();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                axis,
                rank: shape.len(),
            });
        }
        if step == 0 {
            return Err(TensorError::Incompatible {
                op: "slice",
                detail: String::from("step must be >= 1"),
            });
        }
        if start > stop || stop > shape[axis] {
            return Err(TensorError::Incompatible {
                op: "slice",
                detail: format!(
                    "range {}..{} (step {}) out of bounds for axis of length {}",
                    start, stop, step, shape[axis]
                ),
            });
        }
        let count = if stop > start {
            (stop - start - 1) / step + 1
        } else {
            0
        };
        let mut oshape = shape.clone();
        oshape[axis] = count;
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let xlen_axis = shape[axis];
        let xdata = &self.tensors[x].data;
        let mut out = Vec::with_capacity(numel(&oshape));
        for o in 0..outer {
            let base = o * xlen_axis * inner;
            for s in 0..count {
                let src = base + (start + s * step) * inner;
                out.extend_from_slice(&xdata[src..src + inner]);
            }
        }
        let rg = self.tensors[x].requires_grad;
        let id = self.push_result(oshape, out, rg);
        if rg {
            self.nodes.push(Node::Slice {
                x,
                out: id,
                axis,
                start,
                step,
            });
        }
        Ok(id)
    }

    pub fn stack(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Incompatible {
                op: "stack",
                detail: String::from("need at least one tensor"),
            });
        }
        for &p in parts {
            self.check_id(p)?;
        }
        let shape = self.tensors[parts[0]].shape.clone();
        for &p in parts {
            if self.tensors[p].shape != shape {
                return Err(TensorError::Incompatible {
                    op: "stack",
                    detail: format!(
                        "mixed shapes: {:?} vs {:?}",
                        shape, self.tensors[p].shape
                    ),
                });
            }
        }
        let block = numel(&shape);
        let mut out = Vec::with_capacity(block * parts.len());
        for &p in parts {
            out.extend_from_slice(&self.tensors[p].data);
        }
        let mut oshape = vec![parts.len()];
        oshape.extend_from_slice(&shape);
        let rg = self.any_grad(parts);
        let id = self.push_result(oshape, out, rg);
        if rg {
            self.nodes.push(Node::Stack {
                parts: parts.to_vec(),
                out: id,
            });
        }
        Ok(id)
    }

    // -- normalization and loss ---------------------------------------------

    /// Normalizes over every axis except `channel_axis`. Train modes use the
    /// batch statistics of `x`; eval mode uses `stats`. `BnMode::Train` also
    /// folds the batch statistics into `stats` with momentum [`BN_MOMENTUM`].
    pub fn batch_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        stats: &mut BnStats,
        channel_axis: usize,
        mode: BnMode,
    ) -> Result<TensorId, TensorError> {
        self.check_id(x)?;
        self.check_id(gamma)?;
        self.check_id(beta)?;
        let shape = self.tensors[x].shape.clone();
        if channel_axis >= shape.len() {
            return Err(TensorError::Axis {
                axis: channel_axis,
                rank: shape.len(),
            });
        }
        let c = shape[channel_axis];
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.tensors[id].shape != [c] {
                return Err(TensorError::Incompatible {
                    op: "batch_norm",
                    detail: format!(
                        "{} must have shape [{}], got {:?}",
                        name, c, self.tensors[id].shape
                    ),
                });
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(TensorError::Incompatible {
                op: "batch_norm",
                detail: format!("running stats sized for {} channels, x has {}", stats.mean.len(), c),
            });
        }
        let outer: usize = shape[..channel_axis].iter().product();
        let inner: usize = shape[channel_axis + 1..].iter().product();
        let per_channel = outer * inner;
        if per_channel == 0 {
            return Err(TensorError::EmptyChannel);
        }
        let xdata = &self.tensors[x].data;

        let (mean, var) = match mode {
            BnMode::Eval => (stats.mean.clone(), stats.var.clone()),
            _ => {
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for i in 0..inner {
                            mean[ch] += xdata[base + i];
                        }
                    }
                }
                let inv_n = 1.0 / per_channel as f64;
                for m in mean.iter_mut() {
                    *m *= inv_n;
                }
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for i in 0..inner {
                            let d = xdata[base + i] - mean[ch];
                            var[ch] += d * d;
                        }
                    }
                }
                for v in var.iter_mut() {
                    *v *= inv_n;
                }
                (mean, var)
            }
        };
        if mode == BnMode::Train {
            for ch in 0..c {
                stats.mean[ch] = (1.0 - BN_MOMENTUM) * stats.mean[ch] + BN_MOMENTUM * mean[ch];
                stats.var[ch] = (1.0 - BN_MOMENTUM) * stats.var[ch] + BN_MOMENTUM * var[ch];
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / libm::sqrt(v + BN_EPS)).collect();
        let gdata = &self.tensors[gamma].data;
        let bdata = &self.tensors[beta].data;
        let mut x_hat = vec![0.0f64; xdata.len()];
        let mut out = vec![0.0f64; xdata.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                let (m, s, g, b) = (mean[ch], inv_std[ch], gdata[ch], bdata[ch]);
                for i in 0..inner {
                    let xh = (xdata[base + i] - m) * s;
                    x_hat[base + i] = xh;
                    out[base + i] = g * xh + b;
                }
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        let id = self.push_result(shape, out, rg);
        if rg {
            self.nodes.push(Node::BatchNorm {
                x,
                gamma,
                beta,
                out: id,
                channel_axis,
                coupled: mode != BnMode::Eval,
                x_hat,
                inv_std,
            });
        }
        Ok(id)
    }

    /// Mean cross-entropy over the batch; logits `[b, classes]`. Returns a
    /// scalar. Softmax rows are computed with the max-shift for stability.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: TensorId,
        labels: &[usize],
    ) -> Result<TensorId, TensorError> {
        self.check_id(logits)?;
        let shape = self.tensors[logits].shape.clone();
        if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 {
            return Err(TensorError::Incompatible {
                op: "softmax_cross_entropy",
                detail: format!("logits must be [batch, classes], got {:?}", shape),
            });
        }
        let (b, c) = (shape[0], shape[1]);
        if labels.len() != b {
            return Err(TensorError::Incompatible {
                op: "softmax_cross_entropy",
                detail: format!("{} labels for batch of {}", labels.len(), b),
            });
        }
        for &l in labels {
            if l >= c {
                return Err(TensorError::BadLabel {
                    label: l,
                    classes: c,
                });
            }
        }
        let ldata = &self.tensors[logits].data;
        let probs = softmax_rows(ldata, b, c);
        let mut loss = 0.0f64;
        for (bi, &label) in labels.iter().enumerate() {
            let row = &ldata[bi * c..(bi + 1) * c];
            let mut mx = f64::NEG_INFINITY;
            for &v in row {
                mx = mx.max(v);
            }
            let mut lse = 0.0;
            for &v in row {
                lse += libm::exp(v - mx);
            }
            loss += mx + libm::log(lse) - row[label];
        }
        loss /= b as f64;
        let rg = self.tensors[logits].requires_grad;
        let id = self.push_result(vec![], vec![loss], rg);
        if rg {
            self.nodes.push(Node::SoftmaxCrossEntropy {
                logits,
                out: id,
                labels: labels.to_vec(),
                probs,
            });
        }
        Ok(id)
    }

    // -- temporal convolutions ----------------------------------------------

    /// Plain temporal convolution: `x` is `[c_in, t, n]` or `[b, c_in, t, n]`,
    /// `w` is `[c_out, c_in, taps]` with odd tap count, zero padding
    /// `(taps-1)/2`, output length `ceil(t / stride)`.
    pub fn temporal_conv(
        &mut self,
        x: TensorId,
        w: TensorId,
        stride: usize,
    ) -> Result<TensorId, TensorError> {
        self.temporal_conv_impl(x, None, w, stride)
    }

    /// Temporal convolution with per-frame tap weights `r` (`[t', taps]`, or
    /// `[b, t', taps]` for batched `x`): each tap sample is scaled by
    /// `r[tau, delta]` before the channel mix. With `r` identically one this
    /// is bit-for-bit the plain convolution.
    pub fn temporal_conv_weighted(
        &mut self,
        x: TensorId,
        r: TensorId,
        w: TensorId,
        stride: usize,
    ) -> Result<TensorId, TensorError> {
        self.temporal_conv_impl(x, Some(r), w, stride)
    }

    fn temporal_conv_impl(
        &mut self,
        x: TensorId,
        r: Option<TensorId>,
        w: TensorId,
        stride: usize,
    ) -> Result<TensorId, TensorError> {
        self.check_id(x)?;
        self.check_id(w)?;
        if let Some(r) = r {
            self.check_id(r)?;
        }
        let xshape = self.tensors[x].shape.clone();
        let wshape = self.tensors[w].shape.clone();
        if xshape.len() != 3 && xshape.len() != 4 {
            return Err(TensorError::Incompatible {
                op: "temporal_conv",
                detail: format!("x must be [c, t, n] or [b, c, t, n], got {:?}", xshape),
            });
        }
        if stride == 0 {
            return Err(TensorError::Incompatible {
                op: "temporal_conv",
                detail: String::from("stride must be >= 1"),
            });
        }
        let batched = xshape.len() == 4;
        let (b, c_in, t, n) = if batched {
            (xshape[0], xshape[1], xshape[2], xshape[3])
        } else {
            (1, xshape[0], xshape[1], xshape[2])
        };
        if wshape.len() != 3 || wshape[1] != c_in {
            return Err(TensorError::Incompatible {
                op: "temporal_conv",
                detail: format!("w must be [c_out, {}, taps], got {:?}", c_in, wshape),
            });
        }
        let (c_out, taps) = (wshape[0], wshape[2]);
        if taps % 2 == 0 || taps == 0 {
            return Err(TensorError::Incompatible {
                op: "temporal_conv",
                detail: format!("tap count must be odd, got {}", taps),
            });
        }
        let tp = if t == 0 { 0 } else { (t + stride - 1) / stride };
        if let Some(rid) = r {
            let rshape = &self.tensors[rid].shape;
            let want: Vec<usize> = if batched {
                vec![b, tp, taps]
            } else {
                vec![tp, taps]
            };
            if **rshape != *want {
                return Err(TensorError::Incompatible {
                    op: "temporal_conv",
                    detail: format!("tap weights must be {:?}, got {:?}", want, rshape),
                });
            }
        }
        let pad = (taps - 1) / 2;
        let xdata = &self.tensors[x].data;
        let wdata = &self.tensors[w].data;
        let rdata = r.map(|rid| &self.tensors[rid].data);
        let mut out = vec![0.0f64; b * c_out * tp * n];
        for bi in 0..b {
            for o in 0..c_out {
                let obase = (bi * c_out + o) * tp * n;
                for ci in 0..c_in {
                    let xbase = (bi * c_in + ci) * t * n;
                    for d in 0..taps {
                        let wv = wdata[(o * c_in + ci) * taps + d];
                        for tau in 0..tp {
                            let ti = (tau * stride + d) as isize - pad as isize;
                            if ti < 0 || ti >= t as isize {
                                continue;
                            }
                            let scale = match rdata {
                                Some(rd) => wv * rd[(bi * tp + tau) * taps + d],
                                None => wv,
                            };
                            let xrow = xbase + ti as usize * n;
                            let orow = obase + tau * n;
                            for j in 0..n {
                                out[orow + j] += scale * xdata[xrow + j];
                            }
                        }
                    }
                }
            }
        }
        let oshape = if batched {
            vec![b, c_out, tp, n]
        } else {
            vec![c_out, tp, n]
        };
        let mut ids = vec![x, w];
        if let Some(rid) = r {
            ids.push(rid);
        }
        let rg = self.any_grad(&ids);
        let id = self.push_result(oshape, out, rg);
        if rg {
            self.nodes.push(Node::TemporalConv {
                x,
                r,
                w,
                out: id,
                stride,
            });
        }
        Ok(id)
    }

    /// Gathers per-frame tap weights from a frame-by-frame matrix `m`
    /// (`[t, t]` or `[1, t, t]`): row `tau` of the output reads
    /// `m[tau*stride, clamp(tau*stride + delta - pad, 0, t-1)]` for each of
    /// the `taps` offsets. Border taps clamp instead of zero-padding.
    pub fn tap_gather(
        &mut self,
        m: TensorId,
        taps: usize,
        stride: usize,
    ) -> Result<TensorId, TensorError> {
        self.check_id(m)?;
        let mshape = self.tensors[m].shape.clone();
        let t = match mshape.len() {
            2 if mshape[0] == mshape[1] => mshape[0],
            3 if mshape[0] == 1 && mshape[1] == mshape[2] => mshape[1],
            _ => {
                return Err(TensorError::Incompatible {
                    op: "tap_gather",
                    detail: format!("need a square [t, t] or [1, t, t] matrix, got {:?}", mshape),
                })
            }
        };
        if taps % 2 == 0 || taps == 0 {
            return Err(TensorError::Incompatible {
                op: "tap_gather",
                detail: format!("tap count must be odd, got {}", taps),
            });
        }
        if stride == 0 {
            return Err(TensorError::Incompatible {
                op: "tap_gather",
                detail: String::from("stride must be >= 1"),
            });
        }
        if t == 0 {
            return Err(TensorError::Incompatible {
                op: "tap_gather",
                detail: String::from("matrix has zero frames"),
            });
        }
        let pad = (taps - 1) / 2;
        let tp = (t + stride - 1) / stride;
        let mdata = &self.tensors[m].data;
        let mut out = vec![0.0f64; tp * taps];
        for tau in 0..tp {
            let row = tau * stride;
            for d in 0..taps {
                let col = (row + d) as isize - pad as isize;
                let col = col.clamp(0, t as isize - 1) as usize;
                out[tau * taps + d] = mdata[row * t + col];
            }
        }
        let rg = self.tensors[m].requires_grad;
        let id = self.push_result(vec![tp, taps], out, rg);
        if rg {
            self.nodes.push(Node::TapGather {
                m,
                out: id,
                taps,
                stride,
            });
        }
        Ok(id)
    }

    // -- backward ------------------------------------------------------------

    /// Reverse pass from a scalar `loss`. Fills `grad` on every requires_grad
    /// tensor that `loss` depends on. Consumes the tape: a second call
    /// without rebuilding the graph is an error.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        self.check_id(loss)?;
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if numel(&self.tensors[loss].shape) != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.tensors[loss].shape.clone(),
            });
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.tensors.len()];
        grads[loss] = Some(vec![1.0]);
        for ni in (0..self.nodes.len()).rev() {
            let out = node_out(&self.nodes[ni]);
            // Every output id is written by exactly one node, so its gradient
            // is complete once the reverse walk reaches that node.
            let Some(g) = grads[out].take() else {
                continue;
            };
            self.backward_node(ni, &g, &mut grads);
            grads[out] = Some(g);
        }
        for (id, slot) in grads.into_iter().enumerate() {
            if let (Some(g), true) = (slot, self.tensors[id].requires_grad) {
                self.tensors[id].grad = Some(g);
            }
        }
        Ok(())
    }

    fn backward_node(&self, ni: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[ni];
        match node {
            Node::Add { a, b, .. } => {
                if self.tensors[*a].requires_grad {
                    accum_slice(grads, *a, &self.tensors[*a].shape, g);
                }
                if self.tensors[*b].requires_grad {
                    self.accum_broadcast(grads, *a, *b, g, |_, gv| gv);
                }
            }
            Node::Hadamard { a, b, .. } => {
                let ashape = &self.tensors[*a].shape;
                if self.tensors[*a].requires_grad {
                    let bstrides =
                        broadcast_strides(ashape, &self.tensors[*b].shape).expect("checked");
                    let bdata = &self.tensors[*b].data;
                    let buf = ensure(grads, *a, numel(ashape));
                    let mut it = StridedIter::new(ashape, bstrides);
                    for (i, &gv) in g.iter().enumerate() {
                        buf[i] += gv * bdata[it.offset];
                        it.step();
                    }
                }
                if self.tensors[*b].requires_grad {
                    let adata = &self.tensors[*a].data;
                    self.accum_broadcast(grads, *a, *b, g, move |i, gv| gv * adata[i]);
                }
            }
            Node::Matmul { a, b, .. } => {
                let ashape = &self.tensors[*a].shape;
                let bshape = &self.tensors[*b].shape;
                let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
                let n = bshape[1];
                let batch = numel(&ashape[..ashape.len() - 2]);
                if self.tensors[*a].requires_grad {
                    let bdata = &self.tensors[*b].data;
                    let da = ensure(grads, *a, numel(ashape));
                    for bi in 0..batch {
                        for i in 0..m {
                            let grow = bi * m * n + i * n;
                            let arow = bi * m * k + i * k;
                            for kk in 0..k {
                                let brow = kk * n;
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += g[grow + j] * bdata[brow + j];
                                }
                                da[arow + kk] += acc;
                            }
                        }
                    }
                }
                if self.tensors[*b].requires_grad {
                    let adata = &self.tensors[*a].data;
                    let db = ensure(grads, *b, numel(bshape));
                    for bi in 0..batch {
                        for i in 0..m {
                            let grow = bi * m * n + i * n;
                            let arow = bi * m * k + i * k;
                            for kk in 0..k {
                                let av = adata[arow + kk];
                                let brow = kk * n;
                                for j in 0..n {
                                    db[brow + j] += av * g[grow + j];
                                }
                            }
                        }
                    }
                }
            }
            Node::Conv2d { input, kernel, .. } => {
                let ishape = &self.tensors[*input].shape;
                let (h, w) = (ishape[1], ishape[2]);
                let k = self.tensors[*kernel].shape[0];
                let p = (k - 1) / 2;
                if self.tensors[*input].requires_grad {
                    let kdata = &self.tensors[*kernel].data;
                    let di = ensure(grads, *input, h * w);
                    for i in 0..h {
                        for j in 0..w {
                            let gv = g[i * w + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for u in 0..k {
                                let ii = i as isize + u as isize - p as isize;
                                if ii < 0 || ii >= h as isize {
                                    continue;
                                }
                                for v in 0..k {
                                    let jj = j as isize + v as isize - p as isize;
                                    if jj < 0 || jj >= w as isize {
                                        continue;
                                    }
                                    di[ii as usize * w + jj as usize] += gv * kdata[u * k + v];
                                }
                            }
                        }
                    }
                }
                if self.tensors[*kernel].requires_grad {
                    let idata = &self.tensors[*input].data;
                    let dk = ensure(grads, *kernel, k * k);
                    for u in 0..k {
                        for v in 0..k {
                            let mut acc = 0.0;
                            for i in 0..h {
                                let ii = i as isize + u as isize - p as isize;
                                if ii < 0 || ii >= h as isize {
                                    continue;
                                }
                                let irow = ii as usize * w;
                                let grow = i * w;
                                for j in 0..w {
                                    let jj = j as isize + v as isize - p as isize;
                                    if jj < 0 || jj >= w as isize {
                                        continue;
                                    }
                                    acc += g[grow + j] * idata[irow + jj as usize];
                                }
                            }
                            dk[u * k + v] += acc;
                        }
                    }
                }
            }
            Node::Relu { x, .. } => {
                let xdata = &self.tensors[*x].data;
                let scale = 1.0 + self.relu_fault;
                let dx = ensure(grads, *x, xdata.len());
                for (i, &gv) in g.iter().enumerate() {
                    if xdata[i] > 0.0 {
                        dx[i] += gv * scale;
                    }
                }
            }
            Node::Sum { x, axes, .. } | Node::Mean { x, axes, .. } => {
                let scale = match node {
                    Node::Mean { count, .. } => 1.0 / *count as f64,
                    _ => 1.0,
                };
                let xshape = &self.tensors[*x].shape;
                let reduced: Vec<bool> = (0..xshape.len()).map(|d| axes.contains(&d)).collect();
                let oshape: Vec<usize> = xshape
                    .iter()
                    .zip(&reduced)
                    .filter(|(_, r)| !**r)
                    .map(|(s, _)| *s)
                    .collect();
                let ostrides_dense = strides_of(&oshape);
                let mut proj = vec![0usize; xshape.len()];
                let mut od = 0;
                for d in 0..xshape.len() {
                    if !reduced[d] {
                        proj[d] = ostrides_dense[od];
                        od += 1;
                    }
                }
                let xshape = xshape.clone();
                let dx = ensure(grads, *x, numel(&xshape));
                let mut it = StridedIter::new(&xshape, proj);
                for slot in dx.iter_mut() {
                    *slot += g[it.offset] * scale;
                    it.step();
                }
            }
            Node::Permute { x, order, .. } => {
                let xshape = &self.tensors[*x].shape;
                let oshape: Vec<usize> = order.iter().map(|&d| xshape[d]).collect();
                let xstrides = strides_of(xshape);
                let gather: Vec<usize> = order.iter().map(|&d| xstrides[d]).collect();
                let n = numel(xshape);
                let dx = ensure(grads, *x, n);
                let mut it = StridedIter::new(&oshape, gather);
                for &gv in g.iter() {
                    dx[it.offset] += gv;
                    it.step();
                }
            }
            Node::Slice {
                x,
                out,
                axis,
                start,
                step,
            } => {
                let xshape = &self.tensors[*x].shape;
                let count = self.tensors[*out].shape[*axis];
                let inner: usize = xshape[*axis + 1..].iter().product();
                let outer: usize = xshape[..*axis].iter().product();
                let xlen_axis = xshape[*axis];
                let n = numel(xshape);
                let dx = ensure(grads, *x, n);
                let mut src = 0;
                for o in 0..outer {
                    let base = o * xlen_axis * inner;
                    for s in 0..count {
                        let dst = base + (start + s * step) * inner;
                        for i in 0..inner {
                            dx[dst + i] += g[src + i];
                        }
                        src += inner;
                    }
                }
            }
            Node::Stack { parts, .. } => {
                let block = if parts.is_empty() {
                    0
                } else {
                    numel(&self.tensors[parts[0]].shape)
                };
                for (pi, &p) in parts.iter().enumerate() {
                    if !self.tensors[p].requires_grad {
                        continue;
                    }
                    let dp = ensure(grads, p, block);
                    let src = pi * block;
                    for i in 0..block {
                        dp[i] += g[src + i];
                    }
                }
            }
            Node::BatchNorm {
                x,
                gamma,
                beta,
                channel_axis,
                coupled,
                x_hat,
                inv_std,
                ..
            } => {
                let xshape = &self.tensors[*x].shape;
                let c = xshape[*channel_axis];
                let outer: usize = xshape[..*channel_axis].iter().product();
                let inner: usize = xshape[*channel_axis + 1..].iter().product();
                let per_channel = (outer * inner) as f64;
                let gdata = &self.tensors[*gamma].data;
                if self.tensors[*beta].requires_grad {
                    let db = ensure(grads, *beta, c);
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            for i in 0..inner {
                                db[ch] += g[base + i];
                            }
                        }
                    }
                }
                if self.tensors[*gamma].requires_grad {
                    let dg = ensure(grads, *gamma, c);
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            for i in 0..inner {
                                dg[ch] += g[base + i] * x_hat[base + i];
                            }
                        }
                    }
                }
                if self.tensors[*x].requires_grad {
                    let n = numel(xshape);
                    if *coupled {
                        // dx = inv_std/N * (N*dxh - sum(dxh) - xh * sum(dxh*xh))
                        let mut sum_dxh = vec![0.0f64; c];
                        let mut sum_dxh_xh = vec![0.0f64; c];
                        for o in 0..outer {
                            for ch in 0..c {
                                let base = (o * c + ch) * inner;
                                let gch = gdata[ch];
                                for i in 0..inner {
                                    let dxh = g[base + i] * gch;
                                    sum_dxh[ch] += dxh;
                                    sum_dxh_xh[ch] += dxh * x_hat[base + i];
                                }
                            }
                        }
                        let dx = ensure(grads, *x, n);
                        for o in 0..outer {
                            for ch in 0..c {
                                let base = (o * c + ch) * inner;
                                let gch = gdata[ch];
                                let s = inv_std[ch] / per_channel;
                                for i in 0..inner {
                                    let dxh = g[base + i] * gch;
                                    dx[base + i] += s
                                        * (per_channel * dxh
                                            - sum_dxh[ch]
                                            - x_hat[base + i] * sum_dxh_xh[ch]);
                                }
                            }
                        }
                    } else {
                        let dx = ensure(grads, *x, n);
                        for o in 0..outer {
                            for ch in 0..c {
                                let base = (o * c + ch) * inner;
                                let s = gdata[ch] * inv_std[ch];
                                for i in 0..inner {
                                    dx[base + i] += g[base + i] * s;
                                }
                            }
                        }
                    }
                }
            }
            Node::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
                ..
            } => {
                let c = self.tensors[*logits].shape[1];
                let b = labels.len();
                let gv = g[0] / b as f64;
                let dl = ensure(grads, *logits, b * c);
                for (bi, &label) in labels.iter().enumerate() {
                    for ci in 0..c {
                        let delta = if ci == label { 1.0 } else { 0.0 };
                        dl[bi * c + ci] += gv * (probs[bi * c + ci] - delta);
                    }
                }
            }
            Node::TemporalConv { x, r, w, stride, .. } => {
                let xshape = &self.tensors[*x].shape;
                let batched = xshape.len() == 4;
                let (b, c_in, t, n) = if batched {
                    (xshape[0], xshape[1], xshape[2], xshape[3])
                } else {
                    (1, xshape[0], xshape[1], xshape[2])
                };
                let wshape = &self.tensors[*w].shape;
                let (c_out, taps) = (wshape[0], wshape[2]);
                let tp = (t + stride - 1) / stride;
                let pad = (taps - 1) / 2;
                let xdata = &self.tensors[*x].data;
                let wdata = &self.tensors[*w].data;
                let rdata = r.map(|rid| self.tensors[rid].data.clone());
                let want_dx = self.tensors[*x].requires_grad;
                let want_dw = self.tensors[*w].requires_grad;
                let want_dr = r.map(|rid| self.tensors[rid].requires_grad).unwrap_or(false);
                let mut dx = if want_dx { vec![0.0f64; xdata.len()] } else { Vec::new() };
                let mut dw = if want_dw { vec![0.0f64; wdata.len()] } else { Vec::new() };
                let mut dr = if want_dr {
                    vec![0.0f64; b * tp * taps]
                } else {
                    Vec::new()
                };
                for bi in 0..b {
                    for o in 0..c_out {
                        let obase = (bi * c_out + o) * tp * n;
                        for ci in 0..c_in {
                            let xbase = (bi * c_in + ci) * t * n;
                            for d in 0..taps {
                                let wv = wdata[(o * c_in + ci) * taps + d];
                                for tau in 0..tp {
                                    let ti = (tau * stride + d) as isize - pad as isize;
                                    if ti < 0 || ti >= t as isize {
                                        continue;
                                    }
                                    let rv = match &rdata {
                                        Some(rd) => rd[(bi * tp + tau) * taps + d],
                                        None => 1.0,
                                    };
                                    let xrow = xbase + ti as usize * n;
                                    let grow = obase + tau * n;
                                    if want_dx {
                                        let s = wv * rv;
                                        for j in 0..n {
                                            dx[xrow + j] += s * g[grow + j];
                                        }
                                    }
                                    if want_dw || want_dr {
                                        let mut dot = 0.0;
                                        for j in 0..n {
                                            dot += g[grow + j] * xdata[xrow + j];
                                        }
                                        if want_dw {
                                            dw[(o * c_in + ci) * taps + d] += rv * dot;
                                        }
                                        if want_dr {
                                            dr[(bi * tp + tau) * taps + d] += wv * dot;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if want_dx {
                    add_into(ensure(grads, *x, xdata.len()), &dx);
                }
                if want_dw {
                    add_into(ensure(grads, *w, wdata.len()), &dw);
                }
                if want_dr {
                    let rid = r.expect("dr implies r");
                    add_into(ensure(grads, rid, dr.len()), &dr);
                }
            }
            Node::TapGather {
                m,
                taps,
                stride,
                ..
            } => {
                let mshape = &self.tensors[*m].shape;
                let t = if mshape.len() == 2 { mshape[0] } else { mshape[1] };
                let tp = (t + stride - 1) / stride;
                let pad = (taps - 1) / 2;
                let dm = ensure(grads, *m, t * t);
                for tau in 0..tp {
                    let row = tau * stride;
                    for d in 0..*taps {
                        let col = (row + d) as isize - pad as isize;
                        let col = col.clamp(0, t as isize - 1) as usize;
                        dm[row * t + col] += g[tau * taps + d];
                    }
                }
            }
        }
    }

    fn accum_broadcast(
        &self,
        grads: &mut [Option<Vec<f64>>],
        a: TensorId,
        b: TensorId,
        g: &[f64],
        f: impl Fn(usize, f64) -> f64,
    ) {
        let ashape = &self.tensors[a].shape;
        let bshape = &self.tensors[b].shape;
        let bstrides = broadcast_strides(ashape, bshape).expect("checked at record time");
        let n = numel(bshape);
        let db = ensure(grads, b, n);
        let mut it = StridedIter::new(ashape, bstrides);
        for (i, &gv) in g.iter().enumerate() {
            db[it.offset] += f(i, gv);
            it.step();
        }
    }
}

fn node_out(node: &Node) -> TensorId {
    match node {
        Node::Add { out, .. }
        | Node::Hadamard { out, .. }
        | Node::Matmul { out, .. }
        | Node::Conv2d { out, .. }
        | Node::Relu { out, .. }
        | Node::Sum { out, .. }
        | Node::Mean { out, .. }
        | Node::Permute { out, .. }
        | Node::Slice { out, .. }
        | Node::BatchNorm { out, .. }
        | Node::SoftmaxCrossEntropy { out, .. }
        | Node::TemporalConv { out, .. }
        | Node::TapGather { out, .. }
        | Node::Stack { out, .. } => *out,
    }
}

fn ensure<'g>(grads: &'g mut [Option<Vec<f64>>], id: TensorId, n: usize) -> &'g mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; n])
}

fn accum_slice(grads: &mut [Option<Vec<f64>>], id: TensorId, shape: &[usize], g: &[f64]) {
    let buf = ensure(grads, id, numel(shape));
    add_into(buf, g);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Row-wise softmax with the max shift; no tape involvement.
pub fn softmax_rows(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; rows * cols];
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        let mut mx = f64::NEG_INFINITY;
        for &v in row {
            mx = mx.max(v);
        }
        let mut denom = 0.0;
        for (c, &v) in row.iter().enumerate() {
            let e = libm::exp(v - mx);
            out[r * cols + c] = e;
            denom += e;
        }
        for c in 0..cols {
            out[r * cols + c] /= denom;
        }
    }
    out
}

/// Central-difference check: `f` maps the parameter arrays to a scalar loss,
/// `analytic` holds the gradients to verify. Returns the max over all
/// coordinates of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`;
/// an empty parameter list vacuously returns 0.
pub fn grad_check<F>(
    mut f: F,
    params: &mut [Vec<f64>],
    analytic: &[Vec<f64>],
    epsilon: f64,
) -> Result<f64, TensorError>
where
    F: FnMut(&[Vec<f64>]) -> Result<f64, TensorError>,
{
    if analytic.len() != params.len() {
        return Err(TensorError::GradCheck(format!(
            "{} analytic gradient arrays for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    if epsilon <= 0.0 {
        return Err(TensorError::GradCheck(String::from("epsilon must be > 0")));
    }
    let mut worst = 0.0f64;
    for pi in 0..params.len() {
        if analytic[pi].len() != params[pi].len() {
            return Err(TensorError::GradCheck(format!(
                "parameter {} has {} values but {} gradients",
                pi,
                params[pi].len(),
                analytic[pi].len()
            )));
        }
        for ei in 0..params[pi].len() {
            let saved = params[pi][ei];
            params[pi][ei] = saved + epsilon;
            let up = f(params)?;
            params[pi][ei] = saved - epsilon;
            let down = f(params)?;
            params[pi][ei] = saved;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic[pi][ei];
            let denom = libm::fabs(a).max(libm::fabs(numeric)).max(1e-8);
            let rel = libm::fabs(a - numeric) / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
