//! Skeleton action recognition with self-similarity guided temporal graph
//! convolutions.
//!
//! The crate is `no_std` (alloc only) and holds the numeric core:
//!
//! - [`tensor`]: f64 tensors on a replayable tape with reverse-mode autodiff
//! - [`skeleton`]: sequence containers, bone topologies, NTU text parsing,
//!   temporal/spatial preprocessing, joint-to-bone conversion
//! - [`synth`]: deterministic synthetic motion generator and dataset manifest
//! - [`ssm`]: self-similarity matrices over frames
//! - [`graph`]: partitioned spatial graph convolution and the temporal
//!   convolutions (plain and SSM-weighted)
//! - [`model`]: block/network assembly, metrics, checkpoint state
//! - [`train`]: momentum SGD training loop and the gradient checker
//!
//! File formats, IO and the command line live in the companion `regina-cli`
//! crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod graph;
pub mod model;
pub mod skeleton;
pub mod ssm;
pub mod synth;
pub mod train;
pub mod tensor;

#[cfg(any(test, feature = "reference"))]
pub mod reference;

pub use graph::{build_graph, normalize_adjacency, regina_temporal_conv, regina_weights, resize_ssm_for_layer, spatial_gcn, temporal_conv_baseline, ReginaConfig, SpatialGraph, PARTITIONS};
pub use model::{argmax, fuse_scores, metrics_from_scores, BatchItem, BlockConfig, CheckpointState, ForwardPass, Metrics, Model, ModelConfig, ModelError};
pub use skeleton::{parse_ntu_skeleton, BoneTopology, SkeletonError, SkeletonSequence, Stream};
pub use ssm::{compute_ssm, validate_ssm, Metric, SelfSimilarityMatrix, SsmError, SsmViolation};
pub use synth::{synth_generate, synth_topology, DatasetManifest, ManifestItem, Split, SynthConfig, SynthError};
pub use train::{evaluate, train, EpochStats, Example, Hyperparams, TrainError, TrainReport};
pub use tensor::{grad_check, BnMode, Tape, TensorError, TensorId};
