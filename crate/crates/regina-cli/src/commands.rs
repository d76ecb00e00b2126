//! The six subcommands. Each one validates its flags, logs the resolved
//! configuration to stderr, and writes data to files or stdout only.

use crate::formats::{
    load_checkpoint, load_manifest, load_scores, load_sequence, metric_name, save_checkpoint,
    save_history, save_manifest, save_scores, save_sequence, ssm_to_csv, ssm_to_pgm, write_bytes,
};
use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use regina_core::{
    argmax, compute_ssm, evaluate, grad_check, metrics_from_scores, synth_generate,
    synth_topology, train, validate_ssm, BatchItem, BnMode, BoneTopology, DatasetManifest,
    Example, Hyperparams, Metric, Metrics, Model, ModelConfig, ReginaConfig, SkeletonSequence,
    Split, Stream, SynthConfig, Tape, TensorError,
};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    L1,
    L2,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Metric {
        match m {
            MetricArg::L1 => Metric::L1,
            MetricArg::L2 => Metric::L2,
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Xsub,
    Xview,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Xsub => Split::Xsub,
            SplitArg::Xview => Split::Xview,
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
pub enum StreamArg {
    Joint,
    Bone,
}

impl From<StreamArg> for Stream {
    fn from(s: StreamArg) -> Stream {
        match s {
            StreamArg::Joint => Stream::Joint,
            StreamArg::Bone => Stream::Bone,
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Pgm,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
pub enum EvalSide {
    Train,
    Test,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
pub enum ConfigArg {
    Tiny,
    Desk,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Number of action classes (2..=5)
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    #[arg(long, default_value_t = 8)]
    pub subjects: usize,
    #[arg(long, default_value_t = 2)]
    pub cameras: usize,
    /// Repetitions per class/subject/camera combination
    #[arg(long, default_value_t = 10)]
    pub reps: usize,
    #[arg(long, default_value_t = 64)]
    pub frames: usize,
    /// Standard deviation of per-coordinate jitter
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for manifest.json and sequence files
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let config = SynthConfig {
        classes: args.classes,
        subjects: args.subjects,
        cameras: args.cameras,
        reps: args.reps,
        frames: args.frames,
        noise_std: args.noise,
        seed: args.seed,
    };
    eprintln!(
        "synth: classes={} subjects={} cameras={} reps={} frames={} noise={} seed={} out={}",
        config.classes, config.subjects, config.cameras, config.reps, config.frames,
        config.noise_std, config.seed, args.out.display()
    );
    let (manifest, sequences) = synth_generate(&config)?;
    for (item, seq) in manifest.items.iter().zip(&sequences) {
        save_sequence(&args.out.join(&item.path), seq)?;
    }
    save_manifest(&args.out.join("manifest.json"), &manifest)?;
    println!(
        "wrote {} sequences ({} classes x {} subjects x {} cameras x {} reps) to {}",
        sequences.len(), config.classes, config.subjects, config.cameras, config.reps,
        args.out.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct SsmArgs {
    /// Sequence JSON file
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = MetricArg::L2)]
    pub metric: MetricArg,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    pub format: FormatArg,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_ssm(args: &SsmArgs) -> Result<()> {
    let metric: Metric = args.metric.into();
    eprintln!(
        "ssm: input={} metric={} format={} out={}",
        args.input.display(),
        metric_name(metric),
        match args.format { FormatArg::Csv => "csv", FormatArg::Pgm => "pgm" },
        args.out.display()
    );
    let seq = load_sequence(&args.input)?;
    let ssm = compute_ssm(&seq, metric)?;
    let violations = validate_ssm(&ssm);
    match args.format {
        FormatArg::Csv => write_bytes(&args.out, ssm_to_csv(&ssm).as_bytes())?,
        FormatArg::Pgm => write_bytes(&args.out, &ssm_to_pgm(&ssm))?,
    }
    if violations.is_empty() {
        println!("ssm {}x{}: symmetric, hollow diagonal, finite", ssm.frames, ssm.frames);
    } else {
        for v in &violations {
            println!("violation: {}", v);
        }
        bail!("self-similarity matrix failed validation");
    }
    Ok(())
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Xsub)]
    pub split: SplitArg,
    /// Tap re-weighting on (full mechanism) or off (plain baseline)
    #[arg(long, value_enum, default_value_t = OnOff::On)]
    pub regina: OnOff,
    /// Smoothing kernel size k (odd)
    #[arg(long, default_value_t = 3)]
    pub kernel_size: usize,
    #[arg(long, value_enum, default_value_t = MetricArg::L2)]
    pub metric: MetricArg,
    #[arg(long, value_enum, default_value_t = StreamArg::Joint)]
    pub stream: StreamArg,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for checkpoint.json and history.csv
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let split: Split = args.split.into();
    let metric: Metric = args.metric.into();
    let stream: Stream = args.stream.into();
    let enabled = args.regina == OnOff::On;
    eprintln!(
        "train: manifest={} split={} regina={} kernel_size={} metric={} stream={} \
         epochs={} lr={} batch_size={} seed={} out={}",
        args.manifest.display(), split.as_str(),
        if enabled { "on" } else { "off" },
        args.kernel_size, metric_name(metric), stream.as_str(),
        args.epochs, args.lr, args.batch_size, args.seed, args.out.display()
    );

    let manifest = load_manifest(&args.manifest)?;
    let base = manifest_dir(&args.manifest);
    let (train_idx, _) = manifest.partition(split);
    if train_idx.is_empty() {
        bail!("training side of split {} is empty", split.as_str());
    }
    let classes = num_classes(&manifest)?;

    let mut config = ModelConfig::desk(classes);
    config.regina = ReginaConfig {
        enabled,
        kernel_size: args.kernel_size,
        ..ReginaConfig::default()
    };
    config.validate()?;
    let (dataset, _) = load_examples(&manifest, &base, &train_idx, stream, metric, &config)?;
    let topology = topology_for(config.joints)?;
    let mut model = Model::new(config.clone(), &topology, args.seed)?;

    let hp = Hyperparams {
        lr: args.lr,
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: args.seed,
        ..Hyperparams::default()
    };
    let history = if args.epochs == 0 {
        Vec::new()
    } else {
        let report = train(&mut model, &dataset, &hp)?;
        for row in &report.history {
            eprintln!(
                "epoch {}: loss {:.6} top1 {:.4} lr {}",
                row.epoch, row.train_loss, row.train_top1, row.lr
            );
        }
        report.history
    };

    let mut meta = BTreeMap::new();
    meta.insert("epochs".to_string(), args.epochs.to_string());
    meta.insert("lr".to_string(), format!("{}", args.lr));
    meta.insert("metric".to_string(), metric_name(metric).to_string());
    meta.insert("seed".to_string(), args.seed.to_string());
    meta.insert("split".to_string(), split.as_str().to_string());
    meta.insert("stream".to_string(), stream.as_str().to_string());
    save_checkpoint(&args.out.join("checkpoint.json"), &model.config, &model.export_state(), &meta)?;
    save_history(&args.out.join("history.csv"), &history)?;
    println!(
        "trained {} epochs on {} samples; wrote {}",
        history.len(), dataset.len(), args.out.join("checkpoint.json").display()
    );
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Xsub)]
    pub split: SplitArg,
    /// Which side of the split to score
    #[arg(long, value_enum, default_value_t = EvalSide::Test)]
    pub on: EvalSide,
    /// Where to write per-sample softmax scores (CSV)
    #[arg(long)]
    pub scores_out: PathBuf,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let split: Split = args.split.into();
    eprintln!(
        "eval: checkpoint={} manifest={} split={} on={} scores_out={}",
        args.checkpoint.display(), args.manifest.display(), split.as_str(),
        match args.on { EvalSide::Train => "train", EvalSide::Test => "test" },
        args.scores_out.display()
    );
    let (config, state, meta) = load_checkpoint(&args.checkpoint)?;
    let stream = match meta.get("stream").map(String::as_str) {
        Some("bone") => Stream::Bone,
        _ => Stream::Joint,
    };
    let metric = match meta.get("metric").map(String::as_str) {
        Some("l1") => Metric::L1,
        _ => Metric::L2,
    };

    let manifest = load_manifest(&args.manifest)?;
    let base = manifest_dir(&args.manifest);
    let (train_idx, test_idx) = manifest.partition(split);
    let indices = match args.on {
        EvalSide::Train => train_idx,
        EvalSide::Test => test_idx,
    };
    if indices.is_empty() {
        bail!("requested side of split {} is empty", split.as_str());
    }
    let classes = num_classes(&manifest)?;
    if classes > config.num_classes {
        bail!(
            "manifest has {} classes but the checkpoint was trained with {}",
            classes, config.num_classes
        );
    }
    let (dataset, ids) = load_examples(&manifest, &base, &indices, stream, metric, &config)?;

    let topology = topology_for(config.joints)?;
    let mut model = Model::new(config, &topology, 0)?;
    model.import_state(&state)?;
    let (scores, metrics) = evaluate(&mut model, &dataset, 8)?;
    save_scores(&args.scores_out, &ids, &scores)?;
    print_metrics(&metrics);
    Ok(())
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Model size to check (tiny: full sweep; desk: seeded coordinate sample)
    #[arg(long, value_enum, default_value_t = ConfigArg::Tiny)]
    pub config: ConfigArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    eprintln!(
        "gradcheck: config={} seed={}",
        match args.config { ConfigArg::Tiny => "tiny", ConfigArg::Desk => "desk" },
        args.seed
    );
    // Undocumented negative-control hook for the test harness: scales the
    // relu backward rule so the check must fail.
    let fault: f64 = std::env::var("REGINA_GRADCHECK_FAULT")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0.0);

    let (config, topology) = match args.config {
        ConfigArg::Tiny => {
            let topo = BoneTopology::new(4, 0, vec![(0, 1), (1, 2), (1, 3)])?;
            (ModelConfig::tiny(2), topo)
        }
        ConfigArg::Desk => (ModelConfig::desk(3), synth_topology()),
    };
    let dataset = gradcheck_batch(&config, args.seed)?;
    let items: Vec<BatchItem> = dataset
        .iter()
        .map(|(seq, ssm)| BatchItem { sequence: seq, ssm: ssm.as_ref() })
        .collect();
    let labels: Vec<usize> = dataset.iter().map(|(s, _)| s.label).collect();

    let names: Vec<String> = Model::new(config.clone(), &topology, args.seed)?
        .param_names()
        .map(String::from)
        .collect();
    let run = |p: &[Vec<f64>]| -> Result<(f64, Vec<Vec<f64>>), TensorError> {
        let wrap = |e: regina_core::ModelError| TensorError::GradCheck(format!("{}", e));
        let mut model = Model::new(config.clone(), &topology, args.seed).map_err(wrap)?;
        for (name, values) in names.iter().zip(p) {
            model.set_param(name, values.clone()).map_err(wrap)?;
        }
        let mut tape = Tape::new();
        tape.inject_relu_backward_fault(fault);
        let pass = model.forward(&mut tape, &items, BnMode::TrainFrozen).map_err(wrap)?;
        let loss = tape.softmax_cross_entropy(pass.logits, &labels)?;
        tape.backward(loss)?;
        let grads = model.gradients(&tape, &pass);
        Ok((
            tape.data(loss)[0],
            names.iter().map(|n| grads[n].clone()).collect(),
        ))
    };

    // Finite differences only need the loss, so skip backward there.
    let loss_of = |p: &[Vec<f64>]| -> Result<f64, TensorError> {
        let wrap = |e: regina_core::ModelError| TensorError::GradCheck(format!("{}", e));
        let mut model = Model::new(config.clone(), &topology, args.seed).map_err(wrap)?;
        for (name, values) in names.iter().zip(p) {
            model.set_param(name, values.clone()).map_err(wrap)?;
        }
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &items, BnMode::TrainFrozen).map_err(wrap)?;
        let loss = tape.softmax_cross_entropy(pass.logits, &labels)?;
        Ok(tape.data(loss)[0])
    };

    let probe = Model::new(config.clone(), &topology, args.seed)?;
    let mut params: Vec<Vec<f64>> = names
        .iter()
        .map(|n| probe.param_values(n).unwrap().to_vec())
        .collect();
    let (_, analytic) = run(&params)?;
    let max_err = match args.config {
        ConfigArg::Tiny => grad_check(&loss_of, &mut params, &analytic, 1e-5)?,
        ConfigArg::Desk => sampled_grad_check(&loss_of, &mut params, &analytic, 1e-5, args.seed, 16)?,
    };
    println!("max relative error {}", max_err);
    if max_err > 1e-4 {
        bail!("gradient check failed: max relative error {} > 1e-4", max_err);
    }
    Ok(())
}

/// Deterministic 2-sample batch for the gradient check, derived from the
/// generator and projected down to the requested joint count.
fn gradcheck_batch(config: &ModelConfig, seed: u64) -> Result<Vec<Example>> {
    let synth = SynthConfig {
        classes: config.num_classes.min(5),
        subjects: 2,
        cameras: 2,
        reps: 1,
        frames: config.temporal,
        noise_std: 0.05,
        seed,
    };
    let (_, seqs) = synth_generate(&synth)?;
    let mut out = Vec::new();
    for s in seqs.into_iter().take(2) {
        let seq = if s.joints == config.joints {
            s
        } else {
            let mut data = Vec::new();
            for j in 0..config.joints {
                let base = j * config.temporal * config.dims;
                data.extend_from_slice(&s.data[base..base + config.temporal * config.dims]);
            }
            SkeletonSequence::new(
                config.joints, config.temporal, config.dims, data,
                s.label, s.subject, s.camera, s.stream,
            )?
        };
        let ssm = compute_ssm(&seq, Metric::L2)?;
        out.push((seq, Some(ssm)));
    }
    Ok(out)
}

/// Central-difference check on a seeded sample of coordinates per parameter
/// (the full sweep is impractical at desk scale).
/// Spot-checks a random subset of coordinates per parameter. A central
/// difference straddles a relu kink when the step flips an activation
/// somewhere downstream; that shows up as a large error at one step size
/// that disappears at a smaller one, while a wrong analytic gradient stays
/// wrong at every step size. Suspicious coordinates are therefore re-tested
/// on a shrinking ladder and the best estimate wins.
fn sampled_grad_check<F>(
    mut f: F,
    params: &mut [Vec<f64>],
    analytic: &[Vec<f64>],
    epsilon: f64,
    seed: u64,
    per_param: usize,
) -> Result<f64>
where
    F: FnMut(&[Vec<f64>]) -> Result<f64, TensorError>,
{
    use rand::seq::index::sample;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
    let mut max_err = 0.0f64;
    for pi in 0..params.len() {
        let len = params[pi].len();
        let picks: Vec<usize> = if len <= per_param {
            (0..len).collect()
        } else {
            sample(&mut rng, len, per_param).into_vec()
        };
        for i in picks {
            let orig = params[pi][i];
            let mut best = f64::INFINITY;
            let mut eps = epsilon;
            for _ in 0..3 {
                params[pi][i] = orig + eps;
                let up = f(params)?;
                params[pi][i] = orig - eps;
                let down = f(params)?;
                let numeric = (up - down) / (2.0 * eps);
                // Coordinates that barely move the loss sit at the finite
                // difference noise floor, so the comparison gets an absolute
                // floor instead of a pure relative one.
                let denom = numeric.abs().max(analytic[pi][i].abs()).max(1e-6);
                best = best.min((numeric - analytic[pi][i]).abs() / denom);
                if best <= 1e-5 {
                    break;
                }
                eps /= 8.0;
            }
            params[pi][i] = orig;
            max_err = max_err.max(best);
        }
    }
    Ok(max_err)
}

#[derive(Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub scores_a: PathBuf,
    #[arg(long)]
    pub scores_b: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
}

pub fn cmd_fuse(args: &FuseArgs) -> Result<()> {
    eprintln!(
        "fuse: scores_a={} scores_b={} manifest={}",
        args.scores_a.display(), args.scores_b.display(), args.manifest.display()
    );
    let (ids_a, rows_a) = load_scores(&args.scores_a)?;
    let (ids_b, rows_b) = load_scores(&args.scores_b)?;
    if ids_a != ids_b {
        bail!(
            "score files disagree on samples ({} vs {} rows or different ids)",
            ids_a.len(), ids_b.len()
        );
    }
    let manifest = load_manifest(&args.manifest)?;
    let labels_by_id: BTreeMap<String, usize> = manifest
        .items
        .iter()
        .map(|item| (stem_of(&item.path), item.label))
        .collect();
    let labels = ids_a
        .iter()
        .map(|id| {
            labels_by_id
                .get(id)
                .copied()
                .with_context(|| format!("sample '{}' not present in manifest", id))
        })
        .collect::<Result<Vec<usize>>>()?;

    // fuse_scores validates both inputs as probability rows
    let preds = regina_core::fuse_scores(&rows_a, &rows_b)?;
    let fused: Vec<Vec<f64>> = rows_a
        .iter()
        .zip(&rows_b)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect();
    let classes = fused[0].len();
    let metrics = metrics_from_scores(&fused, &labels, classes)?;
    debug_assert!(preds
        .iter()
        .zip(&fused)
        .all(|(&p, row)| p == argmax(row)));
    print_metrics(&metrics);
    Ok(())
}

fn print_metrics(metrics: &Metrics) {
    println!("top1 {}", metrics.top1);
    println!("top5 {}", metrics.top5);
    for (c, acc) in metrics.per_class.iter().enumerate() {
        eprintln!("class {} accuracy {}", c, acc);
    }
}

fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

fn num_classes(manifest: &DatasetManifest) -> Result<usize> {
    let max = manifest
        .items
        .iter()
        .map(|i| i.label)
        .max()
        .context("manifest has no items")?;
    if max + 1 < 2 {
        bail!("manifest covers a single class; need at least two");
    }
    Ok(max + 1)
}

fn topology_for(joints: usize) -> Result<BoneTopology> {
    match joints {
        9 => Ok(synth_topology()),
        25 => Ok(BoneTopology::ntu25()),
        other => bail!("no built-in skeleton topology with {} joints", other),
    }
}

fn stem_of(path: &str) -> String {
    Path::new(path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string())
}

/// Load, preprocess, and descriptor-compute the given manifest items:
/// bone conversion first (when requested), then centering, then temporal
/// normalization to the model length, then the self-similarity matrix
/// (skipped when the model does not consume one).
fn load_examples(
    manifest: &DatasetManifest,
    base: &Path,
    indices: &[usize],
    stream: Stream,
    metric: Metric,
    config: &ModelConfig,
) -> Result<(Vec<Example>, Vec<String>)> {
    let topology = topology_for(config.joints)?;
    let needs_ssm = config.regina.enabled && !config.regina.force_ones;
    let mut dataset = Vec::with_capacity(indices.len());
    let mut ids = Vec::with_capacity(indices.len());
    for &i in indices {
        let item = &manifest.items[i];
        let raw = load_sequence(&base.join(&item.path))?;
        if raw.joints != config.joints {
            bail!(
                "{}: sequence has {} joints but the model expects {}",
                item.path, raw.joints, config.joints
            );
        }
        let seq = match stream {
            Stream::Joint => raw,
            Stream::Bone => raw.to_bone_stream(&topology)?,
        };
        let seq = seq.center_sequence(&topology)?.normalize_temporal(config.temporal)?;
        let ssm = if needs_ssm { Some(compute_ssm(&seq, metric)?) } else { None };
        dataset.push((seq, ssm));
        ids.push(stem_of(&item.path));
    }
    Ok((dataset, ids))
}
