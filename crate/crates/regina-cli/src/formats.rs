//! On-disk formats: sequence and manifest JSON, checkpoint JSON, history and
//! score CSVs, and self-similarity exports (CSV / binary PGM).
//!
//! All float output uses the shortest round-trippable decimal form, so every
//! artifact reloads bit-for-bit and fixed-seed reruns are byte-identical.

use anyhow::{bail, Context, Result};
use regina_core::{
    BlockConfig, CheckpointState, DatasetManifest, EpochStats, ManifestItem, Metric, ModelConfig,
    ReginaConfig, SelfSimilarityMatrix, SkeletonSequence, Split, Stream,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

/// Current checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SequenceFile {
    joints: usize,
    frames: usize,
    dims: usize,
    stream: String,
    label: usize,
    subject: u32,
    camera: u32,
    /// Frame-major nested coordinates, `data[t][n][c]`.
    data: Vec<Vec<Vec<f64>>>,
}

pub fn save_sequence(path: &Path, seq: &SkeletonSequence) -> Result<()> {
    if seq.data.iter().any(|v| !v.is_finite()) {
        bail!("refusing to save {}: sequence contains non-finite values", path.display());
    }
    let (n, t, c) = (seq.joints, seq.frames, seq.dims);
    let data: Vec<Vec<Vec<f64>>> = (0..t)
        .map(|f| {
            (0..n)
                .map(|j| {
                    let base = (j * t + f) * c;
                    seq.data[base..base + c].to_vec()
                })
                .collect()
        })
        .collect();
    let file = SequenceFile {
        joints: n,
        frames: t,
        dims: c,
        stream: seq.stream.as_str().to_string(),
        label: seq.label,
        subject: seq.subject,
        camera: seq.camera,
        data,
    };
    write_text(path, &(serde_json::to_string(&file)? + "\n"))
}

pub fn load_sequence(path: &Path) -> Result<SkeletonSequence> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading sequence {}", path.display()))?;
    let file: SequenceFile = serde_json::from_str(&text)
        .with_context(|| format!("parsing sequence {}", path.display()))?;
    let stream = match file.stream.as_str() {
        "joint" => Stream::Joint,
        "bone" => Stream::Bone,
        other => bail!("{}: unknown stream '{}'", path.display(), other),
    };
    let (n, t, c) = (file.joints, file.frames, file.dims);
    if file.data.len() != t {
        bail!("{}: {} frames in data, header says {}", path.display(), file.data.len(), t);
    }
    let mut data = vec![0.0; n * t * c];
    for (f, frame) in file.data.iter().enumerate() {
        if frame.len() != n {
            bail!("{}: frame {} has {} joints, header says {}", path.display(), f, frame.len(), n);
        }
        for (j, coords) in frame.iter().enumerate() {
            if coords.len() != c {
                bail!(
                    "{}: frame {} joint {} has {} dims, header says {}",
                    path.display(), f, j, coords.len(), c
                );
            }
            for (d, &v) in coords.iter().enumerate() {
                data[(j * t + f) * c + d] = v;
            }
        }
    }
    SkeletonSequence::new(n, t, c, data, file.label, file.subject, file.camera, stream)
        .with_context(|| format!("validating sequence {}", path.display()))
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    split: String,
    train_ids: Vec<u32>,
    test_ids: Vec<u32>,
    items: Vec<ManifestItemFile>,
}

#[derive(Serialize, Deserialize)]
struct ManifestItemFile {
    path: String,
    label: usize,
    subject: u32,
    camera: u32,
}

pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let file = ManifestFile {
        split: manifest.split.as_str().to_string(),
        train_ids: manifest.train_ids.clone(),
        test_ids: manifest.test_ids.clone(),
        items: manifest
            .items
            .iter()
            .map(|i| ManifestItemFile {
                path: i.path.clone(),
                label: i.label,
                subject: i.subject,
                camera: i.camera,
            })
            .collect(),
    };
    write_text(path, &(serde_json::to_string_pretty(&file)? + "\n"))
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading manifest {}", path.display()))?;
    let file: ManifestFile = serde_json::from_str(&text)
        .with_context(|| format!("parsing manifest {}", path.display()))?;
    let split = Split::from_str(&file.split)
        .with_context(|| format!("parsing manifest {}", path.display()))?;
    Ok(DatasetManifest {
        split,
        train_ids: file.train_ids,
        test_ids: file.test_ids,
        items: file
            .items
            .into_iter()
            .map(|i| ManifestItem {
                path: i.path,
                label: i.label,
                subject: i.subject,
                camera: i.camera,
            })
            .collect(),
    })
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    config: ConfigFile,
    params: BTreeMap<String, ParamFile>,
    meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct ConfigFile {
    dims: usize,
    joints: usize,
    temporal: usize,
    num_classes: usize,
    temporal_kernel: usize,
    blocks: Vec<BlockFile>,
    regina: ReginaFile,
}

#[derive(Serialize, Deserialize)]
struct BlockFile {
    c_in: usize,
    c_out: usize,
    stride: usize,
}

#[derive(Serialize, Deserialize)]
struct ReginaFile {
    enabled: bool,
    kernel_size: usize,
    learnable_conv: bool,
    shared_kernel: bool,
    force_ones: bool,
}

#[derive(Serialize, Deserialize)]
struct ParamFile {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub fn save_checkpoint(
    path: &Path,
    config: &ModelConfig,
    state: &CheckpointState,
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        config: ConfigFile {
            dims: config.dims,
            joints: config.joints,
            temporal: config.temporal,
            num_classes: config.num_classes,
            temporal_kernel: config.temporal_kernel,
            blocks: config
                .blocks
                .iter()
                .map(|b| BlockFile { c_in: b.c_in, c_out: b.c_out, stride: b.stride })
                .collect(),
            regina: ReginaFile {
                enabled: config.regina.enabled,
                kernel_size: config.regina.kernel_size,
                learnable_conv: config.regina.learnable_conv,
                shared_kernel: config.regina.shared_kernel,
                force_ones: config.regina.force_ones,
            },
        },
        params: state
            .entries
            .iter()
            .map(|(name, (shape, data))| {
                (name.clone(), ParamFile { shape: shape.clone(), data: data.clone() })
            })
            .collect(),
        meta: meta.clone(),
    };
    write_text(path, &(serde_json::to_string(&file)? + "\n"))
}

pub fn load_checkpoint(
    path: &Path,
) -> Result<(ModelConfig, CheckpointState, BTreeMap<String, String>)> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading checkpoint {}", path.display()))?;
    let file: CheckpointFile = serde_json::from_str(&text)
        .with_context(|| format!("parsing checkpoint {}", path.display()))?;
    if file.version != CHECKPOINT_VERSION {
        bail!(
            "{}: unsupported checkpoint version {} (expected {})",
            path.display(), file.version, CHECKPOINT_VERSION
        );
    }
    let config = ModelConfig {
        dims: file.config.dims,
        joints: file.config.joints,
        temporal: file.config.temporal,
        num_classes: file.config.num_classes,
        temporal_kernel: file.config.temporal_kernel,
        blocks: file
            .config
            .blocks
            .iter()
            .map(|b| BlockConfig { c_in: b.c_in, c_out: b.c_out, stride: b.stride })
            .collect(),
        regina: ReginaConfig {
            enabled: file.config.regina.enabled,
            kernel_size: file.config.regina.kernel_size,
            learnable_conv: file.config.regina.learnable_conv,
            shared_kernel: file.config.regina.shared_kernel,
            force_ones: file.config.regina.force_ones,
        },
    };
    config
        .validate()
        .with_context(|| format!("validating checkpoint config {}", path.display()))?;
    for (name, p) in &file.params {
        let numel: usize = p.shape.iter().product();
        if p.data.len() != numel {
            bail!(
                "{}: parameter '{}' has {} values for shape {:?}",
                path.display(), name, p.data.len(), p.shape
            );
        }
    }
    let state = CheckpointState {
        entries: file
            .params
            .into_iter()
            .map(|(name, p)| (name, (p.shape, p.data)))
            .collect(),
    };
    Ok((config, state, file.meta))
}

pub fn save_history(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut out = String::from("epoch,train_loss,train_top1,lr\n");
    for row in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.epoch, row.train_loss, row.train_top1, row.lr
        ));
    }
    write_text(path, &out)
}

pub fn save_scores(path: &Path, ids: &[String], scores: &[Vec<f64>]) -> Result<()> {
    if ids.len() != scores.len() {
        bail!("{} sample ids for {} score rows", ids.len(), scores.len());
    }
    let classes = scores.first().map(Vec::len).unwrap_or(0);
    let mut out = String::from("sample_id");
    for c in 0..classes {
        out.push_str(&format!(",c{}", c));
    }
    out.push('\n');
    for (id, row) in ids.iter().zip(scores) {
        out.push_str(id);
        for v in row {
            out.push_str(&format!(",{}", v));
        }
        out.push('\n');
    }
    write_text(path, &out)
}

pub fn load_scores(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading scores {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().with_context(|| format!("{}: empty scores file", path.display()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"sample_id") || cols.len() < 2 {
        bail!("{}: bad scores header '{}'", path.display(), header);
    }
    let classes = cols.len() - 1;
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != classes + 1 {
            bail!("{}: line {} has {} fields, expected {}", path.display(), ln + 2, fields.len(), classes + 1);
        }
        ids.push(fields[0].to_string());
        let row = fields[1..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .with_context(|| format!("{}: line {}: bad number '{}'", path.display(), ln + 2, f))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok((ids, rows))
}

pub fn ssm_to_csv(ssm: &SelfSimilarityMatrix) -> String {
    let t = ssm.frames;
    let mut out = String::new();
    for p in 0..t {
        for q in 0..t {
            if q > 0 {
                out.push(',');
            }
            out.push_str(&format!("{}", ssm.get(p, q)));
        }
        out.push('\n');
    }
    out
}

/// Binary PGM (P5) with min-max normalization to 0..255. A constant matrix
/// maps to all-zero pixels.
pub fn ssm_to_pgm(ssm: &SelfSimilarityMatrix) -> Vec<u8> {
    let t = ssm.frames;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in 0..t {
        for q in 0..t {
            let v = ssm.get(p, q);
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let span = hi - lo;
    let mut out = format!("P5\n{} {}\n255\n", t, t).into_bytes();
    for p in 0..t {
        for q in 0..t {
            let pixel = if span > 0.0 {
                ((ssm.get(p, q) - lo) / span * 255.0).round() as u8
            } else {
                0
            };
            out.push(pixel);
        }
    }
    out
}

pub fn metric_name(metric: Metric) -> &'static str {
    match metric {
        Metric::L1 => "l1",
        Metric::L2 => "l2",
    }
}

pub fn parse_metric(s: &str) -> Result<Metric> {
    match s {
        "l1" => Ok(Metric::L1),
        "l2" => Ok(Metric::L2),
        other => bail!("unknown metric '{}'", other),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating directory {}", parent.display()))?;
        }
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating directory {}", parent.display()))?;
        }
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use regina_core::{compute_ssm, synth_generate, SynthConfig};
    use tempfile::tempdir;

    fn sample_sequence() -> SkeletonSequence {
        let cfg = SynthConfig {
            classes: 2,
            subjects: 2,
            cameras: 2,
            reps: 1,
            frames: 6,
            noise_std: 0.05,
            seed: 3,
        };
        let (_, seqs) = synth_generate(&cfg).unwrap();
        seqs.into_iter().next().unwrap()
    }

    #[test]
    fn sequence_round_trip_is_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("seq.json");
        let seq = sample_sequence();
        save_sequence(&path, &seq).unwrap();
        let back = load_sequence(&path).unwrap();
        assert_eq!(seq, back);
    }

    #[test]
    fn sequence_save_rejects_non_finite() {
        let dir = tempdir().unwrap();
        let mut seq = sample_sequence();
        seq.data[5] = f64::NAN;
        let err = save_sequence(&dir.path().join("seq.json"), &seq).unwrap_err();
        assert!(format!("{}", err).contains("non-finite"));
    }

    #[test]
    fn sequence_load_reports_shape_mismatch_with_path() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(
            &path,
            r#"{"joints":2,"frames":2,"dims":3,"stream":"joint","label":0,"subject":0,"camera":0,
               "data":[[[0,0,0],[1,1,1]],[[0,0,0]]]}"#,
        )
        .unwrap();
        let err = load_sequence(&path).unwrap_err();
        let msg = format!("{}", err);
        assert!(msg.contains("bad.json") && msg.contains("frame 1"), "got {}", msg);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let cfg = SynthConfig {
            classes: 2,
            subjects: 2,
            cameras: 2,
            reps: 1,
            frames: 4,
            noise_std: 0.0,
            seed: 0,
        };
        let (manifest, _) = synth_generate(&cfg).unwrap();
        save_manifest(&path, &manifest).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), manifest);
    }

    #[test]
    fn checkpoint_rejects_bad_version_and_shape() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let config = ModelConfig::tiny(2);
        let mut entries = std::collections::BTreeMap::new();
        entries.insert("head.b".to_string(), (vec![2], vec![0.0, 0.0]));
        let state = CheckpointState { entries };
        save_checkpoint(&path, &config, &state, &BTreeMap::new()).unwrap();
        let (cfg2, state2, _) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg2, config);
        assert_eq!(state2, state);

        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace("\"version\":1", "\"version\":9")).unwrap();
        assert!(format!("{}", load_checkpoint(&path).unwrap_err()).contains("version 9"));

        let bad_shape = text.replace("\"shape\":[2]", "\"shape\":[3]");
        std::fs::write(&path, bad_shape).unwrap();
        let msg = format!("{}", load_checkpoint(&path).unwrap_err());
        assert!(msg.contains("head.b"), "error names the parameter: {}", msg);

        let no_version = text.replace("\"version\":1,", "");
        std::fs::write(&path, no_version).unwrap();
        assert!(load_checkpoint(&path).is_err(), "missing version is rejected");
    }

    #[test]
    fn history_csv_layout() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("history.csv");
        let history = vec![
            EpochStats { epoch: 0, train_loss: 1.5, train_top1: 0.25, lr: 0.01 },
            EpochStats { epoch: 1, train_loss: 0.75, train_top1: 0.5, lr: 0.01 },
        ];
        save_history(&path, &history).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "epoch,train_loss,train_top1,lr\n0,1.5,0.25,0.01\n1,0.75,0.5,0.01\n");
    }

    #[test]
    fn scores_round_trip_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        let ids = vec!["seq_00000".to_string(), "seq_00001".to_string()];
        // deliberately awkward decimals
        let rows = vec![vec![0.1, 0.2, 0.7], vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]];
        save_scores(&path, &ids, &rows).unwrap();
        let (ids2, rows2) = load_scores(&path).unwrap();
        assert_eq!(ids, ids2);
        assert_eq!(rows, rows2);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("sample_id,c0,c1,c2\n"));
    }

    #[test]
    fn ssm_exports() {
        let seq = sample_sequence();
        let ssm = compute_ssm(&seq, Metric::L2).unwrap();
        let csv = ssm_to_csv(&ssm);
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.lines().next().unwrap().starts_with("0,"), "hollow diagonal leads row 0");

        let pgm = ssm_to_pgm(&ssm);
        assert!(pgm.starts_with(b"P5\n6 6\n255\n"));
        assert_eq!(pgm.len(), "P5\n6 6\n255\n".len() + 36);

        // constant matrix maps to zero pixels
        let flat = SelfSimilarityMatrix::new(2, Metric::L2, vec![0.0; 4]).unwrap();
        let pgm = ssm_to_pgm(&flat);
        assert_eq!(&pgm["P5\n2 2\n255\n".len()..], &[0, 0, 0, 0]);
    }
}
