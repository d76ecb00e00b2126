//! End-to-end checks of the `regina` binary: every subcommand, its error
//! paths, and artifact determinism.

use regina_core::{synth_topology, Model, ModelConfig};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use tempfile::tempdir;

fn regina(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_regina"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Tiny dataset for command tests: 8 sequences, 4 per split side under xsub.
fn small_dataset(dir: &Path) -> PathBuf {
    let out = regina(
        &[
            "synth", "--classes", "2", "--subjects", "2", "--cameras", "2", "--reps", "1",
            "--frames", "16", "--out", dir.to_str().unwrap(),
        ],
        &[],
    );
    assert!(out.status.success(), "synth failed: {}", stderr_of(&out));
    dir.join("manifest.json")
}

fn parse_metric_line(stdout: &str, name: &str) -> f64 {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{} ", name)))
        .unwrap_or_else(|| panic!("no '{}' line in: {}", name, stdout))
        .parse()
        .expect("metric parses")
}

#[test]
fn synth_is_deterministic_and_validates_flags() {
    let dir = tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let out = regina(
            &[
                "synth", "--classes", "3", "--subjects", "2", "--cameras", "2", "--reps", "1",
                "--frames", "8", "--seed", "7", "--out", d.to_str().unwrap(),
            ],
            &[],
        );
        assert!(out.status.success());
        assert!(stdout_of(&out).contains("12 sequences"), "3 x 2 x 2 x 1 = 12");
    }
    let names: Vec<String> = {
        let mut v: Vec<String> = fs::read_dir(&a)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        v.sort();
        v
    };
    assert_eq!(names.len(), 13, "12 sequences + manifest");
    for name in &names {
        let bytes_a = fs::read(a.join(name)).unwrap();
        let bytes_b = fs::read(b.join(name)).unwrap();
        assert_eq!(bytes_a, bytes_b, "{} differs between identical runs", name);
    }

    let bad = regina(
        &["synth", "--classes", "1", "--out", dir.path().join("c").to_str().unwrap()],
        &[],
    );
    assert!(!bad.status.success());
    assert!(stderr_of(&bad).contains("class"), "mentions the bad flag");
}

#[test]
fn ssm_command_exports_and_validates() {
    let dir = tempdir().unwrap();
    // noise-free so the still class is exactly constant
    let out = regina(
        &[
            "synth", "--classes", "2", "--subjects", "2", "--cameras", "2", "--reps", "1",
            "--frames", "8", "--noise", "0", "--out", dir.path().to_str().unwrap(),
        ],
        &[],
    );
    assert!(out.status.success());

    // class 0 is the still pose; its descriptor must be identically zero
    let still = dir.path().join("seq_00000.json");
    let csv_path = dir.path().join("still.csv");
    let out = regina(
        &["ssm", "--input", still.to_str().unwrap(), "--out", csv_path.to_str().unwrap()],
        &[],
    );
    assert!(out.status.success(), "{}", stderr_of(&out));
    assert!(stdout_of(&out).contains("symmetric"), "validation summary printed");
    let csv = fs::read_to_string(&csv_path).unwrap();
    for field in csv.split(|c| c == ',' || c == '\n').filter(|s| !s.is_empty()) {
        assert_eq!(field, "0", "still sequence has an all-zero descriptor");
    }

    // a moving sequence: l1 dominates l2 pointwise
    let moving = dir.path().join("seq_00004.json");
    let l2_path = dir.path().join("l2.csv");
    let l1_path = dir.path().join("l1.csv");
    assert!(regina(
        &["ssm", "--input", moving.to_str().unwrap(), "--out", l2_path.to_str().unwrap()],
        &[],
    )
    .status
    .success());
    assert!(regina(
        &[
            "ssm", "--input", moving.to_str().unwrap(), "--metric", "l1", "--out",
            l1_path.to_str().unwrap(),
        ],
        &[],
    )
    .status
    .success());
    let parse = |p: &Path| -> Vec<f64> {
        fs::read_to_string(p)
            .unwrap()
            .split(|c| c == ',' || c == '\n')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().unwrap())
            .collect()
    };
    let (l1, l2) = (parse(&l1_path), parse(&l2_path));
    assert_eq!(l1.len(), 64);
    assert!(l1.iter().zip(&l2).all(|(a, b)| a >= b), "l1 >= l2 pointwise");
    assert!(l2.iter().any(|&v| v > 0.0), "the wave class actually moves");

    // PGM export carries a valid P5 header
    let pgm_path = dir.path().join("ssm.pgm");
    assert!(regina(
        &[
            "ssm", "--input", moving.to_str().unwrap(), "--format", "pgm", "--out",
            pgm_path.to_str().unwrap(),
        ],
        &[],
    )
    .status
    .success());
    let pgm = fs::read(&pgm_path).unwrap();
    assert!(pgm.starts_with(b"P5\n8 8\n255\n"));
    assert_eq!(pgm.len(), b"P5\n8 8\n255\n".len() + 64);
}

#[test]
fn train_writes_initialized_checkpoint_at_zero_epochs() {
    let dir = tempdir().unwrap();
    let manifest = small_dataset(dir.path());
    let run = dir.path().join("run");
    let out = regina(
        &[
            "train", "--manifest", manifest.to_str().unwrap(), "--epochs", "0", "--seed", "3",
            "--out", run.to_str().unwrap(),
        ],
        &[],
    );
    assert!(out.status.success(), "{}", stderr_of(&out));
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history, "epoch,train_loss,train_top1,lr\n", "header only, no rows");

    // the checkpoint holds exactly the fresh initialization for that seed
    let (config, state, _) =
        regina_cli::formats::load_checkpoint(&run.join("checkpoint.json")).unwrap();
    let fresh = Model::new(config, &synth_topology(), 3).unwrap();
    assert_eq!(state, fresh.export_state());
}

#[test]
fn train_regina_off_drops_kernel_parameters() {
    let dir = tempdir().unwrap();
    let manifest = small_dataset(dir.path());
    let on = dir.path().join("on");
    let off = dir.path().join("off");
    for (mode, out_dir) in [("on", &on), ("off", &off)] {
        let out = regina(
            &[
                "train", "--manifest", manifest.to_str().unwrap(), "--regina", mode, "--epochs",
                "0", "--out", out_dir.to_str().unwrap(),
            ],
            &[],
        );
        assert!(out.status.success(), "{}", stderr_of(&out));
    }
    let kernel_count = |dir: &Path| {
        let (_, state, _) =
            regina_cli::formats::load_checkpoint(&dir.join("checkpoint.json")).unwrap();
        state.entries.keys().filter(|k| k.contains("taps.kernel")).count()
    };
    assert_eq!(kernel_count(&on), 3, "one kernel per block");
    assert_eq!(kernel_count(&off), 0, "baseline has none");
}

#[test]
fn fixed_seed_training_reruns_are_byte_identical() {
    let dir = tempdir().unwrap();
    let manifest = small_dataset(dir.path());
    let mut histories = Vec::new();
    for name in ["r1", "r2"] {
        let run = dir.path().join(name);
        let out = regina(
            &[
                "train", "--manifest", manifest.to_str().unwrap(), "--epochs", "2", "--seed",
                "11", "--out", run.to_str().unwrap(),
            ],
            &[],
        );
        assert!(out.status.success(), "{}", stderr_of(&out));
        histories.push(fs::read(run.join("history.csv")).unwrap());
    }
    assert_eq!(histories[0], histories[1]);
    let rows = String::from_utf8(histories[0].clone()).unwrap();
    assert_eq!(rows.lines().count(), 3, "header + 2 epochs");
}

#[test]
fn eval_writes_normalized_scores_and_rejects_mismatches() {
    let dir = tempdir().unwrap();
    let manifest = small_dataset(dir.path());
    let run = dir.path().join("run");
    assert!(regina(
        &[
            "train", "--manifest", manifest.to_str().unwrap(), "--epochs", "1", "--out",
            run.to_str().unwrap(),
        ],
        &[],
    )
    .status
    .success());

    let scores_path = dir.path().join("scores.csv");
    let out = regina(
        &[
            "eval", "--checkpoint", run.join("checkpoint.json").to_str().unwrap(), "--manifest",
            manifest.to_str().unwrap(), "--scores-out", scores_path.to_str().unwrap(),
        ],
        &[],
    );
    assert!(out.status.success(), "{}", stderr_of(&out));
    let stdout = stdout_of(&out);
    let top1 = parse_metric_line(&stdout, "top1");
    let top5 = parse_metric_line(&stdout, "top5");
    assert!((0.0..=1.0).contains(&top1));
    assert!(top5 >= top1);

    let (ids, rows) = regina_cli::formats::load_scores(&scores_path).unwrap();
    assert_eq!(ids.len(), 4, "xsub test side of 8 samples");
    for row in &rows {
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6, "row sums to {}", sum);
    }

    // checkpoint trained for 4 joints cannot score 9-joint data
    let tiny_ckpt = dir.path().join("tiny.json");
    let config = ModelConfig::tiny(2);
    let topo = regina_core::BoneTopology::new(4, 0, vec![(0, 1), (1, 2), (1, 3)]).unwrap();
    let model = Model::new(config.clone(), &topo, 0).unwrap();
    regina_cli::formats::save_checkpoint(
        &tiny_ckpt,
        &config,
        &model.export_state(),
        &Default::default(),
    )
    .unwrap();
    let out = regina(
        &[
            "eval", "--checkpoint", tiny_ckpt.to_str().unwrap(), "--manifest",
            manifest.to_str().unwrap(), "--scores-out",
            dir.path().join("x.csv").to_str().unwrap(),
        ],
        &[],
    );
    assert!(!out.status.success());
    assert!(stderr_of(&out).contains("joints"), "names the joint mismatch: {}", stderr_of(&out));
}

#[test]
fn gradcheck_passes_fails_under_fault_and_repeats() {
    let ok = regina(&["gradcheck", "--seed", "4"], &[]);
    assert!(ok.status.success(), "{}", stderr_of(&ok));
    let line = stdout_of(&ok);
    assert!(line.starts_with("max relative error "), "got: {}", line);
    let err: f64 = line.trim().rsplit(' ').next().unwrap().parse().unwrap();
    assert!(err <= 1e-4);

    let again = regina(&["gradcheck", "--seed", "4"], &[]);
    assert_eq!(stdout_of(&again), line, "fixed seed reports the identical error");

    let faulty = regina(&["gradcheck", "--seed", "4"], &[("REGINA_GRADCHECK_FAULT", "0.05")]);
    assert!(!faulty.status.success(), "corrupted backward must be caught");
    assert!(stderr_of(&faulty).contains("gradient check failed"));
}

#[test]
fn fuse_identity_hand_case_and_mismatch() {
    let dir = tempdir().unwrap();
    let manifest = small_dataset(dir.path());
    let run = dir.path().join("run");
    assert!(regina(
        &[
            "train", "--manifest", manifest.to_str().unwrap(), "--epochs", "1", "--out",
            run.to_str().unwrap(),
        ],
        &[],
    )
    .status
    .success());
    let scores = dir.path().join("scores.csv");
    let eval_out = regina(
        &[
            "eval", "--checkpoint", run.join("checkpoint.json").to_str().unwrap(), "--manifest",
            manifest.to_str().unwrap(), "--scores-out", scores.to_str().unwrap(),
        ],
        &[],
    );
    assert!(eval_out.status.success());
    let single_top1 = parse_metric_line(&stdout_of(&eval_out), "top1");

    // fusing a file with itself cannot change the prediction
    let fused = regina(
        &[
            "fuse", "--scores-a", scores.to_str().unwrap(), "--scores-b",
            scores.to_str().unwrap(), "--manifest", manifest.to_str().unwrap(),
        ],
        &[],
    );
    assert!(fused.status.success(), "{}", stderr_of(&fused));
    assert_eq!(parse_metric_line(&stdout_of(&fused), "top1"), single_top1);

    // hand-made two-sample case: stream A is right on sample one, stream B
    // overrules it on sample two
    let a_path = dir.path().join("a.csv");
    let b_path = dir.path().join("b.csv");
    let ids = vec!["seq_00000".to_string(), "seq_00001".to_string()];
    regina_cli::formats::save_scores(
        &a_path,
        &ids,
        &[vec![0.9, 0.1], vec![0.6, 0.4]],
    )
    .unwrap();
    regina_cli::formats::save_scores(
        &b_path,
        &ids,
        &[vec![0.8, 0.2], vec![0.1, 0.9]],
    )
    .unwrap();
    // both samples carry label 0 (class 0, cameras 0 and 1). fused row 0:
    // (1.7, 0.3) -> class 0, correct; row 1: (0.7, 1.3) -> stream B drags the
    // prediction to class 1, incorrect. hand-computed top1 = 1/2.
    let fused = regina(
        &[
            "fuse", "--scores-a", a_path.to_str().unwrap(), "--scores-b",
            b_path.to_str().unwrap(), "--manifest", manifest.to_str().unwrap(),
        ],
        &[],
    );
    assert!(fused.status.success(), "{}", stderr_of(&fused));
    assert_eq!(parse_metric_line(&stdout_of(&fused), "top1"), 0.5);

    // row-count mismatch is an error
    regina_cli::formats::save_scores(&b_path, &ids[..1].to_vec(), &[vec![0.8, 0.2]]).unwrap();
    let bad = regina(
        &[
            "fuse", "--scores-a", a_path.to_str().unwrap(), "--scores-b",
            b_path.to_str().unwrap(), "--manifest", manifest.to_str().unwrap(),
        ],
        &[],
    );
    assert!(!bad.status.success());
}
