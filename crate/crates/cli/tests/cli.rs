//! End-to-end checks of the command-line surface: flags, output formats,
//! exit codes, and the error contract.

use std::path::Path;
use std::process::{Command, Output};

fn mmfuse(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmfuse"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, contents: &str) {
    std::fs::write(dir.join(name), contents).unwrap();
}

const TINY_TRAIN_SPEC: &str = "videos = 40\nseed = 11\nframes_min = 2\nframes_max = 4\n";
const TINY_VAL_SPEC: &str = "videos = 15\nfirst_index = 40\nseed = 11\nframes_min = 2\nframes_max = 4\n";
const TINY_CONFIG: &str = "\
fusion.k = 2
fusion.o = 8
agg.frames = 3
train.batch_size = 8
train.max_steps = 30
train.eval_every = 10
train.seed = 5
";

fn gen_tiny_pair(dir: &Path) {
    write(dir, "train_spec.txt", TINY_TRAIN_SPEC);
    write(dir, "val_spec.txt", TINY_VAL_SPEC);
    let out = mmfuse(
        &["gen", "--spec", "train_spec.txt", "--out", "train.mmfv"],
        dir,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = mmfuse(&["gen", "--spec", "val_spec.txt", "--out", "val.mmfv"], dir);
    assert!(out.status.success());
}

#[test]
fn gen_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "spec.txt", "videos = 30\nseed = 3\n");
    for name in ["a.mmfv", "b.mmfv"] {
        let out = mmfuse(&["gen", "--spec", "spec.txt", "--out", name], dir.path());
        assert!(out.status.success());
    }
    let a = std::fs::read(dir.path().join("a.mmfv")).unwrap();
    let b = std::fs::read(dir.path().join("b.mmfv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn gen_default_spec_has_2500_videos() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "spec.txt", "");
    let out = mmfuse(&["gen", "--spec", "spec.txt", "--out", "d.mmfv"], dir.path());
    assert!(out.status.success());
    let ds = mmfuse_core::data::read_dataset(dir.path().join("d.mmfv")).unwrap();
    assert_eq!(ds.len(), 2500);
    assert_eq!(ds.visual_dim, 32);
    assert_eq!(ds.audio_dim, 8);
    assert_eq!(ds.num_classes, 10);
}

#[test]
fn gen_missing_spec_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = mmfuse(&["gen", "--spec", "nope.txt", "--out", "d.mmfv"], dir.path());
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error:"), "stderr: {stderr}");
    assert_eq!(stderr.trim().lines().count(), 1, "multi-line error: {stderr}");
}

#[test]
fn train_writes_checkpoint_and_log() {
    let dir = tempfile::tempdir().unwrap();
    gen_tiny_pair(dir.path());
    write(dir.path(), "cfg.txt", TINY_CONFIG);
    let out = mmfuse(
        &[
            "train", "--config", "cfg.txt", "--data", "train.mmfv", "--val", "val.mmfv",
            "--out", "model.mmck",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("model.mmck").exists());
    let log = std::fs::read_to_string(dir.path().join("model.mmck.log")).unwrap();
    assert_eq!(log.lines().count(), 3); // floor(30 / 10)
    for line in log.lines() {
        assert_eq!(line.split('\t').count(), 4, "bad log line: {line}");
    }
}

#[test]
fn train_supports_concat_baseline() {
    let dir = tempfile::tempdir().unwrap();
    gen_tiny_pair(dir.path());
    write(
        dir.path(),
        "cfg.txt",
        &format!("{TINY_CONFIG}fusion.kind = concat\n"),
    );
    let out = mmfuse(
        &[
            "train", "--config", "cfg.txt", "--data", "train.mmfv", "--val", "val.mmfv",
            "--out", "m.mmck",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_rejects_unknown_config_key() {
    let dir = tempfile::tempdir().unwrap();
    gen_tiny_pair(dir.path());
    write(dir.path(), "cfg.txt", "fusion.rank = 3\n");
    let out = mmfuse(
        &[
            "train", "--config", "cfg.txt", "--data", "train.mmfv", "--val", "val.mmfv",
            "--out", "m.mmck",
        ],
        dir.path(),
    );
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("fusion.rank"), "stderr: {stderr}");
}

#[test]
fn eval_prints_stable_single_line() {
    let dir = tempfile::tempdir().unwrap();
    gen_tiny_pair(dir.path());
    write(dir.path(), "cfg.txt", TINY_CONFIG);
    let out = mmfuse(
        &[
            "train", "--config", "cfg.txt", "--data", "train.mmfv", "--val", "val.mmfv",
            "--out", "model.mmck",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let run = || {
        let out = mmfuse(
            &["eval", "--ckpt", "model.mmck", "--data", "val.mmfv", "--frames", "3"],
            dir.path(),
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    let first = run();
    let second = run();
    assert_eq!(first, second);
    let line = first.trim();
    assert_eq!(line.lines().count(), 1);
    let parts: Vec<&str> = line.split(' ').collect();
    assert_eq!(parts.len(), 2, "bad eval output: {line}");
    let gap: f64 = parts[0].strip_prefix("gap=").unwrap().parse().unwrap();
    let loss: f64 = parts[1].strip_prefix("loss=").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&gap));
    assert!(loss.is_finite());
}

#[test]
fn eval_rejects_mismatched_dataset() {
    let dir = tempfile::tempdir().unwrap();
    gen_tiny_pair(dir.path());
    write(dir.path(), "cfg.txt", TINY_CONFIG);
    let out = mmfuse(
        &[
            "train", "--config", "cfg.txt", "--data", "train.mmfv", "--val", "val.mmfv",
            "--out", "model.mmck",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    // A dataset with different feature dims.
    write(dir.path(), "other_spec.txt", "videos = 5\nvisual_dim = 16\naudio_dim = 4\n");
    let out = mmfuse(
        &["gen", "--spec", "other_spec.txt", "--out", "other.mmfv"],
        dir.path(),
    );
    assert!(out.status.success());
    let out = mmfuse(
        &["eval", "--ckpt", "model.mmck", "--data", "other.mmfv"],
        dir.path(),
    );
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error:"), "stderr: {stderr}");
}

#[test]
fn gradcheck_passes_and_reports_per_operator() {
    let dir = tempfile::tempdir().unwrap();
    let out = mmfuse(&["gradcheck", "--seed", "42", "--rounds", "2"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    for op in ["mfb", "fc_concat", "avgpool", "dbof", "netvlad", "moe", "bce_loss"] {
        let line = stdout
            .lines()
            .find(|l| l.starts_with(op))
            .unwrap_or_else(|| panic!("no report line for {op}: {stdout}"));
        assert!(line.contains("max_rel_err="), "line: {line}");
        assert!(line.contains("PASS"), "line: {line}");
    }
}

#[test]
fn gradcheck_detects_perturbed_gradient() {
    let dir = tempfile::tempdir().unwrap();
    let out = mmfuse(
        &["gradcheck", "--seed", "42", "--rounds", "1", "--perturb", "moe"],
        dir.path(),
    );
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("moe"), "stderr: {stderr}");
}

#[test]
fn compare_emits_five_deterministic_rows() {
    let dir = tempfile::tempdir().unwrap();
    gen_tiny_pair(dir.path());
    write(dir.path(), "cfg.txt", TINY_CONFIG);
    let run = || {
        let out = mmfuse(
            &[
                "compare", "--config", "cfg.txt", "--data", "train.mmfv", "--val", "val.mmfv",
                "--log-dir", "logs",
            ],
            dir.path(),
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    let first = run();
    let second = run();
    assert_eq!(first, second, "compare must be deterministic");
    let rows: Vec<&str> = first.trim().lines().collect();
    assert_eq!(rows.len(), 5);
    for (row, variant) in rows
        .iter()
        .zip(["audio_only", "video_only", "concat", "fc_concat", "mfb"])
    {
        let (name, gap) = row.split_once('\t').unwrap();
        assert_eq!(name, variant);
        let gap: f64 = gap.parse().unwrap();
        assert!((0.0..=1.0).contains(&gap));
        assert!(dir.path().join("logs").join(format!("{variant}.log")).exists());
    }
}
