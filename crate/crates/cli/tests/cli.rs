//! End-to-end checks of the command-line surface: exit codes, determinism
//! of artifacts, and the full gen-data -> train -> sample -> eval pipeline
//! at a miniature configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_pairgen")
}

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .env("PAIRGEN_OUT_ROOT", dir.join("runs"))
        .output()
        .expect("spawn pairgen")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Miniature config: tiny schedule, tiny net, small dataset. Keeps the full
/// pipeline in test-friendly time.
const TINY_CONFIG: &str = "\
[schedule]
timesteps = 64
beta_start = 1e-4
beta_end = 0.02
sample_steps = 16

[model]
base_channels = 8
channel_mult = 1,2
blocks_per_level = 1
time_embed_dim = 16

[train]
batch_size = 4
steps = 30
learning_rate = 1e-3
seed = 7
checkpoint_every = 0

[data]
image_size = 16
count = 64
seed = 3

[sample]
count = 4
seed = 7
";

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.cfg");
    std::fs::write(&path, TINY_CONFIG).unwrap();
    path
}

fn read_bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

#[test]
fn verify_passes_on_a_fresh_checkout() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["verify", "--out", "v"], dir.path());
    assert_code(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().filter(|l| l.starts_with("PASS ")).count() >= 5);
    assert!(!stdout.contains("FAIL"));
    assert!(dir.path().join("v/run.log").exists());
}

#[test]
fn invalid_configs_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    // Batch size zero.
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "[train]\nbatch_size = 0\n").unwrap();
    let out = run(
        &["train", "--model", "guider", "--data", "x", "--config", bad.to_str().unwrap()],
        dir.path(),
    );
    assert_code(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error code=2"));

    // Unknown key (typo safety).
    let typo = dir.path().join("typo.cfg");
    std::fs::write(&typo, "[train]\nbatchsize = 4\n").unwrap();
    let out = run(&["verify", "--config", typo.to_str().unwrap()], dir.path());
    assert_code(&out, 2);

    // Missing config file.
    let out = run(&["verify", "--config", "does-not-exist.cfg"], dir.path());
    assert_code(&out, 2);
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = run(
        &[
            "sample",
            "--guider",
            "nope.pdck",
            "--cond",
            "nope.pdck",
            "--config",
            cfg.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_code(&out, 5);
}

#[test]
fn pipeline_runs_end_to_end_with_deterministic_samples() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let cfg = cfg.to_str().unwrap();

    // gen-data twice -> byte-identical datasets.
    let out = run(&["gen-data", "--config", cfg, "--out", "data"], dir.path());
    assert_code(&out, 0);
    let out = run(&["gen-data", "--config", cfg, "--out", "data2"], dir.path());
    assert_code(&out, 0);
    for name in ["mask_00000.pgm", "image_00000.pgm", "image_00063.pgm"] {
        assert_eq!(
            read_bytes(&dir.path().join("data").join(name)),
            read_bytes(&dir.path().join("data2").join(name)),
            "{name} differs between identical gen-data runs"
        );
    }

    // Train both models.
    let out = run(
        &["train", "--model", "guider", "--data", "data", "--config", cfg, "--out", "g"],
        dir.path(),
    );
    assert_code(&out, 0);
    let out = run(
        &["train", "--model", "cond", "--data", "data", "--config", cfg, "--out", "c"],
        dir.path(),
    );
    assert_code(&out, 0);
    let guider = dir.path().join("g/model_guider.pdck");
    let cond = dir.path().join("c/model_cond.pdck");
    assert!(guider.exists() && cond.exists());

    // Training is deterministic: retrain the guider, compare bytes.
    let out = run(
        &["train", "--model", "guider", "--data", "data", "--config", cfg, "--out", "g2"],
        dir.path(),
    );
    assert_code(&out, 0);
    assert_eq!(
        read_bytes(&guider),
        read_bytes(&dir.path().join("g2/model_guider.pdck")),
        "checkpoints differ between identical training runs"
    );
    assert_eq!(
        read_bytes(&dir.path().join("g/losses.txt")),
        read_bytes(&dir.path().join("g2/losses.txt")),
        "loss traces differ between identical training runs"
    );

    // Sample twice with the same seed -> byte-identical outputs.
    let sample_args = |out_name: &str| {
        vec![
            "sample".to_string(),
            "--n".into(),
            "4".into(),
            "--seed".into(),
            "7".into(),
            "--guider".into(),
            guider.to_str().unwrap().into(),
            "--cond".into(),
            cond.to_str().unwrap().into(),
            "--config".into(),
            cfg.into(),
            "--out".into(),
            out_name.into(),
        ]
    };
    let args = sample_args("s1");
    let out = run(&args.iter().map(|s| s.as_str()).collect::<Vec<_>>(), dir.path());
    assert_code(&out, 0);
    let args = sample_args("s2");
    let out = run(&args.iter().map(|s| s.as_str()).collect::<Vec<_>>(), dir.path());
    assert_code(&out, 0);
    for i in 0..4 {
        for kind in ["mask", "image"] {
            let name = format!("{kind}_{i:05}.pgm");
            assert_eq!(
                read_bytes(&dir.path().join("s1").join(&name)),
                read_bytes(&dir.path().join("s2").join(&name)),
                "{name} differs between identical sample runs"
            );
        }
    }
    assert_eq!(
        read_bytes(&dir.path().join("s1/manifest.txt")),
        read_bytes(&dir.path().join("s2/manifest.txt"))
    );

    // Eval needs >= 64 samples for the feature distance; sample 64 and score.
    let args = {
        let mut a = sample_args("s64");
        a[2] = "64".into();
        a
    };
    let out = run(&args.iter().map(|s| s.as_str()).collect::<Vec<_>>(), dir.path());
    assert_code(&out, 0);
    let out = run(
        &["eval", "--samples", "s64", "--data", "data", "--config", cfg, "--out", "e"],
        dir.path(),
    );
    assert_code(&out, 0);
    let report = std::fs::read_to_string(dir.path().join("e/report.txt")).unwrap();
    assert!(report.contains("metric fid_lite"));
    assert!(report.contains("pair_iou_mean = "));

    // Too few samples for eval is a configuration-class failure.
    let out = run(
        &["eval", "--samples", "s1", "--data", "data", "--config", cfg, "--out", "e2"],
        dir.path(),
    );
    assert_code(&out, 3);
}
