//! End-to-end tests that drive the compiled `mcae` binary the way a user
//! would: real argument parsing, real files, real exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

/// Tiny geometry so full pipeline runs finish in seconds.
const MICRO_CFG: &str = "\
encoder.embed_dim = 8
encoder.depth = 1
encoder.heads = 1
encoder.patch_size = 4
encoder.image_size = 8
decoder.width = 8
decoder.depth = 1
decoder.heads = 1
schedule.epochs = 2
schedule.batch_size = 4
schedule.warmup_epochs = 1
schedule.switch_epoch = 1
finetune.epochs = 2
finetune.batch_size = 4
finetune.warmup_epochs = 1
";

fn mcae(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcae"))
        .args(args)
        .current_dir(dir)
        .env_remove("MCAE_OUT_DIR")
        .output()
        .expect("binary should spawn")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_micro_cfg(dir: &Path) {
    fs::write(dir.join("micro.cfg"), MICRO_CFG).expect("config should write");
}

fn synth(dir: &Path, domains: &str, out: &str) {
    let out_dir = format!("{out}_log");
    let args = [
        "synth-data",
        "--domains",
        domains,
        "--per-class",
        "3",
        "--image-size",
        "8",
        "--out",
        out,
        "--out-dir",
        &out_dir,
    ];
    assert_ok(&mcae(dir, &args), "synth-data");
}

#[test]
fn help_shows_every_tunable_with_its_default() {
    let dir = tempfile::tempdir().expect("tempdir");
    let out = mcae(dir.path(), &["pretrain", "--help"]);
    assert_ok(&out, "pretrain --help");
    let text = String::from_utf8_lossy(&out.stdout);
    for needle in [
        "--mask-ratio",
        "[default: 0.85]",
        "--decoder-width",
        "[default: 512]",
        "--decoder-depth",
        "[default: 8]",
        "--tau",
        "[default: 0.1]",
        "--lambda-cross",
        "[default: 2.0]",
        "--lambda-same",
        "--lambda-spoof",
        "[default: 1.0]",
        "--beta",
        "--epsilon",
        "[default: 0.01]",
        "--switch-epoch",
        "[default: 50]",
        "--gate-mode",
        "[default: either]",
        "--seed",
        "--epochs",
        "--batch-size",
        "--config",
        "--out-dir",
        "--data",
    ] {
        assert!(
            text.contains(needle),
            "help text missing {needle:?}:\n{text}"
        );
    }
}

#[test]
fn usage_errors_and_config_errors_exit_with_code_one() {
    let dir = tempfile::tempdir().expect("tempdir");
    let out = mcae(dir.path(), &["pretrain", "--data", "x", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1), "unknown flag should exit 1");

    fs::write(dir.path().join("bad.cfg"), "nonsense.key = 3\n").expect("write");
    let out = mcae(
        dir.path(),
        &["verify-theory", "--config", "bad.cfg", "--out-dir", "t"],
    );
    assert_eq!(
        out.status.code(),
        Some(1),
        "unknown config key should exit 1"
    );
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("configuration error"),
        "stderr should name the failure kind: {stderr}"
    );

    let out = mcae(
        dir.path(),
        &[
            "pretrain",
            "--data",
            "x",
            "--mask-ratio",
            "1.5",
            "--out-dir",
            "t",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(1),
        "out-of-range flag should exit 1"
    );
}

#[test]
fn missing_data_directory_is_a_runtime_error() {
    let dir = tempfile::tempdir().expect("tempdir");
    let out = mcae(
        dir.path(),
        &["pretrain", "--data", "no/such/dir", "--out-dir", "t"],
    );
    assert_eq!(
        out.status.code(),
        Some(2),
        "unreadable data root should exit 2"
    );
}

#[test]
fn synthesis_is_reproducible_and_leaves_a_resolved_config() {
    let dir = tempfile::tempdir().expect("tempdir");
    synth(dir.path(), "2", "a");
    synth(dir.path(), "2", "b");

    assert!(dir.path().join("a_log/resolved.cfg").is_file());
    let sample = "domain1/spoof/0002.png";
    let first = fs::read(dir.path().join("a").join(sample)).expect("first run sample");
    let second = fs::read(dir.path().join("b").join(sample)).expect("second run sample");
    assert_eq!(first, second, "same seed must produce identical pixels");

    let count = |root: &Path| {
        let mut n = 0;
        for domain in fs::read_dir(root).expect("domains") {
            for class in fs::read_dir(domain.expect("entry").path()).expect("classes") {
                n += fs::read_dir(class.expect("entry").path())
                    .expect("files")
                    .count();
            }
        }
        n
    };
    assert_eq!(
        count(&dir.path().join("a")),
        12,
        "2 domains x 2 classes x 3"
    );
    assert_eq!(count(&dir.path().join("a")), count(&dir.path().join("b")));
}

#[test]
fn out_dir_env_var_supplies_the_default_output_root() {
    let dir = tempfile::tempdir().expect("tempdir");
    let out = Command::new(env!("CARGO_BIN_EXE_mcae"))
        .args([
            "synth-data",
            "--domains",
            "1",
            "--per-class",
            "2",
            "--image-size",
            "8",
        ])
        .current_dir(dir.path())
        .env("MCAE_OUT_DIR", "from_env")
        .output()
        .expect("binary should spawn");
    assert_ok(&out, "synth-data via MCAE_OUT_DIR");
    assert!(dir.path().join("from_env/resolved.cfg").is_file());
    assert!(dir.path().join("from_env/data/domain0/live").is_dir());
}

#[test]
fn micro_pipeline_from_synthesis_to_visualization() {
    let dir = tempfile::tempdir().expect("tempdir");
    write_micro_cfg(dir.path());
    synth(dir.path(), "2", "data");

    let out = mcae(
        dir.path(),
        &[
            "pretrain",
            "--config",
            "micro.cfg",
            "--data",
            "data",
            "--out-dir",
            "pre",
        ],
    );
    assert_ok(&out, "pretrain");
    assert!(dir.path().join("pre/checkpoint/manifest.txt").is_file());
    assert!(dir.path().join("pre/metrics.csv").is_file());
    let echoed = String::from_utf8_lossy(&out.stdout);
    assert!(
        echoed.contains("schedule.mask_ratio = 0.85"),
        "run should echo its resolved settings:\n{echoed}"
    );

    let out = mcae(
        dir.path(),
        &[
            "visualize",
            "--kind",
            "recon",
            "--checkpoint",
            "pre/checkpoint",
            "--data",
            "data",
            "--config",
            "micro.cfg",
            "--count",
            "2",
            "--out-dir",
            "viz",
        ],
    );
    assert_ok(&out, "visualize recon");
    assert!(dir.path().join("viz/reconstructions.png").is_file());

    let out = mcae(
        dir.path(),
        &[
            "finetune",
            "--config",
            "micro.cfg",
            "--data",
            "data",
            "--checkpoint",
            "pre/checkpoint",
            "--out-dir",
            "ft",
        ],
    );
    assert_ok(&out, "finetune");
    assert!(dir.path().join("ft/finetune.csv").is_file());

    // The classifier checkpoint stores no decoder, so reconstruction views
    // must be refused as a configuration problem, not a crash.
    let out = mcae(
        dir.path(),
        &[
            "visualize",
            "--kind",
            "recon",
            "--checkpoint",
            "ft/checkpoint",
            "--data",
            "data",
            "--config",
            "micro.cfg",
            "--out-dir",
            "viz_bad",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(1),
        "recon without decoder should exit 1"
    );
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("decoder"),
        "error should say what is missing: {stderr}"
    );

    let out = mcae(
        dir.path(),
        &[
            "visualize",
            "--kind",
            "attention",
            "--checkpoint",
            "ft/checkpoint",
            "--data",
            "data",
            "--config",
            "micro.cfg",
            "--count",
            "2",
            "--out-dir",
            "att",
        ],
    );
    assert_ok(&out, "visualize attention");
    assert!(dir
        .path()
        .join("att/attention_00_domain0_live.png")
        .is_file());
    assert!(dir
        .path()
        .join("att/attention_01_domain0_live.png")
        .is_file());

    let out = mcae(
        dir.path(),
        &[
            "visualize",
            "--kind",
            "tsne",
            "--checkpoint",
            "pre/checkpoint",
            "--data",
            "data",
            "--config",
            "micro.cfg",
            "--perplexity",
            "4",
            "--iters",
            "40",
            "--out-dir",
            "emb",
        ],
    );
    assert_ok(&out, "visualize tsne");
    let csv = fs::read_to_string(dir.path().join("emb/embedding.csv")).expect("embedding csv");
    assert!(csv.starts_with("x,y,label,domain\n"));
    assert_eq!(csv.lines().count(), 13, "header plus one row per sample");

    let out = mcae(dir.path(), &["verify-theory", "--out-dir", "theory"]);
    assert_ok(&out, "verify-theory");
    let csv = fs::read_to_string(dir.path().join("theory/theory.csv")).expect("theory csv");
    assert!(csv.starts_with("check,value,expected,tolerance,ok\n"));
    assert!(
        csv.lines().skip(1).all(|l| l.ends_with(",true")),
        "every theory check should pass:\n{csv}"
    );
}

#[test]
fn leave_one_out_runs_are_byte_identical() {
    let dir = tempfile::tempdir().expect("tempdir");
    write_micro_cfg(dir.path());
    synth(dir.path(), "2", "data");
    for out_dir in ["run1", "run2"] {
        let out = mcae(
            dir.path(),
            &[
                "eval-loo",
                "--config",
                "micro.cfg",
                "--data",
                "data",
                "--out-dir",
                out_dir,
            ],
        );
        assert_ok(&out, "eval-loo");
    }
    let first = fs::read(dir.path().join("run1/results.csv")).expect("first results");
    let second = fs::read(dir.path().join("run2/results.csv")).expect("second results");
    assert_eq!(
        first, second,
        "same seed and data must reproduce the fold metrics"
    );
    let text = String::from_utf8_lossy(&first);
    assert!(text.starts_with("protocol,train_domains,test_domain,hter,auc,threshold,seed\n"));
    assert_eq!(text.lines().count(), 3, "header plus one row per fold");
}
