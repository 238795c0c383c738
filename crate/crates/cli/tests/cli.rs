use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("rayloc-cli-{name}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn rayloc(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rayloc"))
        .args(args)
        .arg("--output")
        .arg(out)
        .env_remove("RAYLOC_OUTPUT")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

const TINY_TRAIN: &[&str] = &[
    "train",
    "--iterations",
    "2",
    "--set",
    "train.batch=2",
    "--set",
    "train.n_min=32",
    "--set",
    "train.n_max=48",
    "--set",
    "train.warmup=1",
    "--set",
    "model.dim=8",
    "--set",
    "model.heads=2",
    "--set",
    "model.blocks=1",
];

#[test]
fn usage_errors_exit_with_one() {
    let dir = scratch("usage");
    assert_eq!(rayloc(&dir, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        rayloc(&dir, &["synth-gen", "--set", "nope=1"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        rayloc(&dir, &["synth-gen", "--set", "synth.scenes=zero"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        rayloc(&dir, &["train", "--preset", "huge"]).status.code(),
        Some(1)
    );
    // Missing dataset.
    assert_eq!(rayloc(&dir, &["localize"]).status.code(), Some(1));
    assert!(rayloc(&dir, &["--help"]).status.success());
}

#[test]
fn grad_check_reports_every_case() {
    let dir = scratch("grad");
    let stdout = ok(&rayloc(&dir, &["grad-check", "--points", "2"]));
    assert!(stdout.contains("decoder_block") && stdout.contains("network_loss"));
    assert!(!stdout.contains("FAIL"));
    assert!(dir.join("grad-check/report.csv").exists());
    assert!(dir.join("grad-check/config.toml").exists());
}

#[test]
fn pipeline_chains_through_the_output_root() {
    let dir = scratch("pipeline");
    ok(&rayloc(
        &dir,
        &[
            "synth-gen",
            "--scenes",
            "2",
            "--set",
            "synth.mapping_frames=100",
        ],
    ));
    ok(&rayloc(&dir, TINY_TRAIN));
    assert!(dir.join("train/final.ckpt").exists());

    // Uniform selection of 20 frames from a 100-frame scene, 3000 entries.
    let stdout = ok(&rayloc(
        &dir,
        &[
            "build-map",
            "--strategy",
            "uniform",
            "--topk",
            "20",
            "--n",
            "3000",
        ],
    ));
    assert!(stdout.contains("3000 entries from 20 frames"), "{stdout}");

    // Retrieval needs something to retrieve with.
    let out = rayloc(&dir, &["build-map", "--strategy", "retrieval"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--query"));

    // An untrained network fails most queries; that is still a success.
    ok(&rayloc(&dir, &["localize", "--viz", "--n", "128"]));
    let results = fs::read_to_string(dir.join("localize/results.csv")).unwrap();
    assert!(results.starts_with("query_id,status,e_t,e_r"));
    assert_eq!(results.lines().count(), 1 + 5);
    for f in ["viz_points.csv", "viz_patches.csv", "viz_cameras.csv"] {
        assert!(dir.join("localize").join(f).exists(), "{f}");
    }

    let results_path = dir.join("localize/results.csv");
    let stdout = ok(&rayloc(
        &dir,
        &["eval", "--results", results_path.to_str().unwrap()],
    ));
    for label in [
        "accuracy@0.05/5deg",
        "accuracy@0.1/10deg",
        "accuracy@0.2/20deg",
    ] {
        assert!(stdout.contains(label), "{label}");
    }

    let stdout = ok(&rayloc(
        &dir,
        &[
            "eval",
            "--sweep",
            "frames=1,2,5,10,20",
            "--set",
            "eval.sweep_n=128",
        ],
    ));
    let table = fs::read_to_string(dir.join("eval/sweep_frames.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 5);
    assert!(stdout.contains("mapping_frames"));
    assert!(dir.join("eval/sweep_frames.svg").exists());
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = scratch("env");
    let out = Command::new(env!("CARGO_BIN_EXE_rayloc"))
        .args(["synth-gen", "--scenes", "2"])
        .env("RAYLOC_OUTPUT", &dir)
        .output()
        .unwrap();
    ok(&out);
    assert!(dir.join("synth-gen/dataset.bin").exists());
    let cfg = fs::read_to_string(dir.join("synth-gen/config.toml")).unwrap();
    assert!(cfg.contains(&format!("output = \"{}\"", dir.display())));
}
