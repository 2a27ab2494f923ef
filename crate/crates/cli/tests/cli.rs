use std::path::Path;
use std::process::{Command, Output};

use phasecollapse::io::{Tensor, TensorContainer};
use phasecollapse::network::NetworkConfig;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phasecollapse"))
        .args(args)
        .env_remove(phasecollapse::io::DATA_ENV)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn help_exits_zero() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn verify_is_deterministic_and_logs_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("verify.csv");
    let args = ["verify", "--thm1", "--trials", "40", "--seed", "7", "--csv", path(&csv)];
    let a = run(&args);
    let b = run(&args);
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "name,trials,violations,worst_slack,pass");
    // Header once, then ten reports per run.
    assert_eq!(lines.len(), 1 + 2 * 10);
    assert!(lines[1..].iter().all(|l| l.ends_with(",true")));
    assert_eq!(lines[1..11], lines[11..]);
}

#[test]
fn verify_prox_small() {
    let out = run(&["verify", "--prox", "--trials", "200", "--deterministic"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("prox-soft-threshold"));
}

#[test]
fn scatter_desk_shape_contract() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("image.pct");
    let mut c = TensorContainer::new();
    let pixels: Vec<f64> = (0..3 * 32 * 32).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
    c.push(Tensor::real("image", vec![3, 32, 32], pixels).unwrap()).unwrap();
    c.save(&input).unwrap();
    let out_path = dir.path().join("features.pct");
    let out = run(&["scatter", "--input", path(&input), "--out", path(&out_path), "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let features = TensorContainer::load(&out_path).unwrap();
    let desk = NetworkConfig::desk();
    let t = features.require("features").unwrap();
    assert_eq!(t.dims, vec![*desk.widths.last().unwrap(), 4, 4]);
    let manifest = std::fs::read_to_string(dir.path().join("features.pct.manifest")).unwrap();
    assert!(manifest.contains("depth = 6"));
}

#[test]
fn scatter_without_input_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["scatter", "--out", path(&dir.path().join("x.pct"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["scatter", "--dataset", "mnist", "--out", path(&dir.path().join("x.pct"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("PHASECOLLAPSE_DATA"));
}

#[test]
fn corrupt_container_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.pct");
    std::fs::write(&input, b"PCT1\x05\x00").unwrap();
    let out = run(&["scatter", "--input", path(&input), "--out", path(&dir.path().join("o.pct"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("byte offset"));
}

#[test]
fn gen_filters_writes_images_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["gen-filters", "--angles", "2", "--grid", "9", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(0));
    for name in ["lowpass_re.pgm", "first1_im.pgm", "second2_re.pgm", "filters.pct", "filters.pct.manifest"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let c = TensorContainer::load(&dir.path().join("filters.pct")).unwrap();
    assert_eq!(c.len(), 5);
    assert_eq!(c.require("first2").unwrap().dims, vec![9, 9]);
}

const TOY_RUN: &str = "depth = 2\nwidths = 6, 6\nL = 2\nnonlin = modulus\nskip = false\n\
subsample_period = 1\ngrid = 7\nlearned = true\nlr = 0.05\nbatch_size = 16\nepochs = 2\naugment = false\n";

#[test]
fn train_on_textures_writes_outputs_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.cfg");
    std::fs::write(&config, TOY_RUN).unwrap();
    let mut metrics = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let out = run(&[
            "train", "--config", path(&config), "--dataset", "textures", "--texture-size", "8",
            "--train-count", "64", "--test-count", "32", "--seed", "5", "--quiet", "--deterministic",
            "--out", path(&out_dir),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(out_dir.join("model.pct").exists());
        assert!(out_dir.join("checkpoints").join("epoch_002.pct").exists());
        let csv = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        // Drop the wall-clock column before comparing runs.
        let rows: Vec<String> = csv
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect();
        metrics.push(rows);
    }
    assert_eq!(metrics[0], metrics[1]);
}

#[test]
fn train_rejects_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.cfg");
    std::fs::write(&config, "depth = 2\nwidths = 6, 6\nlearning_rate = 0.1\n").unwrap();
    let out = run(&[
        "train", "--config", path(&config), "--dataset", "textures", "--out", path(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn scatter_accepts_a_run_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.cfg");
    std::fs::write(&config, TOY_RUN).unwrap();
    let out_path = dir.path().join("features.pct");
    let out = run(&[
        "scatter", "--dataset", "textures", "--count", "2", "--config", path(&config), "--out", path(&out_path),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let features = TensorContainer::load(&out_path).unwrap();
    assert_eq!(features.require("features.1").unwrap().dims, vec![6, 8, 8]);
    assert_eq!(features.require("labels").unwrap().dims, vec![2]);
}
