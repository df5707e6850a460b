//! End-to-end tests of the binary: exit codes, artifacts, determinism.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mclcr(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mclcr"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn help_exits_zero_on_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["gen", "analyze", "train", "eval", "gradcheck"] {
        let out = mclcr(&[cmd, "--help"], dir.path());
        assert!(out.status.success(), "{cmd} --help failed");
        assert!(stdout(&out).contains("--"), "{cmd} help lists flags");
    }
}

#[test]
fn gen_writes_images_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "gen", "--real", "6", "--fake", "6", "--size", "64", "--seed", "7", "--out", "a",
    ];
    let out = mclcr(&args, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let pnms: Vec<_> = fs::read_dir(dir.path().join("a"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "pnm"))
        .collect();
    assert_eq!(pnms.len(), 12);
    assert!(dir.path().join("a/train.manifest").exists());
    assert!(dir.path().join("a/run.txt").exists());

    let mut args_b = args;
    args_b[10] = "b";
    assert!(mclcr(&args_b, dir.path()).status.success());
    for entry in &pnms {
        let name = entry.file_name();
        let a = fs::read(entry.path()).unwrap();
        let b = fs::read(dir.path().join("b").join(&name)).unwrap();
        assert_eq!(a, b, "{name:?}");
    }
    assert_eq!(
        fs::read(dir.path().join("a/train.manifest")).unwrap(),
        fs::read(dir.path().join("b/train.manifest")).unwrap()
    );
}

#[test]
fn gen_without_out_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = mclcr(&["gen", "--real", "4", "--fake", "4"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.to_lowercase().contains("usage") || err.contains("--out"), "{err}");
}

#[test]
fn analyze_identical_images_give_all_bright_residuals() {
    let dir = tempfile::tempdir().unwrap();
    assert!(mclcr(
        &["gen", "--real", "1", "--fake", "1", "--out", "d", "--seed", "3"],
        dir.path()
    )
    .status
    .success());
    let img = "d/train_real_0000.pnm";
    let out = mclcr(
        &["analyze", "--real", img, "--fake", img, "--out", "an"],
        dir.path(),
    );
    assert!(out.status.success());
    for name in ["amplitude_residual.pnm", "phase_residual.pnm"] {
        let map = mclcr_core::read_pnm(dir.path().join("an").join(name)).unwrap();
        assert_eq!((map.height, map.width), (64, 64));
        assert!(map.pixels.iter().all(|&v| v == 255), "{name}");
    }
    assert!(dir.path().join("an/residuals.csv").exists());
}

#[test]
fn analyze_fake_vs_source_localizes_the_tamper() {
    let dir = tempfile::tempdir().unwrap();
    assert!(mclcr(
        &["gen", "--real", "2", "--fake", "2", "--out", "d", "--seed", "11"],
        dir.path()
    )
    .status
    .success());
    let manifest = fs::read_to_string(dir.path().join("d/train.manifest")).unwrap();
    let fake_line = manifest
        .lines()
        .find(|l| l.contains("fake_0000"))
        .unwrap();
    let cols: Vec<&str> = fake_line.split('\t').collect();
    let region = cols[3];
    let out = mclcr(
        &[
            "analyze",
            "--real",
            "d/sources/train_fake_0000.pnm",
            "--fake",
            "d/train_fake_0000.pnm",
            "--region",
            region,
            "--out",
            "an",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let text = stdout(&out);
    // The argmax patch the tool prints must fall inside the ground-truth
    // region (patch grid is 8x8 at these defaults).
    let nums: Vec<usize> = region.split(',').map(|v| v.parse().unwrap()).collect();
    let (rx, ry, rw, rh) = (nums[0], nums[1], nums[2], nums[3]);
    let row: usize = text
        .split("row ")
        .nth(1)
        .unwrap()
        .split(',')
        .next()
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    let col: usize = text
        .split("col ")
        .nth(1)
        .unwrap()
        .split(')')
        .next()
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    let (py0, py1) = (row * 8, row * 8 + 8);
    let (px0, px1) = (col * 8, col * 8 + 8);
    assert!(
        px0 < rx + rw && rx < px1 && py0 < ry + rh && ry < py1,
        "argmax patch ({row},{col}) outside region {region}: {text}"
    );
}

#[test]
fn analyze_extent_mismatch_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    assert!(mclcr(
        &["gen", "--real", "1", "--fake", "1", "--out", "d64", "--seed", "3"],
        dir.path()
    )
    .status
    .success());
    assert!(mclcr(
        &[
            "gen", "--real", "1", "--fake", "1", "--size", "32", "--out", "d32", "--seed", "3",
        ],
        dir.path()
    )
    .status
    .success());
    let out = mclcr(
        &[
            "analyze",
            "--real",
            "d64/train_real_0000.pnm",
            "--fake",
            "d32/train_real_0000.pnm",
            "--out",
            "an",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

fn gen_tiny_dataset(dir: &Path) {
    for (split, seed) in [("train", "21"), ("val", "22"), ("test", "23")] {
        assert!(mclcr(
            &[
                "gen", "--real", "8", "--fake", "8", "--out", "data", "--seed", seed, "--split",
                split,
            ],
            dir,
        )
        .status
        .success());
    }
}

#[test]
fn train_eval_roundtrip_with_ablation_flag() {
    let dir = tempfile::tempdir().unwrap();
    gen_tiny_dataset(dir.path());

    // Small model keeps this test quick; alpha 0 exercises the ablation
    // contract that the contrastive column stays zero.
    let out = mclcr(
        &[
            "train",
            "--data",
            "data",
            "--epochs",
            "2",
            "--seed",
            "7",
            "--scale",
            "8",
            "--encode-dim",
            "64",
            "--proj-dim",
            "16",
            "--alpha",
            "0",
            "--out",
            "run1",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let metrics = fs::read_to_string(dir.path().join("run1/metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next().unwrap(), "epoch,split,loss,ce,sc,acc,auc");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4); // two splits x two epochs
    for row in &rows {
        let sc = row.split(',').nth(4).unwrap();
        assert_eq!(sc, "0.000000", "sc column must be zero under --alpha 0");
    }
    assert!(dir.path().join("run1/model.ckpt").exists());
    assert!(dir.path().join("run1/run.txt").exists());

    let out = mclcr(
        &[
            "eval",
            "--data",
            "data",
            "--checkpoint",
            "run1/model.ckpt",
            "--split",
            "test",
            "--out",
            "eval1",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = stdout(&out);
    let auc_line = text.lines().find(|l| l.starts_with("AUC:")).unwrap();
    let auc_str = auc_line.split(": ").nth(1).unwrap().trim();
    assert_eq!(
        auc_str.split('.').nth(1).map(str::len),
        Some(4),
        "AUC printed with 4 decimals: {auc_str}"
    );
    let scores = fs::read_to_string(dir.path().join("eval1/scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 17); // header + 16 test samples
}

#[test]
fn train_metrics_are_byte_identical_across_reruns() {
    let dir = tempfile::tempdir().unwrap();
    gen_tiny_dataset(dir.path());
    let base_args = [
        "train",
        "--data",
        "data",
        "--epochs",
        "1",
        "--seed",
        "9",
        "--scale",
        "8",
        "--encode-dim",
        "64",
        "--proj-dim",
        "16",
    ];
    let mut a = base_args.to_vec();
    a.extend(["--out", "ra"]);
    let mut b = base_args.to_vec();
    b.extend(["--out", "rb"]);
    assert!(mclcr(&a, dir.path()).status.success());
    assert!(mclcr(&b, dir.path()).status.success());
    assert_eq!(
        fs::read(dir.path().join("ra/metrics.csv")).unwrap(),
        fs::read(dir.path().join("rb/metrics.csv")).unwrap()
    );
    assert_eq!(
        fs::read(dir.path().join("ra/model.ckpt")).unwrap(),
        fs::read(dir.path().join("rb/model.ckpt")).unwrap()
    );
}

#[test]
fn config_file_fills_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("gen.cfg"), "real=3\nfake=5\nseed=13\n").unwrap();
    // Flag --fake 3 overrides the file's 5; file's real=3 and seed=13 apply.
    let out = mclcr(
        &[
            "gen", "--config", "gen.cfg", "--fake", "3", "--out", "d",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let run = fs::read_to_string(dir.path().join("d/run.txt")).unwrap();
    assert!(run.contains("real=3"), "{run}");
    assert!(run.contains("fake=3"), "{run}");
    assert!(run.contains("seed=13"), "{run}");
}

#[test]
fn gradcheck_exits_zero_within_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let out = mclcr(&["gradcheck", "--seed", "7", "--out", "gc"], dir.path());
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("full-toy-model"));
    assert!(text.contains("ok"));
    assert!(dir.path().join("gc/run.txt").exists());
}
