use std::path::Path;
use std::process::Command;

use smae::geometry::{make_shape, read_cloud_file, write_cloud_file, ShapeKind};

fn smae(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_smae"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

#[test]
fn pretrain_finetune_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let pre = dir.path().join("pre");
    let out = smae(&[
        "pretrain",
        "--preset",
        "toy",
        "--seed",
        "3",
        "--out",
        path(&pre),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in [
        "metrics.jsonl",
        "masks.jsonl",
        "checkpoint.bin",
        "config.txt",
    ] {
        assert!(pre.join(f).exists(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(pre.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    assert!(metrics.contains("\"grouping_entropy\""));

    let ck = pre.join("checkpoint.bin");
    let ft = dir.path().join("ft");
    let out = smae(&[
        "finetune",
        "--preset",
        "toy",
        "--checkpoint",
        path(&ck),
        "--prompted",
        "--out",
        path(&ft),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(ft.join("finetune.jsonl").exists());

    let cloud = make_shape(ShapeKind::Plane, 64, 5).unwrap();
    let input = dir.path().join("plane.txt");
    write_cloud_file(&input, &cloud.points, None).unwrap();
    let labelled = dir.path().join("plane.groups.txt");
    let out = smae(&[
        "export-groups",
        "--preset",
        "toy",
        "--checkpoint",
        path(&ck),
        "--input",
        path(&input),
        "--out",
        path(&labelled),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let back = read_cloud_file(&labelled).unwrap();
    assert_eq!(back.points, cloud.points);
    assert!(back.labels.unwrap().iter().all(|&l| l < 4));
}

#[test]
fn config_problems_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "preset = toy\nwingspan = 3\n").unwrap();
    let out = smae(&[
        "pretrain",
        "--config",
        path(&cfg),
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("wingspan"));

    let out = smae(&["pretrain", "--preset", "huge"]);
    assert_eq!(out.status.code(), Some(2));

    let out = smae(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn mismatched_checkpoint_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = smae(&["pretrain", "--preset", "toy", "--out", path(dir.path())]);
    assert!(out.status.success());
    let ck = dir.path().join("checkpoint.bin");
    let cfg = dir.path().join("wide.cfg");
    std::fs::write(&cfg, "preset = toy\ndim = 32\n").unwrap();
    let out = smae(&[
        "finetune",
        "--config",
        path(&cfg),
        "--checkpoint",
        path(&ck),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tensor '"));
}

#[test]
fn oracle_suite_passes() {
    let out = smae(&["oracle-suite", "--seed", "5"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("0 violations"));
}
