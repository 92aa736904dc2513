//! End-to-end checks of the `cmsa` binary: exit codes, flag handling and
//! the full gen-data -> train -> eval -> infer -> viz-attn flow on a tiny
//! configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_cmsa")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().unwrap()
}

fn tmp(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("cmsa-clitest-{tag}-{}", std::process::id()));
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

const TINY: &[&str] = &[
    "--set", "c_v1=4", "--set", "c_v2=6", "--set", "c_v3=8", "--set", "c_l=8", "--set", "d_k=6",
    "--set", "d_f=8", "--set", "epochs=1", "--set", "n_samples=12", "--set", "split_train=0.5",
    "--set", "split_val=0.25", "--set", "split_test=0.25",
];

#[test]
fn no_args_prints_usage_and_fails() {
    let out = run(&[]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("usage"));
}

#[test]
fn unknown_config_key_names_the_key() {
    let dir = tmp("badkey");
    let out = run(&[
        "gen-data",
        "--out",
        dir.to_str().unwrap(),
        "--set",
        "learning_rte=0.1",
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("learning_rte"), "stderr: {stderr}");
    std::fs::remove_dir_all(dir).ok();
}

#[test]
fn gen_data_is_seed_reproducible() {
    let a = tmp("gen-a");
    let b = tmp("gen-b");
    for dir in [&a, &b] {
        let mut args = vec!["gen-data", "--out", dir.to_str().unwrap(), "--seed", "9"];
        args.extend_from_slice(TINY);
        let out = run(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(dir.join("manifest.tsv").exists());
    }
    assert_eq!(
        std::fs::read(a.join("manifest.tsv")).unwrap(),
        std::fs::read(b.join("manifest.tsv")).unwrap()
    );
    // Every referenced file exists and one sample image round-trips.
    let manifest = std::fs::read_to_string(a.join("manifest.tsv")).unwrap();
    for line in manifest.lines() {
        for rel in line.split('\t').skip(1) {
            assert!(a.join(rel).exists(), "{rel} missing");
        }
    }
    std::fs::remove_dir_all(a).ok();
    std::fs::remove_dir_all(b).ok();
}

#[test]
fn full_cli_flow_runs() {
    let data = tmp("flow-data");
    let mut args = vec!["gen-data", "--out", data.to_str().unwrap(), "--seed", "4"];
    args.extend_from_slice(TINY);
    assert!(run(&args).status.success());

    let out_dir = tmp("flow-run");
    let mut args = vec![
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--seed",
        "4",
    ];
    args.extend_from_slice(TINY);
    let out = run(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("epoch"), "stdout: {stdout}");
    let ckpt = out_dir.join("best.ckpt");
    assert!(ckpt.exists());

    let eval_dir = tmp("flow-eval");
    let mut args = vec![
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
        "--split",
        "val",
        "--seed",
        "4",
    ];
    args.extend_from_slice(TINY);
    let out = run(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("overall_iou="));
    assert!(eval_dir.join("report.txt").exists());

    // Pick a test image + expression for inference and visualization.
    let manifest = std::fs::read_to_string(data.join("manifest.tsv")).unwrap();
    let row: Vec<&str> = manifest
        .lines()
        .find(|l| l.starts_with("test"))
        .unwrap()
        .split('\t')
        .collect();
    let image = data.join(row[1]);
    let expr = std::fs::read_to_string(data.join(row[2])).unwrap();

    let infer_dir = tmp("flow-infer");
    let mut args = vec![
        "infer",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--expr",
        expr.trim(),
        "--out",
        infer_dir.to_str().unwrap(),
        "--prob",
        "--seed",
        "4",
    ];
    args.extend_from_slice(TINY);
    let out = run(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(infer_dir.join("mask.pgm").exists());
    assert!(infer_dir.join("prob.pgm").exists());

    let viz_dir = tmp("flow-viz");
    let mut args = vec![
        "viz-attn",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--expr",
        expr.trim(),
        "--out",
        viz_dir.to_str().unwrap(),
        "--seed",
        "4",
    ];
    args.extend_from_slice(TINY);
    let out = run(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(viz_dir.join("word_attention.csv").exists());
    assert!(viz_dir.join("heatmap.pgm").exists());

    // A wrong config (different dims) must be rejected via the config hash.
    let out = run(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("config"));

    for d in [data, out_dir, eval_dir, infer_dir, viz_dir] {
        std::fs::remove_dir_all(d).ok();
    }
}
