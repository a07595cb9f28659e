//! Helpers that drive the `colomil` binary.

#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_colomil"));
    c.env("RUST_LOG", "warn");
    c
}

pub fn run_ok(args: &[&str]) -> serde_json::Value {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "colomil {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

pub fn run_err(args: &[&str]) -> (Output, serde_json::Value) {
    let out = bin().args(args).output().unwrap();
    let line = String::from_utf8_lossy(&out.stderr)
        .lines()
        .last()
        .unwrap_or_default()
        .to_string();
    let v = serde_json::from_str(&line).unwrap_or(serde_json::Value::Null);
    (out, v)
}

pub fn synth(out: &Path, n: usize, seed: u64) -> serde_json::Value {
    run_ok(&[
        "synth",
        "--out",
        out.to_str().unwrap(),
        "--n-slides",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
    ])
}

/// `colomil run --preset desk` on a synthesized dataset.
pub fn desk_run(data: &Path, work: &Path, extra: &[&str]) -> serde_json::Value {
    let manifest = data.join("manifest.jsonl");
    let truth = data.join("truth");
    let mut args = vec![
        "run",
        "--preset",
        "desk",
        "--manifest",
        manifest.to_str().unwrap(),
        "--workdir",
        work.to_str().unwrap(),
        "--truth-dir",
        truth.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    run_ok(&args)
}

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
