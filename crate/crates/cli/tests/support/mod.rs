//! Synthetic MNIST-shaped IDX files for driving the binary.

#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const COUNT: usize = 60_000;

/// Writes a 60,000-image training file pair whose classes are separable:
/// class `c` lights a vertical bar at column `2 + 2c` on top of faint noise.
pub fn write_synthetic_mnist(dir: &Path) {
    fs::create_dir_all(dir).unwrap();
    let mut images = Vec::with_capacity(16 + COUNT * 784);
    for v in [0x0803u32, COUNT as u32, 28, 28] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    let mut labels = Vec::with_capacity(8 + COUNT);
    for v in [0x0801u32, COUNT as u32] {
        labels.extend_from_slice(&v.to_be_bytes());
    }
    let mut state = 0x2545_f491u32;
    for i in 0..COUNT {
        let class = (i * 7 + i / 10) % 10;
        labels.push(class as u8);
        for r in 0..28 {
            for c in 0..28 {
                state ^= state << 13;
                state ^= state >> 17;
                state ^= state << 5;
                let noise = (state % 40) as u8;
                let bar = if c == 2 + 2 * class && (4..24).contains(&r) {
                    200
                } else {
                    0
                };
                images.push(noise.saturating_add(bar));
            }
        }
    }
    fs::write(dir.join("train-images-idx3-ubyte"), images).unwrap();
    fs::write(dir.join("train-labels-idx1-ubyte"), labels).unwrap();
}

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_advlab"))
}

/// Runs the binary with small limits so every command finishes in seconds.
pub fn advlab(cmd: &str, data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args: Vec<String> = vec![
        cmd.into(),
        "--data-dir".into(),
        data.display().to_string(),
        "--out-dir".into(),
        out.display().to_string(),
        "--epochs".into(),
        "1".into(),
        "--train-limit".into(),
        "256".into(),
        "--eval-limit".into(),
        "100".into(),
        "--patch-epochs".into(),
        "1".into(),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    Command::new(bin())
        .args(&args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

pub fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
}

pub fn assert_fails(out: &Output) {
    assert!(!out.status.success(), "expected failure");
    assert!(!out.stderr.is_empty(), "failure must print a message");
}

pub fn listing(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = match fs::read_dir(dir) {
        Ok(entries) => entries
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect(),
        Err(_) => Vec::new(),
    };
    names.sort();
    names
}
