//! Helpers shared by the CLI integration tests.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nriqa_cli::args::{AttackArgs, SynthArgs};
use nriqa_cli::commands;
use nriqa_core::{imageio, synth, CandidateSet, ImageTensor, MeasureKind, ModelKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn nriqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nriqa"))
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// A distorted synthetic scene written as PNG.
pub fn scene(dir: &Path, name: &str, seed: u64, size: usize) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = synth::pristine(&mut rng, size, size);
    let x = synth::distort(&p, synth::Distortion::Blur, 0.4, &mut rng);
    let path = dir.join(name);
    imageio::save_png(&path, &x).unwrap();
    path
}

pub fn attack_args(image: &Path, model: ModelKind, measure: MeasureKind, out: &Path) -> AttackArgs {
    AttackArgs {
        image: image.to_path_buf(),
        model,
        measure,
        lambdas: vec![0.01, 1.0, 100.0],
        gamma: 1e-3,
        iters: 6,
        norm: None,
        seed: 3,
        target: None,
        raw: false,
        out: out.to_path_buf(),
    }
}

pub fn synth_set(dir: &Path, count: usize, size: usize, seed: u64) -> Vec<(String, f64)> {
    commands::synth(&SynthArgs {
        count,
        size,
        seed,
        out: dir.to_path_buf(),
    })
    .unwrap()
}

/// Every file in `dir` with its bytes, sorted by name.
pub fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

pub fn load(dir: &Path) -> CandidateSet {
    CandidateSet::load(dir).unwrap()
}

pub fn image(path: &Path) -> ImageTensor {
    imageio::load(path).unwrap()
}
