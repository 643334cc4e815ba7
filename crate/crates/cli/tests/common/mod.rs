#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use egointent::data::save_tracks;
use egointent::synthetic::{generate_tracks, SynthSpec};
use egointent::topology::BodyPart;
use egointent::training::TrainConfig;

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_egointent"));
    c.env("RUST_LOG", "warn");
    c
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Body-only model that trains in well under a second per epoch.
pub fn tiny_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.batch_size = 8;
    c.max_epochs = 2;
    c.window = 8;
    c.learning_rate = 3e-3;
    c.split = [0.6, 0.2, 0.2];
    let e = &mut c.model.encoder;
    e.parts = vec![BodyPart::Body];
    e.gcn_hidden = vec![8, 8];
    e.attention_dim = 8;
    e.attention_heads = 2;
    e.temporal_hidden = 8;
    e.temporal_layers = 1;
    c.model.heads.hidden = 16;
    c.ablation.window_grid = vec![4, 8];
    c
}

pub fn write_config(dir: &Path, name: &str, c: &TrainConfig) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, c.to_toml()).unwrap();
    path
}

pub fn write_corpus(dir: &Path, per_class: usize, frames: usize, seed: u64) -> PathBuf {
    let mut spec = SynthSpec::uniform(per_class, seed);
    spec.frames = frames;
    let path = dir.join(format!("corpus_{per_class}_{seed}.jsonl"));
    save_tracks(&path, &generate_tracks(&spec)).unwrap();
    path
}

pub fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}
