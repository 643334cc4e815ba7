#![allow(dead_code)]

use egointent::data::{split_dataset, Track};
use egointent::synthetic::{generate_tracks, SynthSpec};
use egointent::topology::BodyPart;
use egointent::training::{AblationData, TrainConfig};

/// A body-only model small enough to train in well under a second per epoch.
pub fn tiny_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.batch_size = 8;
    c.max_epochs = 3;
    c.patience = 10;
    c.window = 8;
    c.learning_rate = 3e-3;
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

pub fn corpus(per_class: usize, seed: u64) -> Vec<Track> {
    let mut spec = SynthSpec::uniform(per_class, seed);
    spec.frames = 12;
    generate_tracks(&spec)
}

pub fn split(tracks: &[Track], seed: u64) -> AblationData {
    let s = split_dataset(tracks, seed, [0.6, 0.2, 0.2]).unwrap();
    let (train, val, test) = s.materialize(tracks);
    AblationData { train, val, test }
}
