//! Tiny on-disk session fixture: N=40 (20 train, 20 test), T=64.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tsexplain_core::data::{Delimiter, Split, TimeSeriesDataset};
use tsexplain_core::nn::{train, ModelBuilder, TrainConfig};
use tsexplain_server::config::SessionConfig;

pub const LENGTH: usize = 64;

/// Class 1 carries a half-sine bump on `[20, 36)`; classes alternate.
pub fn ucr_text(n: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, 0.2).unwrap();
    let mut out = String::new();
    for i in 0..n {
        let label = i % 2;
        out.push_str(&label.to_string());
        for t in 0..LENGTH {
            let bump = if label == 1 && (20..36).contains(&t) {
                (std::f32::consts::PI * (t - 20) as f32 / 16.0).sin()
            } else {
                0.0
            };
            out.push_str(&format!("\t{}", bump + noise.sample(&mut rng)));
        }
        out.push('\n');
    }
    out
}

pub fn write_dataset(dir: &Path) -> (PathBuf, PathBuf) {
    let train = dir.join("tiny_TRAIN.tsv");
    let test = dir.join("tiny_TEST.tsv");
    std::fs::write(&train, ucr_text(20, 1)).unwrap();
    std::fs::write(&test, ucr_text(20, 2)).unwrap();
    (train, test)
}

/// Compact conv net trained on the tiny training split; the built-in
/// architectures need longer series than 64 points.
pub fn write_model(dir: &Path, train_path: &Path, test_path: &Path) -> PathBuf {
    let path = dir.join("tiny_model.json");
    if path.is_file() {
        return path;
    }
    let data = TimeSeriesDataset::parse_ucr_splits(
        &std::fs::read_to_string(train_path).unwrap(),
        &std::fs::read_to_string(test_path).unwrap(),
        Delimiter::Tab,
    )
    .unwrap();
    let idx = data.indices(Split::Train);
    let xs: Vec<Vec<f32>> = idx.iter().map(|&i| data.sample(i).to_vec()).collect();
    let ys: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();
    let init = ModelBuilder::new(LENGTH, 2)
        .conv1d(4, 5)
        .relu()
        .max_pool(2)
        .conv1d(8, 5)
        .relu()
        .max_pool(2)
        .flatten()
        .dense(16)
        .relu()
        .dropout(0.5)
        .dense(2)
        .build(5)
        .unwrap();
    let config = TrainConfig {
        epochs: 80,
        batch_size: 8,
        seed: 5,
        ..TrainConfig::default()
    };
    let (model, _) = train(&init, &xs, &ys, &config).unwrap();
    model.save(&path).unwrap();
    path
}

pub fn config_json(dir: &Path, seed: u64) -> String {
    let (train, test) = write_dataset(dir);
    let model = write_model(dir, &train, &test);
    format!(
        r#"{{
            "dataset": {{"train": {train:?}, "test": {test:?}}},
            "model": {{"path": {model:?}}},
            "methods": ["saliency", "integrated_gradients"],
            "techniques": ["pca", "tsne"],
            "projection": {{"tsne_iters": 500}},
            "seed": {seed}
        }}"#
    )
}

pub fn config(dir: &Path, seed: u64) -> SessionConfig {
    SessionConfig::from_json(&config_json(dir, seed)).unwrap()
}
