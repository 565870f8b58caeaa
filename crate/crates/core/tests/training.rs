mod common;

use std::time::Instant;

use common::synthetic::sine_bump;
use proptest::prelude::*;
use tsexplain_core::data::{Delimiter, Split, TimeSeriesDataset};
use tsexplain_core::nn::{forward, train, Layer, Model, TrainConfig};

fn accuracy(model: &Model, xs: &[Vec<f32>], ys: &[usize]) -> f64 {
    let preds = model.predict_all(xs).unwrap();
    preds.iter().zip(ys).filter(|(p, y)| p == y).count() as f64 / ys.len() as f64
}

#[test]
fn sine_bump_reaches_high_test_accuracy() {
    let start = Instant::now();
    let (xs, ys) = sine_bump(200, 200, 11);
    let (train_x, test_x) = xs.split_at(150);
    let (train_y, test_y) = ys.split_at(150);
    let model = Model::architecture_a(200, 2, 5).unwrap();
    let config = TrainConfig {
        epochs: 200,
        seed: 5,
        ..TrainConfig::default()
    };
    let (trained, history) = train(&model, train_x, train_y, &config).unwrap();
    let acc = accuracy(&trained, test_x, test_y);
    println!(
        "test accuracy {acc:.3} after {} epochs (final loss {:.4}) in {:.1?}",
        history.epochs.len(),
        history.epochs.last().unwrap().loss,
        start.elapsed()
    );
    assert_eq!(history.epochs.len(), 200);
    assert!(acc >= 0.95);
}

#[test]
fn inverted_dropout_preserves_expectation() {
    let length = 8;
    let model = Model::new(
        length,
        2,
        vec![
            Layer::Dropout { p: 0.5 },
            Layer::Dense {
                inputs: length,
                outputs: 2,
                weights: (0..2 * length).map(|i| if i < length { 1.0 } else { 0.0 }).collect(),
                bias: vec![0.0; 2],
            },
        ],
    )
    .unwrap();
    let x = vec![1.0f32; length];
    let passes = 20_000u64;
    let mean: f64 = (0..passes)
        .map(|s| f64::from(forward(&model, &x, true, s).unwrap().logits[0]))
        .sum::<f64>()
        / passes as f64;
    // The first logit sums the kept, rescaled inputs: expectation = length.
    assert!((mean / length as f64 - 1.0).abs() <= 0.02, "mean {mean}");
}

/// FordA from the UCR archive, when `TSEXPLAIN_FORDA_DIR` points at a
/// directory with `FordA_TRAIN.tsv` and `FordA_TEST.tsv`.
#[test]
fn forda_architecture_a_when_available() {
    let Ok(dir) = std::env::var("TSEXPLAIN_FORDA_DIR") else {
        println!("TSEXPLAIN_FORDA_DIR not set; skipping FordA run");
        return;
    };
    let read = |name: &str| std::fs::read_to_string(std::path::Path::new(&dir).join(name)).unwrap();
    let data = TimeSeriesDataset::parse_ucr_splits(&read("FordA_TRAIN.tsv"), &read("FordA_TEST.tsv"), Delimiter::Auto).unwrap();
    let pick = |split| {
        let idx = data.indices(split);
        let xs: Vec<Vec<f32>> = idx.iter().map(|&i| data.sample(i).to_vec()).collect();
        let ys: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();
        (xs, ys)
    };
    let (train_x, train_y) = pick(Split::Train);
    let (test_x, test_y) = pick(Split::Test);
    assert_eq!((train_x.len(), test_x.len(), data.series_length()), (3601, 1320, 500));
    let model = Model::architecture_a(500, 2, 1).unwrap();
    let config = TrainConfig {
        epochs: 100,
        seed: 1,
        ..TrainConfig::default()
    };
    let (trained, _) = train(&model, &train_x, &train_y, &config).unwrap();
    let acc = accuracy(&trained, &test_x, &test_y);
    println!("FordA model A test accuracy {acc:.4}");
    assert!(acc >= 0.85);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn probabilities_are_a_distribution(seed in 0u64..1000, scale in 0.1f32..20.0) {
        let model = Model::architecture_a(200, 3, seed).unwrap();
        let x: Vec<f32> = (0..200).map(|t| scale * ((t as f32 * 0.05 + seed as f32).sin())).collect();
        let trace = forward(&model, &x, false, 0).unwrap();
        let total: f64 = trace.probabilities.iter().map(|&p| f64::from(p)).sum();
        prop_assert!((total - 1.0).abs() <= 1e-5);
        prop_assert!(trace.probabilities.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
}
