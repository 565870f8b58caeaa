//! Seeded synthetic datasets and oracle models shared by integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tsexplain_core::nn::{Layer, Model};

/// Class 0: Gaussian noise (sigma 0.2). Class 1: the same noise plus a
/// half-sine bump of height 1 on `t` in `[100, 150)`. Classes alternate.
pub fn sine_bump(n: usize, length: usize, seed: u64) -> (Vec<Vec<f32>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, 0.2).unwrap();
    let mut series = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let x: Vec<f32> = (0..length)
            .map(|t| {
                let bump = if label == 1 && (100..150).contains(&t) {
                    (std::f32::consts::PI * (t - 100) as f32 / 50.0).sin()
                } else {
                    0.0
                };
                bump + noise.sample(&mut rng)
            })
            .collect();
        series.push(x);
        labels.push(label);
    }
    (series, labels)
}

/// Dense model whose class-1 logit is `x[at]` and class-0 logit is `-x[at]`:
/// class 1 iff `x[at] > 0` (a zero value ties and goes to class 0).
pub fn selector_model(length: usize, at: usize) -> Model {
    let mut weights = vec![0.0; 2 * length];
    weights[at] = -1.0;
    weights[length + at] = 1.0;
    Model::new(
        length,
        2,
        vec![Layer::Dense {
            inputs: length,
            outputs: 2,
            weights,
            bias: vec![0.0; 2],
        }],
    )
    .unwrap()
}

/// Balanced samples for [`selector_model`]: `x[at] = +-(0.5..1.5)`, the rest
/// uniform noise; the label is the sign class.
pub fn selector_data(n: usize, length: usize, at: usize, seed: u64) -> (Vec<Vec<f32>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut series = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let mut x: Vec<f32> = (0..length).map(|_| rng.random_range(-1.0..1.0)).collect();
        let magnitude: f32 = rng.random_range(0.5..1.5);
        x[at] = if label == 1 { magnitude } else { -magnitude };
        series.push(x);
        labels.push(label);
    }
    (series, labels)
}

/// `per` points around each centre in `dims` dimensions, unit variance;
/// centres differ in the first two coordinates.
pub fn gaussian_clusters(centers: &[[f32; 2]], per: usize, dims: usize, seed: u64) -> (Vec<Vec<f32>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0f32, 1.0).unwrap();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per {
            let mut r: Vec<f32> = (0..dims).map(|_| unit.sample(&mut rng)).collect();
            r[0] += center[0];
            r[1] += center[1];
            rows.push(r);
            labels.push(c);
        }
    }
    (rows, labels)
}

/// Fraction of `k` nearest embedded neighbours (self excluded) sharing the label.
pub fn knn_purity(coords: &[[f32; 2]], labels: &[usize], k: usize) -> f64 {
    let mut hits = 0;
    for i in 0..coords.len() {
        let mut d: Vec<(f64, usize)> = (0..coords.len())
            .filter(|&j| j != i)
            .map(|j| {
                let dx = f64::from(coords[i][0]) - f64::from(coords[j][0]);
                let dy = f64::from(coords[i][1]) - f64::from(coords[j][1]);
                ((dx * dx + dy * dy).sqrt(), j)
            })
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        hits += d[..k].iter().filter(|(_, j)| labels[*j] == labels[i]).count();
    }
    hits as f64 / (coords.len() * k) as f64
}
