use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pass::{backward_input, forward};
use super::Model;
use crate::error::{Error, Result};

/// Input of the final dense layer, dropout inactive.
pub fn activation_vector(model: &Model, x: &[f32]) -> Result<Vec<f32>> {
    Ok(forward(model, x, false, 0)?.penultimate)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActMaxParams {
    pub steps: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ActMaxParams {
    fn default() -> Self {
        Self {
            steps: 256,
            learning_rate: 0.1,
            l2: 1e-3,
        }
    }
}

/// Maximizes `logit_target(x) - l2 * |x|^2` starting from `init`.
///
/// Each step moves along the logit gradient and then applies the exact
/// proximal map of the quadratic penalty, `x / (1 + 2 lr l2)`. The fixed
/// point is the stationary point of the penalized objective and the update
/// stays stable for any penalty strength.
pub fn activation_maximization(model: &Model, target: usize, params: &ActMaxParams, init: &[f32]) -> Result<Vec<f32>> {
    let lr = params.learning_rate;
    let shrink = 1.0 + 2.0 * lr * params.l2;
    let mut x: Vec<f64> = init.iter().map(|&v| f64::from(v)).collect();
    let mut current: Vec<f32> = init.to_vec();
    for step in 0..params.steps {
        let grad = backward_input(model, &current, target)?;
        for (xi, g) in x.iter_mut().zip(&grad) {
            *xi = (*xi + lr * f64::from(*g)) / shrink;
        }
        current = x.iter().map(|&v| v as f32).collect();
        if current.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("activation maximization diverged at step {step}")));
        }
    }
    Ok(current)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Uncertainty {
    pub mean: Vec<f32>,
    /// Population standard deviation across passes.
    pub std: Vec<f32>,
    pub passes: usize,
}

/// Monte-Carlo dropout: `passes` stochastic forwards with dropout active.
pub fn mc_dropout_predict(model: &Model, x: &[f32], passes: usize, seed: u64) -> Result<Uncertainty> {
    if passes == 0 {
        return Err(Error::InvalidParams("at least one pass required".into()));
    }
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let runs = (0..passes)
        .map(|_| forward(model, x, true, seeds.next_u64()).map(|t| t.probabilities))
        .collect::<Result<Vec<_>>>()?;
    let classes = model.classes();
    let n = passes as f64;
    let mut mean = Vec::with_capacity(classes);
    let mut std = Vec::with_capacity(classes);
    for c in 0..classes {
        // Shifted by the first pass so identical passes give exactly zero spread.
        let pivot = f64::from(runs[0][c]);
        let dev: Vec<f64> = runs.iter().map(|r| f64::from(r[c]) - pivot).collect();
        let shift = dev.iter().sum::<f64>() / n;
        let var = dev.iter().map(|d| (d - shift).powi(2)).sum::<f64>() / n;
        mean.push((pivot + shift) as f32);
        std.push(var.sqrt() as f32);
    }
    Ok(Uncertainty { mean, std, passes })
}
