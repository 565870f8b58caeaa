use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pass::{argmax, backward, check_input, run_tape, softmax, ParamGrads};
use super::Model;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return Err(Error::InvalidConfig("invalid Adam moment parameters".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean cross-entropy over the epoch's training samples.
    pub loss: f64,
    /// Training accuracy of the stochastic forward passes.
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

struct Adam {
    m: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    v: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    step: i32,
}

impl Adam {
    fn new(model: &Model) -> Self {
        let zeros = ParamGrads::zeros(model).layers;
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    fn apply(&mut self, model: &mut Model, grads: &ParamGrads, scale: f64, cfg: &TrainConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step);
        let bc2 = 1.0 - cfg.beta2.powi(self.step);
        for (li, layer) in model.layers.iter_mut().enumerate() {
            let (Some((w, b)), Some((gw, gb))) = (layer.params_mut(), grads.layers[li].as_ref()) else {
                continue;
            };
            let (mw, mb) = self.m[li].as_mut().expect("moment slots mirror parameters");
            let (vw, vb) = self.v[li].as_mut().expect("moment slots mirror parameters");
            for (params, g, m, v) in [(w, gw, mw, vw), (b, gb, mb, vb)] {
                for k in 0..params.len() {
                    let gk = g[k] * scale;
                    m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
                    v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
                    let update = cfg.learning_rate * (m[k] / bc1) / ((v[k] / bc2).sqrt() + cfg.epsilon);
                    params[k] = (f64::from(params[k]) - update) as f32;
                }
            }
        }
    }
}

/// Minibatch Adam on softmax cross-entropy. Batches come from a seeded
/// shuffle each epoch; dropout masks use the same generator stream.
pub fn train(model: &Model, inputs: &[Vec<f32>], labels: &[usize], config: &TrainConfig) -> Result<(Model, TrainHistory)> {
    config.validate()?;
    if inputs.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    if inputs.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} inputs but {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    for x in inputs {
        check_input(model, x)?;
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= model.classes()) {
        return Err(Error::ShapeMismatch(format!("label {bad} outside model classes")));
    }

    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(&model);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut history = TrainHistory::default();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for batch in order.chunks(config.batch_size) {
            let mut grads = ParamGrads::zeros(&model);
            for &i in batch {
                let mut dropout_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
                let tape = run_tape(&model, &inputs[i], Some(&mut dropout_rng))?;
                let probs = softmax(&tape.output);
                let target = labels[i];
                let p = f64::from(probs[target]).max(1e-12);
                let loss = -p.ln();
                if !loss.is_finite() || tape.output.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteLoss { epoch });
                }
                loss_sum += loss;
                if argmax(&tape.output) == target {
                    correct += 1;
                }
                let upstream: Vec<f64> = probs
                    .iter()
                    .enumerate()
                    .map(|(c, &pc)| f64::from(pc) - if c == target { 1.0 } else { 0.0 })
                    .collect();
                backward(&model, &tape, &upstream, Some(&mut grads));
            }
            adam.apply(&mut model, &grads, 1.0 / batch.len() as f64, config);
        }
        if model.parameters().iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFiniteLoss { epoch });
        }
        history.epochs.push(EpochStats {
            epoch,
            loss: loss_sum / inputs.len() as f64,
            accuracy: correct as f64 / inputs.len() as f64,
        });
    }
    Ok((model, history))
}
