use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Model;
use crate::autodiff::{Gradients, ParamId, Tape};
use crate::error::{Error, Result};
use crate::perceiver::SceneFeatures;
use crate::prompt::PromptSequence;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Optimizer and schedule settings. The published run used lr 5e-4 with
/// gradient accumulation 32 and a global batch of 256 across eight GPUs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: usize,
    /// Examples per micro-batch.
    pub micro_batch: usize,
    /// Micro-batches per optimizer step.
    pub accumulation_steps: usize,
    /// Global gradient norm limit; 0 disables clipping.
    pub grad_clip: f64,
    /// Write a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 200,
            micro_batch: 4,
            accumulation_steps: 1,
            grad_clip: 1.0,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.micro_batch == 0 || self.accumulation_steps == 0 {
            return Err(Error::Config("micro_batch and accumulation_steps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// A training prompt and the index of its scene's features.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub prompt: PromptSequence,
    pub scene: usize,
}

/// First and second moment estimates for one trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Matrix<T>,
    pub v: Matrix<T>,
}

/// Adam with gradient accumulation over the trainable parameters of a [`Model`].
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub step: usize,
    pub losses: Vec<f64>,
    moments: BTreeMap<ParamId, AdamState<T>>,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            losses: Vec::new(),
            moments: BTreeMap::new(),
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
        })
    }

    /// Next example index from a per-epoch shuffle.
    fn next_example(&mut self, n: usize) -> usize {
        if self.order.len() != n || self.cursor == n {
            self.order = (0..n).collect();
            self.order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.config.seed, self.epoch)));
            self.epoch += 1;
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    /// Gradients averaged over the given examples, and their mean loss.
    pub fn gradients(
        &self,
        model: &Model<T>,
        batch: &[&TrainExample],
        features: &[SceneFeatures],
        dropout: bool,
    ) -> Result<(Gradients<T>, f64)> {
        let mut total = Gradients::default();
        let mut loss = 0.0;
        for (k, ex) in batch.iter().enumerate() {
            let f = features
                .get(ex.scene)
                .ok_or_else(|| Error::Precondition(format!("example refers to missing scene {}", ex.scene)))?;
            let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(self.config.seed, self.step as u64), k as u64 + 1));
            let mut tape = Tape::new();
            let l = model.loss_node(&mut tape, &ex.prompt, f, dropout.then_some(&mut rng))?;
            let value = tape.value(l).get(0, 0).as_f64();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: self.step,
                    loss: value,
                });
            }
            loss += value;
            total.accumulate(tape.backward(l));
        }
        let n = batch.len() as f64;
        total.scale(T::of(1.0 / n));
        Ok((total, loss / n))
    }

    /// One optimizer step over `micro_batch × accumulation_steps` examples.
    /// Returns the mean training loss of those examples.
    pub fn train_step(
        &mut self,
        model: &mut Model<T>,
        examples: &[TrainExample],
        features: &[SceneFeatures],
    ) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::Precondition("no training examples".into()));
        }
        let per_step = self.config.micro_batch * self.config.accumulation_steps;
        let picks: Vec<usize> = (0..per_step).map(|_| self.next_example(examples.len())).collect();
        let mut grads = Gradients::default();
        let mut loss = 0.0;
        for chunk in picks.chunks(self.config.micro_batch) {
            let batch: Vec<&TrainExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let (g, l) = self.gradients(model, &batch, features, true)?;
            grads.accumulate(g);
            loss += l;
        }
        let n_micro = self.config.accumulation_steps as f64;
        grads.scale(T::of(1.0 / n_micro));
        loss /= n_micro;
        self.apply(model, &mut grads);
        self.step += 1;
        self.losses.push(loss);
        Ok(loss)
    }

    fn apply(&mut self, model: &mut Model<T>, grads: &mut Gradients<T>) {
        let c = &self.config;
        if c.grad_clip > 0.0 {
            let norm = grads.global_norm().as_f64();
            if norm > c.grad_clip {
                grads.scale(T::of(c.grad_clip / norm));
            }
        }
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let step_size = T::of(c.lr / bc1);
        let bc2_sqrt = T::of(bc2.sqrt());
        let eps = T::of(c.eps);
        for (&id, g) in &grads.by_param {
            if !model.store.get(id).trainable {
                continue;
            }
            let st = self.moments.entry(id).or_insert_with(|| AdamState {
                m: Matrix::zeros(g.rows(), g.cols()),
                v: Matrix::zeros(g.rows(), g.cols()),
            });
            let w = model.store.get_mut(id).value.data_mut();
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            for i in 0..w.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                w[i] -= step_size * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
            }
        }
    }
}
