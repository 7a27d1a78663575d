//! Decoder-only micro language model with low-rank adapters, fed by the perceiver.

mod checkpoint;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{NodeId, ParamId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, LoraLinear};
use crate::perceiver::{Perceiver, PerceiverConfig, SceneFeatures};
use crate::prompt::{Element, PromptSequence, Vocabulary, EOS};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub use checkpoint::{Checkpoint, TensorRecord, CHECKPOINT_FORMAT};
pub use train::{AdamState, TrainConfig, TrainExample, Trainer};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MicroLMConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    /// Filled in from the vocabulary when the model is built by the pipeline.
    pub vocab_size: usize,
    pub seed: u64,
    pub train_embeddings: bool,
    pub train_lm_head: bool,
}

impl Default for MicroLMConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            max_seq: 512,
            vocab_size: 0,
            seed: 0,
            train_embeddings: false,
            train_lm_head: false,
        }
    }
}

/// Linear maps inside each block that can carry an adapter.
pub const LORA_TARGETS: [&str; 6] = ["q", "k", "v", "o", "ff_in", "ff_out"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub enabled: bool,
    pub r: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub targets: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            r: 8,
            alpha: 8.0,
            dropout: 0.1,
            targets: LORA_TARGETS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl LoraConfig {
    /// Rank 32, alpha 32, dropout 0.1: the published fine-tuning setting.
    pub fn published() -> Self {
        Self {
            r: 32,
            alpha: 32.0,
            ..Self::default()
        }
    }

    fn spec_for(&self, target: &str) -> Option<(usize, f64, f64)> {
        (self.enabled && self.targets.iter().any(|t| t == target)).then_some((self.r, self.alpha, self.dropout))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub perceiver: PerceiverConfig,
    pub lm: MicroLMConfig,
    pub lora: LoraConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.perceiver.validate()?;
        let lm = &self.lm;
        if lm.d_model == 0 || lm.n_heads == 0 || lm.n_layers == 0 || lm.d_ff == 0 || lm.max_seq == 0 {
            return Err(Error::Config("model widths, layer count and max_seq must be positive".into()));
        }
        if !lm.d_model.is_multiple_of(lm.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                lm.d_model, lm.n_heads
            )));
        }
        if self.perceiver.d_model != lm.d_model {
            return Err(Error::dim("perceiver output vs language model width", lm.d_model, self.perceiver.d_model));
        }
        if lm.vocab_size <= EOS as usize {
            return Err(Error::Config(format!("vocab_size {} is too small", lm.vocab_size)));
        }
        let lora = &self.lora;
        if lora.enabled {
            if lora.r == 0 {
                return Err(Error::Config("lora r must be positive".into()));
            }
            if !(0.0..1.0).contains(&lora.dropout) {
                return Err(Error::Config(format!("lora dropout {} outside [0, 1)", lora.dropout)));
            }
            if let Some(t) = lora.targets.iter().find(|t| !LORA_TARGETS.contains(&t.as_str())) {
                return Err(Error::Config(format!("unknown lora target '{t}'")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub q: LoraLinear,
    pub k: LoraLinear,
    pub v: LoraLinear,
    pub o: LoraLinear,
    pub ln2: LayerNorm,
    pub ff_in: LoraLinear,
    pub ff_out: LoraLinear,
}

/// Perceiver and transformer sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub perceiver: Perceiver,
    pub embed: ParamId,
    pub blocks: Vec<Block>,
    pub final_norm: LayerNorm,
    pub head: Linear,
}

/// Fixed sinusoidal position table, `max_seq × d_model`.
fn positions<T: Scalar>(len: usize, d: usize) -> Matrix<T> {
    let mut m = Matrix::zeros(len, d);
    for p in 0..len {
        for i in 0..d / 2 {
            let w = 10000f64.powf(-((2 * i) as f64) / d as f64);
            m.set(p, 2 * i, T::of((p as f64 * w).sin()));
            m.set(p, 2 * i + 1, T::of((p as f64 * w).cos()));
        }
    }
    m
}

impl<T: Scalar> Model<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let perceiver = Perceiver::new(
            &mut store,
            &config.perceiver,
            &mut ChaCha8Rng::seed_from_u64(config.perceiver.seed),
        )?;
        let lm = &config.lm;
        let rng = &mut ChaCha8Rng::seed_from_u64(lm.seed);
        let d = lm.d_model;
        let std = 1.0 / (d as f64).sqrt();
        let out_std = std / (2.0 * lm.n_layers as f64).sqrt();
        let embed = store.register("lm.embed", Matrix::randn(lm.vocab_size, d, 1.0, rng), lm.train_embeddings);
        let lora = &config.lora;
        let mut blocks = Vec::with_capacity(lm.n_layers);
        for l in 0..lm.n_layers {
            let p = format!("lm.layers.{l}");
            let mut lin = |name: &str, d_in: usize, d_out: usize, std: f64| {
                LoraLinear::new(&mut store, &format!("{p}.{name}"), d_in, d_out, std, lora.spec_for(name), rng)
            };
            let q = lin("q", d, d, std);
            let k = lin("k", d, d, std);
            let v = lin("v", d, d, std);
            let o = lin("o", d, d, out_std);
            let ff_in = lin("ff_in", d, lm.d_ff, std);
            let ff_out = lin("ff_out", lm.d_ff, d, out_std * (d as f64 / lm.d_ff as f64).sqrt());
            blocks.push(Block {
                ln1: LayerNorm::new(&mut store, &format!("{p}.ln1"), d, false),
                ln2: LayerNorm::new(&mut store, &format!("{p}.ln2"), d, false),
                q,
                k,
                v,
                o,
                ff_in,
                ff_out,
            });
        }
        let final_norm = LayerNorm::new(&mut store, "lm.final_norm", d, false);
        let head = Linear::new(&mut store, "lm.head", d, lm.vocab_size, std, lm.train_lm_head, rng);
        Ok(Self {
            config: config.clone(),
            store,
            perceiver,
            embed,
            blocks,
            final_norm,
            head,
        })
    }

    pub fn trainable_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// SHA-256 over name, shape and value bytes of every frozen parameter, in name order.
    pub fn frozen_hash(&self) -> String {
        let mut params: Vec<_> = self.store.iter().filter(|(_, p)| !p.trainable).map(|(_, p)| p).collect();
        params.sort_by(|a, b| a.name.cmp(&b.name));
        let mut h = Sha256::new();
        for p in params {
            h.update(p.name.as_bytes());
            h.update([0u8]);
            h.update((p.value.rows() as u64).to_le_bytes());
            h.update((p.value.cols() as u64).to_le_bytes());
            for &v in p.value.data() {
                h.update(v.hash_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn check_prompt(&self, prompt: &PromptSequence, features: &SceneFeatures) -> Result<()> {
        if prompt.len() > self.config.lm.max_seq {
            return Err(Error::SequenceTooLong {
                len: prompt.len(),
                max: self.config.lm.max_seq,
            });
        }
        prompt.check_features(1 + features.objects.len())?;
        for e in &prompt.elements {
            if let Element::Token(t) = e {
                if *t as usize >= self.config.lm.vocab_size {
                    return Err(Error::Precondition(format!("token id {t} outside the vocabulary")));
                }
            }
        }
        Ok(())
    }

    /// Final-normalized hidden states, one row per prompt position.
    ///
    /// `scene` is 1×d_model and `objects` n×d_model: the feature slot inputs.
    pub fn hidden_states(
        &self,
        tape: &mut Tape<T>,
        elements: &[Element],
        scene: NodeId,
        objects: Option<NodeId>,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> NodeId {
        let lm = &self.config.lm;
        let s = &self.store;
        let embed = tape.param(s, self.embed);
        let sources: Vec<(NodeId, usize)> = elements
            .iter()
            .map(|e| match *e {
                Element::Token(t) => (embed, t as usize),
                Element::Feature { index: 0, .. } => (scene, 0),
                Element::Feature { index, .. } => (objects.expect("object slot without objects"), index - 1),
            })
            .collect();
        let x = tape.gather_rows(&sources);
        let pos = tape.constant(positions(elements.len(), lm.d_model));
        let mut x = tape.add(x, pos);
        let dh = lm.d_model / lm.n_heads;
        let att_scale = T::of(1.0 / (dh as f64).sqrt());
        for b in &self.blocks {
            let h = b.ln1.forward(tape, s, x);
            let q = b.q.forward(tape, s, h, dropout.as_deref_mut());
            let k = b.k.forward(tape, s, h, dropout.as_deref_mut());
            let v = b.v.forward(tape, s, h, dropout.as_deref_mut());
            let heads: Vec<NodeId> = (0..lm.n_heads)
                .map(|i| {
                    let qh = tape.slice_cols(q, i * dh, dh);
                    let kh = tape.slice_cols(k, i * dh, dh);
                    let vh = tape.slice_cols(v, i * dh, dh);
                    let scores = tape.matmul_nt(qh, kh);
                    let probs = tape.causal_softmax(scores, att_scale);
                    tape.matmul(probs, vh)
                })
                .collect();
            let att = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
            let att = b.o.forward(tape, s, att, dropout.as_deref_mut());
            x = tape.add(x, att);
            let h = b.ln2.forward(tape, s, x);
            let h = b.ff_in.forward(tape, s, h, dropout.as_deref_mut());
            let h = tape.gelu(h);
            let h = b.ff_out.forward(tape, s, h, dropout.as_deref_mut());
            x = tape.add(x, h);
        }
        self.final_norm.forward(tape, s, x)
    }

    /// Logits over the vocabulary at every position.
    pub fn forward(&self, prompt: &PromptSequence, features: &SceneFeatures) -> Result<Matrix<T>> {
        self.check_prompt(prompt, features)?;
        let mut tape = Tape::inference();
        let (scene, objects) = self.perceiver.forward(&mut tape, &self.store, features)?;
        let h = self.hidden_states(&mut tape, &prompt.elements, scene, objects, None);
        let logits = self.head.forward(&mut tape, &self.store, h);
        Ok(tape.value(logits).clone())
    }

    /// Like [`Model::forward`] but with given input embeddings, one row per position.
    pub fn forward_embeddings(&self, inputs: &Matrix<T>) -> Matrix<T> {
        let mut tape = Tape::inference();
        let x = tape.constant(inputs.clone());
        let n = inputs.rows();
        let elements: Vec<Element> = (0..n).map(|i| Element::Feature { token: 0, index: i + 1 }).collect();
        let zero = tape.constant(Matrix::zeros(1, inputs.cols()));
        let h = self.hidden_states(&mut tape, &elements, zero, Some(x), None);
        let logits = self.head.forward(&mut tape, &self.store, h);
        tape.value(logits).clone()
    }

    /// Records the masked next-token loss on `tape`; returns the 1×1 loss node.
    pub fn loss_node(
        &self,
        tape: &mut Tape<T>,
        prompt: &PromptSequence,
        features: &SceneFeatures,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        self.check_prompt(prompt, features)?;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for i in 0..prompt.len().saturating_sub(1) {
            if prompt.loss_mask[i + 1] {
                if let Element::Token(t) = prompt.elements[i + 1] {
                    rows.push(i);
                    targets.push(t as usize);
                }
            }
        }
        if targets.is_empty() {
            return Err(Error::EmptyLossMask);
        }
        let (scene, objects) = self.perceiver.forward(tape, &self.store, features)?;
        let h = self.hidden_states(tape, &prompt.elements, scene, objects, dropout);
        let picked: Vec<(NodeId, usize)> = rows.iter().map(|&r| (h, r)).collect();
        let h = tape.gather_rows(&picked);
        let logits = self.head.forward(tape, &self.store, h);
        Ok(tape.cross_entropy(logits, &targets))
    }

    /// Mean cross-entropy over masked positions, without dropout.
    pub fn loss(&self, prompt: &PromptSequence, features: &SceneFeatures) -> Result<f64> {
        let mut tape = Tape::inference();
        let l = self.loss_node(&mut tape, prompt, features, None)?;
        Ok(tape.value(l).get(0, 0).as_f64())
    }

    /// Greedy decoding until EOS, `max_new_tokens`, or the length limit.
    /// Returns the generated ids without the EOS.
    pub fn generate_ids(
        &self,
        prompt: &PromptSequence,
        features: &SceneFeatures,
        max_new_tokens: usize,
    ) -> Result<Vec<u32>> {
        self.check_prompt(prompt, features)?;
        let (fs, fo) = {
            let mut tape = Tape::inference();
            let (s, o) = self.perceiver.forward(&mut tape, &self.store, features)?;
            (tape.value(s).clone(), o.map(|o| tape.value(o).clone()))
        };
        let mut elements = prompt.elements.clone();
        let mut out = Vec::new();
        while out.len() < max_new_tokens && elements.len() < self.config.lm.max_seq {
            let mut tape = Tape::inference();
            let scene = tape.constant(fs.clone());
            let objects = fo.as_ref().map(|m| tape.constant(m.clone()));
            let h = self.hidden_states(&mut tape, &elements, scene, objects, None);
            let last = tape.gather_rows(&[(h, elements.len() - 1)]);
            let logits = self.head.forward(&mut tape, &self.store, last);
            let row = tape.value(logits).row(0);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            let id = best as u32;
            if id == EOS {
                break;
            }
            out.push(id);
            elements.push(Element::Token(id));
        }
        Ok(out)
    }

    pub fn generate(
        &self,
        prompt: &PromptSequence,
        features: &SceneFeatures,
        vocab: &Vocabulary,
        max_new_tokens: usize,
    ) -> Result<String> {
        Ok(vocab.decode(&self.generate_ids(prompt, features, max_new_tokens)?))
    }

    /// Adapter-free model whose base weights are `W + (alpha/r)·B·A`.
    pub fn merge_adapters(&self) -> Result<Model<T>> {
        let mut config = self.config.clone();
        config.lora.enabled = false;
        let mut merged = Model::<T>::new(&config)?;
        let names: Vec<(ParamId, String)> = merged.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (dst, name) in names {
            let src = self.store.lookup(&name).expect("every merged parameter exists in the adapter model");
            merged.store.get_mut(dst).value = self.store.value(src).clone();
        }
        for (mine, theirs) in self.blocks.iter().zip(&merged.blocks) {
            let pairs = [
                (&mine.q, &theirs.q),
                (&mine.k, &theirs.k),
                (&mine.v, &theirs.v),
                (&mine.o, &theirs.o),
                (&mine.ff_in, &theirs.ff_in),
                (&mine.ff_out, &theirs.ff_out),
            ];
            for (a, b) in pairs {
                merged.store.get_mut(b.base.weight).value = a.merged_weight(&self.store);
            }
        }
        Ok(merged)
    }
}
