//! Desk-scale causal language model with LoRA-adapted attention projections.
//!
//! Byte-level vocabulary, a token embedding table tied to the output head, and
//! `n_layers` single-head causal mixing layers with residual connections. Every
//! query/key/value/output projection is a [`LoraLayer`]; only the low-rank
//! factors are trainable.

mod checkpoint;
mod lora;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use lora::{BoundLora, LoraConfig, LoraLayer};

use crate::seed::{self, Rng, Stream};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Additive mask for future positions; `exp` of it underflows to exactly zero.
const MASKED: f64 = -1e9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("empty token sequence")]
    EmptySequence,
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("sequence length {len} exceeds context length {context}")]
    TooLong { len: usize, context: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 32,
            n_layers: 1,
            context_len: 512,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab_size < 2 {
            return Err(ModelError::Config("vocab_size must be at least 2".into()));
        }
        if self.d_model < 2 {
            return Err(ModelError::Config("d_model must be at least 2".into()));
        }
        if self.context_len < 1 {
            return Err(ModelError::Config("context_len must be at least 1".into()));
        }
        if self.n_layers < 1 {
            return Err(ModelError::Config("n_layers must be at least 1".into()));
        }
        Ok(())
    }
}

/// NLL reduction over target positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

/// Query, key, value and output projections of one mixing layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingLayer {
    pub q: LoraLayer,
    pub k: LoraLayer,
    pub v: LoraLayer,
    pub o: LoraLayer,
}

impl MixingLayer {
    fn projections(&self) -> [&LoraLayer; 4] {
        [&self.q, &self.k, &self.v, &self.o]
    }

    fn projections_mut(&mut self) -> [&mut LoraLayer; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentModel {
    config: ModelConfig,
    lora: LoraConfig,
    embedding: Tensor,
    layers: Vec<MixingLayer>,
}

/// Tape handles for a whole model.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub embedding: Var,
    pub embedding_t: Var,
    pub layers: Vec<[BoundLora; 4]>,
}

impl BoundModel {
    /// LoRA factor handles in [`AgentModel::lora_tensors`] order.
    pub fn lora_vars(&self) -> Vec<Var> {
        self.layers
            .iter()
            .flat_map(|l| l.iter().flat_map(|b| [b.a, b.b]))
            .collect()
    }
}

/// Hidden states and logits recorded for one sequence.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub hidden: Var,
    pub logits: Var,
}

/// One `(context, target)` pair for the NLL objective.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NllExample {
    pub context: Vec<u32>,
    pub target: Vec<u32>,
}

/// Byte-level tokenization.
pub fn tokenize(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

impl AgentModel {
    /// Seeded random base weights with freshly initialized adapters.
    pub fn new(config: ModelConfig, lora: LoraConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.d_model;
        let mut base_rng = seed::rng(config.seed, Stream::BaseWeights);
        let mut lora_rng = seed::rng(config.seed, Stream::LoraInit);

        let embedding = gaussian(&mut base_rng, config.vocab_size, d, 1.0 / (d as f64).sqrt())?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let mut proj = || -> Result<LoraLayer, ModelError> {
                let w = gaussian(&mut base_rng, d, d, 1.0 / (d as f64).sqrt())?;
                LoraLayer::new(w, lora, &mut lora_rng)
            };
            layers.push(MixingLayer {
                q: proj()?,
                k: proj()?,
                v: proj()?,
                o: proj()?,
            });
        }
        Ok(Self {
            config,
            lora,
            embedding,
            layers,
        })
    }

    /// The same frozen weights with fresh adapters drawn from `seed`.
    pub fn with_adapters(&self, lora: LoraConfig, seed: u64) -> Result<Self, ModelError> {
        let mut rng = seed::rng(seed, Stream::LoraInit);
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let mut fresh = |p: &LoraLayer| LoraLayer::new(p.base().clone(), lora, &mut rng);
            layers.push(MixingLayer {
                q: fresh(&l.q)?,
                k: fresh(&l.k)?,
                v: fresh(&l.v)?,
                o: fresh(&l.o)?,
            });
        }
        Self::from_parts(self.config, lora, self.embedding.clone(), layers)
    }

    /// Assembles a model from explicit weights.
    pub fn from_parts(
        config: ModelConfig,
        lora: LoraConfig,
        embedding: Tensor,
        layers: Vec<MixingLayer>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let (v, d) = embedding.dims2("embedding")?;
        if v != config.vocab_size || d != config.d_model || layers.len() != config.n_layers {
            return Err(ModelError::Config(format!(
                "embedding {v}x{d} with {} layers does not match config {:?}",
                layers.len(),
                config
            )));
        }
        for layer in &layers {
            for p in layer.projections() {
                if p.d_in() != d || p.d_out() != d {
                    return Err(ModelError::Config("projection shape must be d_model x d_model".into()));
                }
            }
        }
        Ok(Self {
            config,
            lora,
            embedding,
            layers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn lora_config(&self) -> &LoraConfig {
        &self.lora
    }

    pub fn embedding(&self) -> &Tensor {
        &self.embedding
    }

    pub fn layers(&self) -> &[MixingLayer] {
        &self.layers
    }

    /// Frozen-base view: the same weights with adapters switched off.
    pub fn base_encoder(&self) -> BaseEncoder<'_> {
        BaseEncoder(self)
    }

    /// Trainable factors in a fixed order: per layer, `q.a, q.b, k.a, k.b, v.a, v.b, o.a, o.b`.
    pub fn lora_tensors(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|l| l.projections().into_iter().flat_map(|p| [p.a.clone(), p.b.clone()]))
            .collect()
    }

    pub(crate) fn lora_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.projections_mut().into_iter().flat_map(|p| p.factors_mut()))
            .collect()
    }

    /// Replaces the trainable factors (same order as [`Self::lora_tensors`]).
    pub fn set_lora_tensors(&mut self, tensors: &[Tensor]) -> Result<(), ModelError> {
        let mut slots = self.lora_tensors_mut();
        if slots.len() != tensors.len() {
            return Err(ModelError::Config(format!(
                "expected {} lora tensors, got {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (slot, t) in slots.iter_mut().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "set lora tensors",
                    left: slot.shape().to_vec(),
                    right: t.shape().to_vec(),
                }
                .into());
            }
            **slot = t.clone().with_grad(false);
        }
        Ok(())
    }

    /// A copy whose projections are replaced by their merged weights and whose
    /// adapters are reset to zero.
    pub fn merged(&self) -> AgentModel {
        let mut out = self.clone();
        for layer in &mut out.layers {
            for p in layer.projections_mut() {
                p.base = p.lora_merge();
                p.b = Tensor::zeros(p.b.shape().to_vec());
            }
        }
        out
    }

    /// SHA-256 over the frozen tensors (embedding table and base projections).
    pub fn base_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |t: &Tensor| {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        };
        feed(&self.embedding);
        for layer in &self.layers {
            for p in layer.projections() {
                feed(p.base());
            }
        }
        hex::encode(h.finalize())
    }

    /// Registers all parameters; adapter factors are trainable when `trainable` is set.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundModel, ModelError> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mut bound = Vec::with_capacity(4);
            for p in layer.projections() {
                bound.push(p.bind(tape, trainable)?);
            }
            layers.push(to_array(bound));
        }
        self.finish_bind(tape, layers)
    }

    /// Registers frozen parameters and uses the given handles for the adapter factors.
    pub fn bind_with_lora(&self, tape: &mut Tape, lora_vars: &[Var]) -> Result<BoundModel, ModelError> {
        let expected = self.layers.len() * 8;
        if lora_vars.len() != expected {
            return Err(ModelError::Config(format!("expected {expected} lora handles, got {}", lora_vars.len())));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut it = lora_vars.chunks(2);
        for layer in &self.layers {
            let mut bound = Vec::with_capacity(4);
            for p in layer.projections() {
                let pair = it.next().expect("length checked");
                bound.push(p.bind_with(tape, pair[0], pair[1])?);
            }
            layers.push(to_array(bound));
        }
        self.finish_bind(tape, layers)
    }

    fn finish_bind(&self, tape: &mut Tape, layers: Vec<[BoundLora; 4]>) -> Result<BoundModel, ModelError> {
        let embedding = tape.constant(self.embedding.clone());
        let embedding_t = tape.constant(self.embedding.transpose()?);
        Ok(BoundModel {
            embedding,
            embedding_t,
            layers,
        })
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if tokens.len() > self.config.context_len {
            return Err(ModelError::TooLong {
                len: tokens.len(),
                context: self.config.context_len,
            });
        }
        if let Some(&token) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                token,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Records the full forward pass of `tokens`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        tokens: &[u32],
        adapters: bool,
        mut dropout_rng: Option<&mut Rng>,
    ) -> Result<ForwardVars, ModelError> {
        self.check_tokens(tokens)?;
        let t = tokens.len();
        let d = self.config.d_model;
        let v = self.config.vocab_size;

        let mut onehot = vec![0.0; t * v];
        for (i, &tok) in tokens.iter().enumerate() {
            onehot[i * v + tok as usize] = 1.0;
        }
        let onehot = tape.constant(Tensor::matrix(t, v, onehot)?);
        let mut x = tape.matmul(onehot, bound.embedding)?;

        let mut mask = vec![0.0; t * t];
        for i in 0..t {
            for j in (i + 1)..t {
                mask[i * t + j] = MASKED;
            }
        }
        let mask = tape.constant(Tensor::matrix(t, t, mask)?);
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();

        for (layer, handles) in self.layers.iter().zip(&bound.layers) {
            let [bq, bk, bv, bo] = handles;
            let q = layer.q.forward_on_tape(tape, bq, x, adapters, dropout_rng.as_deref_mut())?;
            let k = layer.k.forward_on_tape(tape, bk, x, adapters, dropout_rng.as_deref_mut())?;
            let val = layer.v.forward_on_tape(tape, bv, x, adapters, dropout_rng.as_deref_mut())?;
            let k_t = tape.transpose(k)?;
            let scores = tape.matmul(q, k_t)?;
            let scores = tape.scale(scores, inv_sqrt_d)?;
            let scores = tape.add(scores, mask)?;
            let weights = tape.softmax_rows(scores, 1.0)?;
            let mixed = tape.matmul(weights, val)?;
            let out = layer.o.forward_on_tape(tape, bo, mixed, adapters, dropout_rng.as_deref_mut())?;
            x = tape.add(x, out)?;
        }
        let logits = tape.matmul(x, bound.embedding_t)?;
        Ok(ForwardVars { hidden: x, logits })
    }

    fn eval_forward(&self, tokens: &[u32], adapters: bool) -> Result<(Tensor, Tensor), ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let out = self.forward_on_tape(&mut tape, &bound, tokens, adapters, None)?;
        Ok((tape.value(out.hidden).clone(), tape.value(out.logits).clone()))
    }

    /// Next-token logits, `len × vocab_size`, adapters active, no dropout.
    pub fn forward_logits(&self, tokens: &[u32]) -> Result<Tensor, ModelError> {
        self.eval_forward(tokens, true).map(|(_, l)| l)
    }

    /// Final-layer hidden states, `len × d_model`, adapters active, no dropout.
    pub fn encode_hidden_states(&self, tokens: &[u32]) -> Result<Tensor, ModelError> {
        self.eval_forward(tokens, true).map(|(h, _)| h)
    }

    /// Negative log-likelihood of every example's target tokens, eval mode.
    pub fn nll_loss(&self, batch: &[NllExample], reduction: Reduction) -> Result<f64, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let mut total = 0.0;
        for ex in batch {
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, false)?;
            let tokens: Vec<u32> = ex.context.iter().chain(&ex.target).copied().collect();
            let fwd = self.forward_on_tape(&mut tape, &bound, &tokens, true, None)?;
            let loss = nll_on_tape(&mut tape, fwd.logits, &tokens, ex.context.len(), reduction)?;
            total += tape.value(loss).data()[0];
        }
        Ok(total)
    }
}

/// Frozen-base encoder: hidden states computed with adapters disabled.
#[derive(Debug, Clone, Copy)]
pub struct BaseEncoder<'a>(&'a AgentModel);

/// Anything that maps a token sequence to final-layer hidden states.
pub trait Encoder {
    fn hidden_states(&self, tokens: &[u32]) -> Result<Tensor, ModelError>;
    fn context_len(&self) -> usize;
}

impl Encoder for AgentModel {
    fn hidden_states(&self, tokens: &[u32]) -> Result<Tensor, ModelError> {
        self.encode_hidden_states(tokens)
    }

    fn context_len(&self) -> usize {
        self.config.context_len
    }
}

impl Encoder for BaseEncoder<'_> {
    fn hidden_states(&self, tokens: &[u32]) -> Result<Tensor, ModelError> {
        self.0.eval_forward(tokens, false).map(|(h, _)| h)
    }

    fn context_len(&self) -> usize {
        self.0.config.context_len
    }
}

/// Records `−Σ log p(tokens[t] | tokens[..t])` over positions `t ≥ max(first_target, 1)`.
///
/// The first token of a sequence has no prefix to condition on and is never scored.
/// Returns a zero constant when no position is scored.
pub fn nll_on_tape(
    tape: &mut Tape,
    logits: Var,
    tokens: &[u32],
    first_target: usize,
    reduction: Reduction,
) -> Result<Var, TensorError> {
    let (t, v) = tape.value(logits).dims2("nll")?;
    let mut select = vec![0.0; t * v];
    let mut count = 0usize;
    for pos in first_target.max(1)..tokens.len().min(t) {
        select[(pos - 1) * v + tokens[pos] as usize] = 1.0;
        count += 1;
    }
    if count == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)?));
    }
    let probs = tape.softmax_rows(logits, 1.0)?;
    let logp = tape.log(probs)?;
    let select = tape.constant(Tensor::matrix(t, v, select)?);
    let picked = tape.mul(logp, select)?;
    let total = tape.sum(picked)?;
    let scale = match reduction {
        Reduction::Sum => -1.0,
        Reduction::Mean => -1.0 / count as f64,
    };
    tape.scale(total, scale)
}

fn gaussian(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Result<Tensor, TensorError> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect())
}

fn to_array(v: Vec<BoundLora>) -> [BoundLora; 4] {
    v.try_into().expect("four projections per layer")
}
