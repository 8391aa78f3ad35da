//! Minimal pre-norm decoder whose per-block residual outputs are exposed for
//! layer-selective regression.
//!
//! Block layout: `x += o(attn(ln1(x)))`, then `x += ff2(relu(ff1(ln2(x))))`.
//! The hidden state of block `i` is `x` after its second residual add.

mod quant;
mod tokenizer;

use std::borrow::Cow;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{AdaptedLinear, AdapterConfig, Projection};
use crate::numerics::{Fnv64, Segment, Tape, Tensor, TensorError, Var};
use crate::rng::{derive, normal_vec, Rng};

pub use quant::{dequantize, quantize_4bit, QuantizedWeights, QUANT_BLOCK, QUANT_LEVELS};
pub use tokenizer::{tokenize, Encoding};

pub const PAD_ID: usize = 0;
/// Std of every projection and feed-forward weight at init.
pub const WEIGHT_INIT_STD: f64 = 0.02;
pub const TOKEN_EMBED_STD: f64 = 1.0;
pub const POSITION_EMBED_STD: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("adapter config targets no projection")]
    NoAdapterTargets,
    #[error("adapters are already attached")]
    AdaptersAlreadyAttached,
    #[error("adapter already merged")]
    AlreadyMerged,
    #[error("no adapter attached")]
    NoAdapter,
    #[error("adapter attached but no tape handles supplied")]
    MissingAdapterVars,
    #[error("token id {id} out of range for vocab {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("input is empty")]
    EmptyInput,
    #[error("layer index {index} out of range for {n_layers} layers")]
    LayerOutOfRange { index: i64, n_layers: usize },
    #[error("corrupt quantized weights: {0}")]
    CorruptQuantization(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { n_layers: 12, d_model: 64, n_heads: 4, d_ff: 256, vocab_size: 256, max_seq_len: 128, seed: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be >= 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        Ok(())
    }
}

/// Maps a layer index to a 0-based block: `i ≥ 0` is used as is, `i < 0`
/// counts from the end so `-1` is the last block.
pub fn resolve_layer(n_layers: usize, index: i64) -> Result<usize, ModelError> {
    let n = n_layers as i64;
    let resolved = if index < 0 { n + index } else { index };
    if (0..n).contains(&resolved) {
        Ok(resolved as usize)
    } else {
        Err(ModelError::LayerOutOfRange { index, n_layers })
    }
}

/// Quantized storage with a lazily dequantized copy for forward passes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuantizedBase {
    pub weights: QuantizedWeights,
    #[serde(skip)]
    cache: OnceLock<Tensor>,
}

impl PartialEq for QuantizedBase {
    fn eq(&self, other: &Self) -> bool {
        self.weights == other.weights
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "storage", content = "value", rename_all = "snake_case")]
pub enum FrozenWeight {
    Dense(Tensor),
    Quantized(QuantizedBase),
}

impl FrozenWeight {
    pub fn shape(&self) -> &[usize] {
        match self {
            FrozenWeight::Dense(t) => t.shape(),
            FrozenWeight::Quantized(q) => &q.weights.shape,
        }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, FrozenWeight::Quantized(_))
    }

    pub fn materialize(&self) -> Result<Cow<'_, Tensor>, ModelError> {
        match self {
            FrozenWeight::Dense(t) => Ok(Cow::Borrowed(t)),
            FrozenWeight::Quantized(q) => {
                if let Some(t) = q.cache.get() {
                    return Ok(Cow::Borrowed(t));
                }
                let t = dequantize(&q.weights)?;
                Ok(Cow::Borrowed(q.cache.get_or_init(|| t)))
            }
        }
    }

    /// Replaces dense storage with int4 codes. Already-quantized weights are
    /// left as they are.
    pub fn quantize(&mut self) {
        if let FrozenWeight::Dense(t) = self {
            let weights = quantize_4bit(t, QUANT_BLOCK);
            *self = FrozenWeight::Quantized(QuantizedBase { weights, cache: OnceLock::new() });
        }
    }

    fn hash_into(&self, h: &mut Fnv64) {
        match self {
            FrozenWeight::Dense(t) => {
                h.write_bytes(b"dense");
                t.hash_into(h);
            }
            FrozenWeight::Quantized(q) => {
                h.write_bytes(b"int4");
                for &d in &q.weights.shape {
                    h.write_u64(d as u64);
                }
                h.write_bytes(&q.weights.codes.iter().map(|&c| c as u8).collect::<Vec<_>>());
                for s in &q.weights.scales {
                    h.write_u64(s.to_bits());
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNormParams {
    fn identity(d: usize) -> Result<Self, ModelError> {
        Ok(Self { gain: Tensor::filled(vec![d], 1.0)?, bias: Tensor::zeros(vec![d])? })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub ln1: LayerNormParams,
    pub query: AdaptedLinear,
    pub key: AdaptedLinear,
    pub value: AdaptedLinear,
    pub output: AdaptedLinear,
    pub ln2: LayerNormParams,
    pub ff1: FrozenWeight,
    pub ff1_bias: Tensor,
    pub ff2: FrozenWeight,
    pub ff2_bias: Tensor,
}

impl Block {
    fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self, ModelError> {
        let d = cfg.d_model;
        let mut dense = |rows: usize, cols: usize| Tensor::matrix(rows, cols, normal_vec(rng, rows * cols, WEIGHT_INIT_STD));
        Ok(Self {
            ln1: LayerNormParams::identity(d)?,
            query: AdaptedLinear::frozen(dense(d, d)?),
            key: AdaptedLinear::frozen(dense(d, d)?),
            value: AdaptedLinear::frozen(dense(d, d)?),
            output: AdaptedLinear::frozen(dense(d, d)?),
            ln2: LayerNormParams::identity(d)?,
            ff1: FrozenWeight::Dense(dense(cfg.d_ff, d)?),
            ff1_bias: Tensor::zeros(vec![cfg.d_ff])?,
            ff2: FrozenWeight::Dense(dense(d, cfg.d_ff)?),
            ff2_bias: Tensor::zeros(vec![d])?,
        })
    }

    pub fn projection(&self, p: Projection) -> &AdaptedLinear {
        match p {
            Projection::Query => &self.query,
            Projection::Key => &self.key,
            Projection::Value => &self.value,
            Projection::Output => &self.output,
        }
    }

    pub fn projection_mut(&mut self, p: Projection) -> &mut AdaptedLinear {
        match p {
            Projection::Query => &mut self.query,
            Projection::Key => &mut self.key,
            Projection::Value => &mut self.value,
            Projection::Output => &mut self.output,
        }
    }

    fn frozen_matrices_mut(&mut self) -> [&mut FrozenWeight; 6] {
        [&mut self.query.weight, &mut self.key.weight, &mut self.value.weight, &mut self.output.weight, &mut self.ff1, &mut self.ff2]
    }
}

/// Tape handles of each block's trainable adapter factors, indexed by
/// [`Projection::index`].
pub type AdapterVars = Vec<[Option<(Var, Var)>; 4]>;

/// Token rows of one or more sequences packed back to back.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub mask: Vec<bool>,
    pub segments: Vec<Segment>,
}

impl TokenBatch {
    /// Keeps every position, pads included.
    pub fn padded(encodings: &[Encoding]) -> Self {
        Self::build(encodings, false)
    }

    /// Drops pad positions. Under causal attention with pad keys masked,
    /// live rows come out exactly as in [`TokenBatch::padded`].
    pub fn packed(encodings: &[Encoding]) -> Self {
        Self::build(encodings, true)
    }

    fn build(encodings: &[Encoding], drop_pads: bool) -> Self {
        let mut b = TokenBatch { ids: Vec::new(), positions: Vec::new(), mask: Vec::new(), segments: Vec::new() };
        for e in encodings {
            let start = b.ids.len();
            for (pos, (&id, &live)) in e.ids.iter().zip(&e.mask).enumerate() {
                if drop_pads && !live {
                    continue;
                }
                b.ids.push(id);
                b.positions.push(pos);
                b.mask.push(live);
            }
            b.segments.push(Segment { start, len: b.ids.len() - start });
        }
        b
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }
}

/// Output of every block for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    /// Entry `i` is the residual output of block `i`, `[seq_len × d_model]`.
    pub per_layer: Vec<Tensor>,
    pub attention_mask: Vec<bool>,
}

impl HiddenStates {
    pub fn n_layers(&self) -> usize {
        self.per_layer.len()
    }

    pub fn select_layer(&self, index: i64) -> Result<&Tensor, ModelError> {
        Ok(&self.per_layer[resolve_layer(self.per_layer.len(), index)?])
    }
}

pub fn select_layer(states: &HiddenStates, index: i64) -> Result<&Tensor, ModelError> {
    states.select_layer(index)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub token_embedding: FrozenWeight,
    pub position_embedding: FrozenWeight,
    pub blocks: Vec<Block>,
    /// Set once adapters are attached.
    pub adapter_config: Option<AdapterConfig>,
}

pub fn init_model(config: &ModelConfig) -> Result<TransformerModel, ModelError> {
    TransformerModel::new(config)
}

impl TransformerModel {
    pub fn new(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let (v, d, l) = (config.vocab_size, config.d_model, config.max_seq_len);
        let mut rng = derive(config.seed, "embeddings");
        let token_embedding = Tensor::matrix(v, d, normal_vec(&mut rng, v * d, TOKEN_EMBED_STD))?;
        let position_embedding = Tensor::matrix(l, d, normal_vec(&mut rng, l * d, POSITION_EMBED_STD))?;
        let blocks =
            (0..config.n_layers).map(|i| Block::init(config, &mut derive(config.seed, &format!("block{i}")))).collect::<Result<_, _>>()?;
        Ok(Self {
            config: config.clone(),
            token_embedding: FrozenWeight::Dense(token_embedding),
            position_embedding: FrozenWeight::Dense(position_embedding),
            blocks,
            adapter_config: None,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn tokenize(&self, text: &str) -> Result<Encoding, ModelError> {
        tokenize(text, self.config.vocab_size, self.config.max_seq_len)
    }

    /// Attaches one adapter to every targeted projection of every block and
    /// returns the number of trainable adapter parameters.
    pub fn attach_adapters(&mut self, cfg: &AdapterConfig, rng: &mut Rng) -> Result<usize, ModelError> {
        cfg.validate()?;
        if self.adapter_config.is_some() || self.blocks.iter().any(|b| Projection::ALL.iter().any(|&p| b.projection(p).adapter.is_some())) {
            return Err(ModelError::AdaptersAlreadyAttached);
        }
        for block in &mut self.blocks {
            for p in Projection::ALL {
                if cfg.targets_projection(p) {
                    block.projection_mut(p).attach(cfg.kind, cfg.rank, cfg.alpha, rng)?;
                }
            }
        }
        self.adapter_config = Some(cfg.clone());
        Ok(self.trainable_adapter_params())
    }

    pub fn trainable_adapter_params(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| Projection::ALL.map(|p| b.projection(p)))
            .filter(|l| l.is_trainable())
            .filter_map(|l| l.adapter.as_ref().map(|a| a.param_count()))
            .sum()
    }

    /// Trainable adapter factors in block, projection, `(A, B)` order.
    pub fn adapter_params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for block in &self.blocks {
            for p in Projection::ALL {
                let l = block.projection(p);
                if let (Some(a), true) = (&l.adapter, l.is_trainable()) {
                    let (fa, fb) = a.factors();
                    out.extend([fa, fb]);
                }
            }
        }
        out
    }

    /// Mutable view in the same order as [`TransformerModel::adapter_params`].
    pub fn adapter_params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for block in &mut self.blocks {
            for l in [&mut block.query, &mut block.key, &mut block.value, &mut block.output] {
                if l.merged.is_some() {
                    continue;
                }
                if let Some(a) = &mut l.adapter {
                    let (fa, fb) = a.factors_mut();
                    out.push(fa);
                    out.push(fb);
                }
            }
        }
        out
    }

    /// Records every trainable adapter factor as a tape leaf.
    pub fn register_adapters(&self, tape: &mut Tape) -> AdapterVars {
        self.blocks
            .iter()
            .map(|block| {
                Projection::ALL.map(|p| {
                    let l = block.projection(p);
                    match (&l.adapter, l.is_trainable()) {
                        (Some(a), true) => {
                            let (fa, fb) = a.factors();
                            Some((tape.leaf(fa), tape.leaf(fb)))
                        }
                        _ => None,
                    }
                })
            })
            .collect()
    }

    pub fn merge_adapters(&mut self) -> Result<(), ModelError> {
        let mut merged_any = false;
        for block in &mut self.blocks {
            for p in Projection::ALL {
                let l = block.projection_mut(p);
                if l.adapter.is_some() {
                    l.merge()?;
                    merged_any = true;
                }
            }
        }
        if merged_any {
            Ok(())
        } else {
            Err(ModelError::NoAdapter)
        }
    }

    /// Stores every frozen weight matrix as int4 codes. Norm gains and biases
    /// stay dense.
    pub fn quantize_base(&mut self) {
        self.token_embedding.quantize();
        self.position_embedding.quantize();
        for block in &mut self.blocks {
            for w in block.frozen_matrices_mut() {
                w.quantize();
            }
        }
    }

    pub fn is_quantized(&self) -> bool {
        self.token_embedding.is_quantized()
    }

    /// FNV-1a over every frozen parameter in its stored form.
    pub fn base_checksum(&self) -> u64 {
        let mut h = Fnv64::default();
        self.token_embedding.hash_into(&mut h);
        self.position_embedding.hash_into(&mut h);
        for block in &self.blocks {
            for ln in [&block.ln1, &block.ln2] {
                ln.gain.hash_into(&mut h);
                ln.bias.hash_into(&mut h);
            }
            for p in Projection::ALL {
                block.projection(p).weight.hash_into(&mut h);
            }
            block.ff1.hash_into(&mut h);
            block.ff1_bias.hash_into(&mut h);
            block.ff2.hash_into(&mut h);
            block.ff2_bias.hash_into(&mut h);
        }
        h.finish()
    }

    fn check_ids(&self, ids: &[usize]) -> Result<(), ModelError> {
        if ids.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        let vocab = self.config.vocab_size;
        match ids.iter().find(|&&id| id >= vocab) {
            Some(&id) => Err(ModelError::TokenOutOfRange { id, vocab }),
            None => Ok(()),
        }
    }

    /// Records the first `n_blocks` blocks on `tape` and returns their
    /// outputs, each `[batch.rows() × d_model]`.
    ///
    /// `adapters` must come from [`TransformerModel::register_adapters`] on
    /// the same tape when trainable adapters are attached; `None` evaluates
    /// them with their current values as constants.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        batch: &TokenBatch,
        adapters: Option<&AdapterVars>,
        n_blocks: usize,
    ) -> Result<Vec<Var>, ModelError> {
        self.check_ids(&batch.ids)?;
        if n_blocks > self.blocks.len() {
            return Err(ModelError::LayerOutOfRange { index: n_blocks as i64, n_layers: self.blocks.len() });
        }
        if let Some(&pos) = batch.positions.iter().find(|&&p| p >= self.config.max_seq_len) {
            return Err(ModelError::InvalidConfig(format!("position {pos} exceeds max_seq_len {}", self.config.max_seq_len)));
        }
        let owned;
        let adapters = match adapters {
            Some(v) => v,
            None => {
                owned = self.constant_adapters(tape);
                &owned
            }
        };
        let tok = tape.constant(&*self.token_embedding.materialize()?);
        let pos = tape.constant(&*self.position_embedding.materialize()?);
        let te = tape.gather(tok, &batch.ids)?;
        let pe = tape.gather(pos, &batch.positions)?;
        let mut x = tape.add(te, pe)?;
        let mut outputs = Vec::with_capacity(n_blocks);
        for (block, vars) in self.blocks.iter().zip(adapters).take(n_blocks) {
            x = self.block_on_tape(tape, block, vars, x, batch)?;
            outputs.push(x);
        }
        Ok(outputs)
    }

    fn constant_adapters(&self, tape: &mut Tape) -> AdapterVars {
        self.blocks
            .iter()
            .map(|block| {
                Projection::ALL.map(|p| {
                    let l = block.projection(p);
                    match (&l.adapter, l.is_trainable()) {
                        (Some(a), true) => {
                            let (fa, fb) = a.factors();
                            Some((tape.constant(fa), tape.constant(fb)))
                        }
                        _ => None,
                    }
                })
            })
            .collect()
    }

    fn block_on_tape(
        &self,
        tape: &mut Tape,
        block: &Block,
        vars: &[Option<(Var, Var)>; 4],
        x: Var,
        batch: &TokenBatch,
    ) -> Result<Var, ModelError> {
        let ln = |tape: &mut Tape, p: &LayerNormParams, x: Var| -> Result<Var, ModelError> {
            let (g, b) = (tape.constant(&p.gain), tape.constant(&p.bias));
            Ok(tape.layer_norm(x, g, b)?)
        };
        let h = ln(tape, &block.ln1, x)?;
        let proj = |tape: &mut Tape, p: Projection, input: Var| block.projection(p).forward_on_tape(tape, input, vars[p.index()]);
        let q = proj(tape, Projection::Query, h)?;
        let k = proj(tape, Projection::Key, h)?;
        let v = proj(tape, Projection::Value, h)?;
        let att = tape.causal_attention(q, k, v, self.config.n_heads, &batch.segments, &batch.mask)?;
        let o = proj(tape, Projection::Output, att)?;
        let x = tape.add(x, o)?;

        let h = ln(tape, &block.ln2, x)?;
        let w1 = tape.constant(&*block.ff1.materialize()?);
        let b1 = tape.constant(&block.ff1_bias);
        let w2 = tape.constant(&*block.ff2.materialize()?);
        let b2 = tape.constant(&block.ff2_bias);
        let f = tape.linear(h, w1)?;
        let f = tape.add_row_bias(f, b1)?;
        let f = tape.relu(f)?;
        let f = tape.linear(f, w2)?;
        let f = tape.add_row_bias(f, b2)?;
        Ok(tape.add(x, f)?)
    }

    /// Runs all blocks over one sequence.
    pub fn forward_with_hidden_states(&self, ids: &[usize], mask: &[bool]) -> Result<HiddenStates, ModelError> {
        if ids.len() != mask.len() {
            return Err(ModelError::Tensor(TensorError::InvalidShape(vec![ids.len(), mask.len()])));
        }
        let enc = Encoding { ids: ids.to_vec(), mask: mask.to_vec() };
        let batch = TokenBatch::padded(std::slice::from_ref(&enc));
        let mut tape = Tape::new();
        let outs = self.forward_on_tape(&mut tape, &batch, None, self.blocks.len())?;
        Ok(HiddenStates { per_layer: outs.into_iter().map(|v| tape.tensor(v)).collect(), attention_mask: mask.to_vec() })
    }
}

#[cfg(test)]
mod tests;
