//! Regression head over a selected layer's pooled hidden states, and the MSE
//! training loop over adapter and head parameters.

mod io;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::AdapterConfig;
use crate::numerics::{Segment, Tape, Tensor, TensorError, Var};
use crate::rng::{normal_vec, Rng};
use crate::transformer::ModelError;

pub use io::{load_checkpoint, read_loss_csv, read_predictions, save_checkpoint, write_loss_csv, write_predictions, CHECKPOINT_FORMAT};
pub use train::{evaluate, pipeline_loss, predict_da, train, Adam, Prediction, TrainedQeModel};

pub const HEAD_INIT_STD: f64 = 0.02;
pub const DEFAULT_SEPARATOR: &str = " [SEP] ";

#[derive(Debug, Error)]
pub enum QeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("source and translation must both be nonempty")]
    EmptyInput,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("loss became non-finite in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("frozen base weights changed during training")]
    BaseMutated,
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Format(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingStrategy {
    /// Mean over non-pad positions.
    #[default]
    Mean,
    /// Last non-pad position.
    Last,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreScale {
    /// Head output is the DA score; predictions are clamped to `[0, 100]`.
    #[serde(rename = "raw_0_100")]
    Raw0To100,
    /// Targets are `DA / 100`; predictions are `100 · sigmoid(head)`.
    #[default]
    #[serde(rename = "unit_interval")]
    UnitInterval,
}

impl ScoreScale {
    pub fn target(self, da: f64) -> f64 {
        match self {
            ScoreScale::Raw0To100 => da,
            ScoreScale::UnitInterval => da / 100.0,
        }
    }

    /// Maps a raw head output to a DA score in `[0, 100]`.
    pub fn to_da(self, head_output: f64) -> f64 {
        match self {
            ScoreScale::Raw0To100 => head_output.clamp(0.0, 100.0),
            ScoreScale::UnitInterval => 100.0 * crate::numerics::sigmoid(head_output),
        }
    }
}

/// `W2 · relu(W1 · x + b1) + b2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionHead {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl HeadVars {
    pub fn all(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

impl RegressionHead {
    pub fn new(d_model: usize, d_hidden: usize, rng: &mut Rng) -> Result<Self, QeError> {
        let w1 = Tensor::matrix(d_hidden, d_model, normal_vec(rng, d_hidden * d_model, HEAD_INIT_STD))?;
        let w2 = Tensor::matrix(1, d_hidden, normal_vec(rng, d_hidden, HEAD_INIT_STD))?;
        Self::from_weights(w1, Tensor::zeros(vec![d_hidden])?, w2, Tensor::zeros(vec![1])?)
    }

    pub fn zeros(d_model: usize, d_hidden: usize) -> Result<Self, QeError> {
        Self::from_weights(
            Tensor::zeros(vec![d_hidden, d_model])?,
            Tensor::zeros(vec![d_hidden])?,
            Tensor::zeros(vec![1, d_hidden])?,
            Tensor::zeros(vec![1])?,
        )
    }

    pub fn from_weights(w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Result<Self, QeError> {
        let dh = w1.shape()[0];
        let ok = w1.shape().len() == 2 && b1.shape() == [dh] && w2.shape() == [1, dh] && b2.shape() == [1];
        if !ok {
            return Err(QeError::InvalidConfig(format!("head shapes {:?} {:?} {:?} {:?}", w1.shape(), b1.shape(), w2.shape(), b2.shape())));
        }
        let g = |t: Tensor| t.with_grad(true);
        Ok(Self { w1: g(w1), b1: g(b1), w2: g(w2), b2: g(b2) })
    }

    pub fn d_model(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn d_hidden(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    pub fn params(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn register(&self, tape: &mut Tape) -> HeadVars {
        HeadVars { w1: tape.leaf(&self.w1), b1: tape.leaf(&self.b1), w2: tape.leaf(&self.w2), b2: tape.leaf(&self.b2) }
    }

    pub fn constants(&self, tape: &mut Tape) -> HeadVars {
        HeadVars { w1: tape.constant(&self.w1), b1: tape.constant(&self.b1), w2: tape.constant(&self.w2), b2: tape.constant(&self.b2) }
    }

    /// `[batch × d_model]` → `[batch × 1]`.
    pub fn forward_on_tape(tape: &mut Tape, pooled: Var, vars: HeadVars) -> Result<Var, QeError> {
        let h = tape.linear(pooled, vars.w1)?;
        let h = tape.add_row_bias(h, vars.b1)?;
        let h = tape.relu(h)?;
        let y = tape.linear(h, vars.w2)?;
        Ok(tape.add_row_bias(y, vars.b2)?)
    }
}

/// Pools `[seq × d_model]` hidden states into `[d_model]`.
pub fn pool(states: &Tensor, mask: &[bool], strategy: PoolingStrategy) -> Result<Tensor, QeError> {
    let mut tape = Tape::new();
    let x = tape.constant(states);
    let seg = [Segment { start: 0, len: states.rows() }];
    let p = pool_on_tape(&mut tape, x, &seg, mask, strategy)?;
    Ok(tape.tensor(p).reshape(vec![states.cols()])?)
}

pub fn pool_on_tape(tape: &mut Tape, x: Var, segments: &[Segment], mask: &[bool], strategy: PoolingStrategy) -> Result<Var, QeError> {
    Ok(match strategy {
        PoolingStrategy::Mean => tape.segment_mean(x, segments, mask)?,
        PoolingStrategy::Last => tape.segment_last(x, segments, mask)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub layer_index: i64,
    pub adapter: AdapterConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub score_scale: ScoreScale,
    pub pooling: PoolingStrategy,
    /// Head width; `None` uses `d_model`.
    pub head_hidden: Option<usize>,
    /// Store frozen weights as int4 codes before attaching adapters.
    pub quantize_base: bool,
    pub separator: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            layer_index: -1,
            adapter: AdapterConfig::default(),
            epochs: 10,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            score_scale: ScoreScale::default(),
            pooling: PoolingStrategy::default(),
            head_hidden: None,
            quantize_base: false,
            separator: DEFAULT_SEPARATOR.into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), QeError> {
        if self.epochs == 0 {
            return Err(QeError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(QeError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(QeError::InvalidConfig(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.head_hidden == Some(0) {
            return Err(QeError::InvalidConfig("head_hidden must be >= 1".into()));
        }
        if self.separator.is_empty() {
            return Err(QeError::InvalidConfig("separator must be nonempty".into()));
        }
        self.adapter.validate()?;
        Ok(())
    }
}

/// Joins a pair into the single sequence the model reads.
pub fn join_pair(source: &str, translation: &str, separator: &str) -> Result<String, QeError> {
    let (s, t) = (source.trim(), translation.trim());
    if s.is_empty() || t.is_empty() {
        return Err(QeError::EmptyInput);
    }
    Ok(format!("{s}{separator}{t}"))
}

#[cfg(test)]
mod tests;
