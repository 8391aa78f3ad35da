//! Low-rank adapters over frozen linear projections.
//!
//! Weights are stored `out × in`, so a projection applied to row-major
//! activations `x: [N × in]` computes `x · Wᵀ`.
//!
//! * LoRA adds a factored update: `W' = W + (α/R)·B·A` with `A: [R × in]`,
//!   `B: [out × R]`.
//! * LoRMA modulates the weight multiplicatively: `W' = (I + (α/R)·B·A)·W`
//!   with `A: [R × out]`, `B: [out × R]`.
//!
//! Both start with `B = 0`, so attaching an adapter leaves the model output
//! unchanged until training moves `B`.

use std::borrow::Cow;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::numerics::{Tape, Tensor, Var};
use crate::rng::{normal_vec, Rng};
use crate::transformer::{FrozenWeight, ModelError};

/// Standard deviation of the `A` factor at attachment.
pub const ADAPTER_INIT_STD: f64 = 0.02;

/// Rank/α pairings swept by default.
pub const DEFAULT_RANK_GRID: [(usize, f64); 3] = [(32, 16.0), (64, 32.0), (128, 32.0)];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Lora,
    Lorma,
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdapterKind::Lora => "lora",
            AdapterKind::Lorma => "lorma",
        })
    }
}

/// Attention projection an adapter can target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Query, Projection::Key, Projection::Value, Projection::Output];

    pub fn index(self) -> usize {
        match self {
            Projection::Query => 0,
            Projection::Key => 1,
            Projection::Value => 2,
            Projection::Output => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub kind: AdapterKind,
    pub rank: usize,
    pub alpha: f64,
    #[serde(default = "default_targets")]
    pub targets: Vec<Projection>,
}

fn default_targets() -> Vec<Projection> {
    vec![Projection::Query, Projection::Value]
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { kind: AdapterKind::Lora, rank: 64, alpha: 32.0, targets: default_targets() }
    }
}

impl AdapterConfig {
    pub fn new(kind: AdapterKind, rank: usize, alpha: f64) -> Self {
        Self { kind, rank, alpha, ..Self::default() }
    }

    pub fn with_targets(mut self, targets: &[Projection]) -> Self {
        self.targets = targets.to_vec();
        self
    }

    /// Effective multiplier on the low-rank update, `α / R`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.rank == 0 {
            return Err(ModelError::InvalidConfig("adapter rank must be >= 1".into()));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(ModelError::InvalidConfig(format!("adapter alpha must be positive, got {}", self.alpha)));
        }
        if self.targets.is_empty() {
            return Err(ModelError::NoAdapterTargets);
        }
        Ok(())
    }

    pub fn targets_projection(&self, p: Projection) -> bool {
        self.targets.contains(&p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    /// `[R × in]`
    pub a: Tensor,
    /// `[out × R]`, zero at init
    pub b: Tensor,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LormaAdapter {
    /// `[R × out]`
    pub a: Tensor,
    /// `[out × R]`, zero at init
    pub b: Tensor,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Adapter {
    Lora(LoraAdapter),
    Lorma(LormaAdapter),
}

impl LoraAdapter {
    pub fn init(d_out: usize, d_in: usize, rank: usize, alpha: f64, rng: &mut Rng) -> Result<Self, ModelError> {
        let a = Tensor::matrix(rank, d_in, normal_vec(rng, rank * d_in, ADAPTER_INIT_STD))?.with_grad(true);
        let b = Tensor::zeros(vec![d_out, rank])?.with_grad(true);
        Ok(Self { a, b, scale: alpha / rank as f64 })
    }

    pub fn from_factors(a: Tensor, b: Tensor, alpha: f64) -> Result<Self, ModelError> {
        let (r, _) = a.as_matrix_dims("lora")?;
        let (_, r2) = b.as_matrix_dims("lora")?;
        if r != r2 {
            return Err(ModelError::Tensor(crate::numerics::TensorError::ShapeMismatch {
                op: "lora factors",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            }));
        }
        Ok(Self { a: a.with_grad(true), b: b.with_grad(true), scale: alpha / r as f64 })
    }
}

impl LormaAdapter {
    pub fn init(d_out: usize, rank: usize, alpha: f64, rng: &mut Rng) -> Result<Self, ModelError> {
        let a = Tensor::matrix(rank, d_out, normal_vec(rng, rank * d_out, ADAPTER_INIT_STD))?.with_grad(true);
        let b = Tensor::zeros(vec![d_out, rank])?.with_grad(true);
        Ok(Self { a, b, scale: alpha / rank as f64 })
    }

    pub fn from_factors(a: Tensor, b: Tensor, alpha: f64) -> Result<Self, ModelError> {
        let (r, out) = a.as_matrix_dims("lorma")?;
        let (out2, r2) = b.as_matrix_dims("lorma")?;
        if r != r2 || out != out2 {
            return Err(ModelError::Tensor(crate::numerics::TensorError::ShapeMismatch {
                op: "lorma factors",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            }));
        }
        Ok(Self { a: a.with_grad(true), b: b.with_grad(true), scale: alpha / r as f64 })
    }
}

impl Adapter {
    pub fn new(kind: AdapterKind, d_out: usize, d_in: usize, rank: usize, alpha: f64, rng: &mut Rng) -> Result<Self, ModelError> {
        Ok(match kind {
            AdapterKind::Lora => Adapter::Lora(LoraAdapter::init(d_out, d_in, rank, alpha, rng)?),
            AdapterKind::Lorma => Adapter::Lorma(LormaAdapter::init(d_out, rank, alpha, rng)?),
        })
    }

    pub fn kind(&self) -> AdapterKind {
        match self {
            Adapter::Lora(_) => AdapterKind::Lora,
            Adapter::Lorma(_) => AdapterKind::Lorma,
        }
    }

    pub fn factors(&self) -> (&Tensor, &Tensor) {
        match self {
            Adapter::Lora(l) => (&l.a, &l.b),
            Adapter::Lorma(l) => (&l.a, &l.b),
        }
    }

    pub fn factors_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        match self {
            Adapter::Lora(l) => (&mut l.a, &mut l.b),
            Adapter::Lorma(l) => (&mut l.a, &mut l.b),
        }
    }

    pub fn scale(&self) -> f64 {
        match self {
            Adapter::Lora(l) => l.scale,
            Adapter::Lorma(l) => l.scale,
        }
    }

    pub fn param_count(&self) -> usize {
        let (a, b) = self.factors();
        a.numel() + b.numel()
    }

    /// Records the adapted projection of `x` on the tape. `a` and `b` are
    /// the tape handles of this adapter's factors.
    pub fn forward_on_tape(&self, tape: &mut Tape, x: Var, w: Var, a: Var, b: Var) -> Result<Var, ModelError> {
        let base = tape.linear(x, w)?;
        let delta = self.delta_on_tape(tape, x, base, a, b)?;
        Ok(tape.add(base, delta)?)
    }

    /// The adapter branch alone: `s·(x·Aᵀ)·Bᵀ` for LoRA, `s·(xWᵀ·Aᵀ)·Bᵀ`
    /// for LoRMA, where `base = x·Wᵀ`.
    pub fn delta_on_tape(&self, tape: &mut Tape, x: Var, base: Var, a: Var, b: Var) -> Result<Var, ModelError> {
        let down = match self {
            Adapter::Lora(_) => tape.linear(x, a)?,
            Adapter::Lorma(_) => tape.linear(base, a)?,
        };
        let up = tape.linear(down, b)?;
        Ok(tape.scale(up, self.scale())?)
    }

    /// Adapter contribution to `W'x` for a single input vector.
    pub fn delta(&self, w: &Tensor, x: &Tensor) -> Result<Tensor, ModelError> {
        let (d_out, d_in) = w.as_matrix_dims("adapter delta")?;
        let mut tape = Tape::new();
        let xv = tape.constant(&x.reshape(vec![1, d_in])?);
        let wv = tape.constant(w);
        let base = tape.linear(xv, wv)?;
        let (a, b) = self.factors();
        let (av, bv) = (tape.constant(a), tape.constant(b));
        let d = self.delta_on_tape(&mut tape, xv, base, av, bv)?;
        Ok(tape.tensor(d).reshape(vec![d_out])?)
    }

    /// Dense merged weight: LoRA `W + sBA`, LoRMA `(I + sBA)W`.
    pub fn merge(&self, w: &Tensor) -> Result<Tensor, ModelError> {
        let (a, b) = self.factors();
        let ba = b.matmul(a)?;
        let s = self.scale();
        match self {
            Adapter::Lora(_) => {
                if ba.shape() != w.shape() {
                    return Err(ModelError::Tensor(crate::numerics::TensorError::ShapeMismatch {
                        op: "lora merge",
                        left: ba.shape().to_vec(),
                        right: w.shape().to_vec(),
                    }));
                }
                let data = w.data().iter().zip(ba.data()).map(|(wv, d)| wv + s * d).collect();
                Ok(Tensor::new(w.shape().to_vec(), data)?)
            }
            Adapter::Lorma(_) => {
                let delta = ba.matmul(w)?;
                let data = w.data().iter().zip(delta.data()).map(|(wv, d)| wv + s * d).collect();
                Ok(Tensor::new(w.shape().to_vec(), data)?)
            }
        }
    }
}

fn single_row_forward(adapter: &Adapter, w: &Tensor, x: &Tensor) -> Result<Tensor, ModelError> {
    let (d_out, d_in) = w.as_matrix_dims("adapter forward")?;
    if x.numel() != d_in {
        return Err(ModelError::Tensor(crate::numerics::TensorError::ShapeMismatch {
            op: "adapter forward",
            left: w.shape().to_vec(),
            right: x.shape().to_vec(),
        }));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(&x.reshape(vec![1, d_in])?);
    let wv = tape.constant(w);
    let (a, b) = adapter.factors();
    let (av, bv) = (tape.constant(a), tape.constant(b));
    let y = adapter.forward_on_tape(&mut tape, xv, wv, av, bv)?;
    Ok(tape.tensor(y).reshape(vec![d_out])?)
}

/// `Wx + (α/R)·B(Ax)`, computed without forming `BA`.
pub fn lora_forward(w: &Tensor, adapter: &LoraAdapter, x: &Tensor) -> Result<Tensor, ModelError> {
    single_row_forward(&Adapter::Lora(adapter.clone()), w, x)
}

/// `(I + (α/R)·BA)·W·x`, computed without forming `BA`.
pub fn lorma_forward(w: &Tensor, adapter: &LormaAdapter, x: &Tensor) -> Result<Tensor, ModelError> {
    single_row_forward(&Adapter::Lorma(adapter.clone()), w, x)
}

/// A frozen projection with an optional adapter slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptedLinear {
    pub weight: FrozenWeight,
    pub adapter: Option<Adapter>,
    /// Present once the adapter has been folded into a dense weight.
    #[serde(default)]
    pub merged: Option<Tensor>,
}

impl AdaptedLinear {
    pub fn frozen(weight: Tensor) -> Self {
        Self { weight: FrozenWeight::Dense(weight), adapter: None, merged: None }
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn attach(&mut self, kind: AdapterKind, rank: usize, alpha: f64, rng: &mut Rng) -> Result<(), ModelError> {
        if self.adapter.is_some() {
            return Err(ModelError::AdaptersAlreadyAttached);
        }
        self.adapter = Some(Adapter::new(kind, self.out_features(), self.in_features(), rank, alpha, rng)?);
        Ok(())
    }

    /// Whether the adapter still trains, i.e. is attached and not merged.
    pub fn is_trainable(&self) -> bool {
        self.adapter.is_some() && self.merged.is_none()
    }

    pub fn effective_weight(&self) -> Result<Cow<'_, Tensor>, ModelError> {
        match &self.merged {
            Some(m) => Ok(Cow::Borrowed(m)),
            None => self.weight.materialize(),
        }
    }

    /// Folds the adapter into a dense weight. Errors on a second call.
    pub fn merge(&mut self) -> Result<&Tensor, ModelError> {
        if self.merged.is_some() {
            return Err(ModelError::AlreadyMerged);
        }
        let adapter = self.adapter.as_ref().ok_or(ModelError::NoAdapter)?;
        let merged = adapter.merge(&*self.weight.materialize()?)?;
        Ok(self.merged.insert(merged))
    }

    pub fn forward_on_tape(&self, tape: &mut Tape, x: Var, factors: Option<(Var, Var)>) -> Result<Var, ModelError> {
        let w = tape.constant(&*self.effective_weight()?);
        match (&self.adapter, factors, self.merged.is_some()) {
            (Some(adapter), Some((a, b)), false) => adapter.forward_on_tape(tape, x, w, a, b),
            (Some(_), None, false) => Err(ModelError::MissingAdapterVars),
            _ => Ok(tape.linear(x, w)?),
        }
    }
}
