use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{join_pair, pool_on_tape, HeadVars, PoolingStrategy, QeError, RegressionHead, ScoreScale, TrainConfig};
use crate::data::QeRecord;
use crate::numerics::{Tape, Tensor, Var};
use crate::rng::derive;
use crate::transformer::{resolve_layer, AdapterVars, Encoding, TokenBatch, TransformerModel};

const EVAL_BATCH: usize = 32;

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Vec<f64>]) -> Result<(), QeError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(QeError::Format(format!("adam expects {} tensors, got {}", self.m.len(), params.len())));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let mut data = p.data().to_vec();
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                data[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
            p.assign(&data)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedQeModel {
    pub model: TransformerModel,
    pub head: RegressionHead,
    pub config: TrainConfig,
    /// Mean per-record MSE of each epoch, on the training scale.
    pub loss_trace: Vec<f64>,
    /// Checksum of the frozen base, taken before training.
    pub base_checksum: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub prediction: f64,
    pub gold: f64,
}

/// Raw head outputs `[batch × 1]` for every sequence in `batch`.
fn head_outputs(
    tape: &mut Tape,
    model: &TransformerModel,
    adapters: Option<&AdapterVars>,
    head: HeadVars,
    batch: &TokenBatch,
    layer_index: i64,
    pooling: PoolingStrategy,
) -> Result<Var, QeError> {
    let layer = resolve_layer(model.n_layers(), layer_index)?;
    let outs = model.forward_on_tape(tape, batch, adapters, layer + 1)?;
    let pooled = pool_on_tape(tape, outs[layer], &batch.segments, &batch.mask, pooling)?;
    RegressionHead::forward_on_tape(tape, pooled, head)
}

/// Batch MSE of the full adapter → layer select → pool → head pipeline,
/// against targets already on the training scale.
#[allow(clippy::too_many_arguments)]
pub fn pipeline_loss(
    tape: &mut Tape,
    model: &TransformerModel,
    adapters: Option<&AdapterVars>,
    head: HeadVars,
    batch: &TokenBatch,
    targets: &[f64],
    layer_index: i64,
    pooling: PoolingStrategy,
    scale: ScoreScale,
) -> Result<Var, QeError> {
    let y = head_outputs(tape, model, adapters, head, batch, layer_index, pooling)?;
    let y = match scale {
        ScoreScale::UnitInterval => tape.sigmoid(y)?,
        ScoreScale::Raw0To100 => y,
    };
    let t = tape.constant(&Tensor::matrix(targets.len(), 1, targets.to_vec())?);
    Ok(tape.mse_loss(y, t)?)
}

fn encode(model: &TransformerModel, r: &QeRecord, separator: &str) -> Result<Encoding, QeError> {
    Ok(model.tokenize(&join_pair(&r.source, &r.translation, separator)?)?)
}

/// Trains adapters and head on `records`; the base weights of `base` are
/// copied and stay frozen.
pub fn train(base: &TransformerModel, records: &[QeRecord], cfg: &TrainConfig) -> Result<TrainedQeModel, QeError> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(QeError::EmptyDataset);
    }
    resolve_layer(base.n_layers(), cfg.layer_index)?;
    let mut model = base.clone();
    if cfg.quantize_base {
        model.quantize_base();
    }
    let base_checksum = model.base_checksum();
    model.attach_adapters(&cfg.adapter, &mut derive(cfg.seed, "adapters"))?;
    let d = model.config.d_model;
    let mut head = RegressionHead::new(d, cfg.head_hidden.unwrap_or(d), &mut derive(cfg.seed, "head"))?;

    let encodings = records.iter().map(|r| encode(&model, r, &cfg.separator)).collect::<Result<Vec<_>, _>>()?;
    let targets: Vec<f64> = records.iter().map(|r| cfg.score_scale.target(r.da_score)).collect();

    let sizes: Vec<usize> = model.adapter_params().iter().chain(head.params().iter()).map(|t| t.numel()).collect();
    let mut adam = Adam::new(cfg.learning_rate, &sizes);
    let mut order_rng = derive(cfg.seed, "shuffle");
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut loss_trace = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let encs: Vec<Encoding> = chunk.iter().map(|&i| encodings[i].clone()).collect();
            let tgt: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
            let batch = TokenBatch::packed(&encs);
            let mut tape = Tape::new();
            let avars = model.register_adapters(&mut tape);
            let hvars = head.register(&mut tape);
            let loss = pipeline_loss(&mut tape, &model, Some(&avars), hvars, &batch, &tgt, cfg.layer_index, cfg.pooling, cfg.score_scale)
                .map_err(|e| match e {
                QeError::Tensor(crate::numerics::TensorError::NonFinite(_)) => QeError::NonFiniteLoss { epoch },
                e => e,
            })?;
            let value = tape.value(loss)[0];
            if !value.is_finite() {
                return Err(QeError::NonFiniteLoss { epoch });
            }
            total += value * chunk.len() as f64;

            let grads = tape.backward(loss)?;
            let vars: Vec<Var> = avars.iter().flatten().flatten().flat_map(|&(a, b)| [a, b]).chain(hvars.all()).collect();
            let grads: Vec<Vec<f64>> =
                vars.iter().zip(&sizes).map(|(&v, &n)| grads.get(v).map_or_else(|| vec![0.0; n], <[f64]>::to_vec)).collect();
            let params: Vec<&mut Tensor> = model.adapter_params_mut().into_iter().chain(head.params_mut()).collect();
            adam.step(params, &grads)?;
        }
        let mean = total / records.len() as f64;
        if !mean.is_finite() {
            return Err(QeError::NonFiniteLoss { epoch });
        }
        loss_trace.push(mean);
    }
    if model.base_checksum() != base_checksum {
        return Err(QeError::BaseMutated);
    }
    Ok(TrainedQeModel { model, head, config: cfg.clone(), loss_trace, base_checksum })
}

impl TrainedQeModel {
    pub fn layer_index(&self) -> i64 {
        self.config.layer_index
    }

    /// DA predictions in `[0, 100]` for a batch of encoded pairs.
    fn predict_encodings(&self, encs: &[Encoding]) -> Result<Vec<f64>, QeError> {
        let batch = TokenBatch::packed(encs);
        let mut tape = Tape::new();
        let hvars = self.head.constants(&mut tape);
        let y = head_outputs(&mut tape, &self.model, None, hvars, &batch, self.config.layer_index, self.config.pooling)?;
        Ok(tape.value(y).iter().map(|&v| self.config.score_scale.to_da(v)).collect())
    }

    pub fn predict_da(&self, source: &str, translation: &str) -> Result<f64, QeError> {
        let enc = self.model.tokenize(&join_pair(source, translation, &self.config.separator)?)?;
        Ok(self.predict_encodings(&[enc])?[0])
    }

    pub fn evaluate(&self, records: &[QeRecord]) -> Result<Vec<Prediction>, QeError> {
        self.evaluate_with(records, 1)
    }

    /// Predictions in input order. Batches are spread over up to `threads`
    /// scoped threads; the result does not depend on the thread count.
    pub fn evaluate_with(&self, records: &[QeRecord], threads: usize) -> Result<Vec<Prediction>, QeError> {
        if records.is_empty() {
            return Err(QeError::EmptyDataset);
        }
        let chunks: Vec<&[QeRecord]> = records.chunks(EVAL_BATCH).collect();
        let run = |chunk: &[QeRecord]| -> Result<Vec<f64>, QeError> {
            let encs = chunk.iter().map(|r| encode(&self.model, r, &self.config.separator)).collect::<Result<Vec<_>, _>>()?;
            self.predict_encodings(&encs)
        };
        let threads = threads.clamp(1, chunks.len());
        let scores: Vec<Result<Vec<f64>, QeError>> = if threads == 1 {
            chunks.iter().map(|c| run(c)).collect()
        } else {
            let mut slots: Vec<Option<Result<Vec<f64>, QeError>>> = (0..chunks.len()).map(|_| None).collect();
            std::thread::scope(|s| {
                let per = chunks.len().div_ceil(threads);
                for (slot_group, chunk_group) in slots.chunks_mut(per).zip(chunks.chunks(per)) {
                    let run = &run;
                    s.spawn(move || {
                        for (slot, c) in slot_group.iter_mut().zip(chunk_group) {
                            *slot = Some(run(c));
                        }
                    });
                }
            });
            slots.into_iter().map(|s| s.expect("every slot is filled")).collect()
        };
        let mut out = Vec::with_capacity(records.len());
        for (chunk, scores) in chunks.iter().zip(scores) {
            for (r, p) in chunk.iter().zip(scores?) {
                out.push(Prediction { id: r.id.clone(), prediction: p, gold: r.da_score });
            }
        }
        Ok(out)
    }
}

pub fn predict_da(m: &TrainedQeModel, source: &str, translation: &str) -> Result<f64, QeError> {
    m.predict_da(source, translation)
}

pub fn evaluate(m: &TrainedQeModel, records: &[QeRecord]) -> Result<Vec<Prediction>, QeError> {
    m.evaluate(records)
}
