//! Rank and linear correlation, macro-averaging, and sweep tables.

mod compare;
mod report;
mod sweep;

use thiserror::Error;

pub use compare::{ComparisonRow, ComparisonTable, LabeledReport};
pub use report::{Alpha, ConfigId, CorrelationEntry, MetricReport};
pub use sweep::{emit_sweep_table, Metric, SweepCell, SweepLayout, SweepRow, SweepTable, DEFAULT_LAYERS};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("length mismatch: {0} predictions vs {1} gold values")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 pairs, got {0}")]
    TooShort(usize),
    #[error("{0} values are constant; correlation is undefined")]
    Constant(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("macro average of an empty list")]
    EmptyAverage,
    #[error("empty report")]
    EmptyReport,
    #[error("conflicting entries: {0}")]
    Conflict(String),
    #[error("table verification failed: {0}")]
    Verification(String),
    #[error("csv line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn check_pair(pred: &[f64], gold: &[f64]) -> Result<(), MetricError> {
    if pred.len() != gold.len() {
        return Err(MetricError::LengthMismatch(pred.len(), gold.len()));
    }
    if pred.len() < 2 {
        return Err(MetricError::TooShort(pred.len()));
    }
    if pred.iter().any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite("pred"));
    }
    if gold.iter().any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite("gold"));
    }
    Ok(())
}

/// 1-based fractional ranks; tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson_unchecked(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(MetricError::Constant("pred"));
    }
    if syy == 0.0 {
        return Err(MetricError::Constant("gold"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Population-convention Pearson r.
pub fn pearson(pred: &[f64], gold: &[f64]) -> Result<f64, MetricError> {
    check_pair(pred, gold)?;
    pearson_unchecked(pred, gold)
}

/// Pearson r of average ranks.
pub fn spearman(pred: &[f64], gold: &[f64]) -> Result<f64, MetricError> {
    check_pair(pred, gold)?;
    pearson_unchecked(&average_ranks(pred), &average_ranks(gold))
}

pub fn macro_average(values: &[f64]) -> Result<f64, MetricError> {
    if values.is_empty() {
        return Err(MetricError::EmptyAverage);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[cfg(test)]
mod tests;
