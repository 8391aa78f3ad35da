//! Symmetric blockwise int4 quantization of frozen weights.

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::numerics::Tensor;

pub const QUANT_BLOCK: usize = 64;
pub const QUANT_LEVELS: i8 = 7;

/// Int4 codes in `[-7, 7]` with one absmax scale per block of the flattened
/// weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedWeights {
    pub shape: Vec<usize>,
    pub block_size: usize,
    pub codes: Vec<i8>,
    pub scales: Vec<f64>,
}

/// `code = round(v / absmax · 7)` with ties away from zero; an all-zero block
/// keeps scale 0 and zero codes.
pub fn quantize_4bit(weights: &Tensor, block_size: usize) -> QuantizedWeights {
    let block_size = block_size.max(1);
    let data = weights.data();
    let mut codes = Vec::with_capacity(data.len());
    let mut scales = Vec::with_capacity(data.len().div_ceil(block_size));
    for block in data.chunks(block_size) {
        let absmax = block.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        scales.push(absmax);
        if absmax == 0.0 {
            codes.extend(std::iter::repeat_n(0i8, block.len()));
            continue;
        }
        let levels = f64::from(QUANT_LEVELS);
        codes.extend(block.iter().map(|v| {
            // f64::round rounds half away from zero.
            let c = (v / absmax * levels).round();
            c.clamp(-levels, levels) as i8
        }));
    }
    QuantizedWeights { shape: weights.shape().to_vec(), block_size, codes, scales }
}

pub fn dequantize(q: &QuantizedWeights) -> Result<Tensor, ModelError> {
    let numel: usize = q.shape.iter().product();
    if q.codes.len() != numel || q.block_size == 0 || q.scales.len() != numel.div_ceil(q.block_size) {
        return Err(ModelError::CorruptQuantization(format!(
            "{} codes / {} scales for shape {:?}, block {}",
            q.codes.len(),
            q.scales.len(),
            q.shape,
            q.block_size
        )));
    }
    if let Some(&bad) = q.codes.iter().find(|c| !(-QUANT_LEVELS..=QUANT_LEVELS).contains(*c)) {
        return Err(ModelError::CorruptQuantization(format!("code {bad} outside [-7, 7]")));
    }
    if let Some(bad) = q.scales.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(ModelError::CorruptQuantization(format!("invalid scale {bad}")));
    }
    let levels = f64::from(QUANT_LEVELS);
    let data = q
        .codes
        .chunks(q.block_size)
        .zip(&q.scales)
        .flat_map(|(codes, &absmax)| codes.iter().map(move |&c| f64::from(c) * absmax / levels))
        .collect();
    Ok(Tensor::new(q.shape.clone(), data)?)
}

impl QuantizedWeights {
    /// Largest per-element reconstruction error allowed for block `i`.
    pub fn error_bound(&self, block: usize) -> f64 {
        self.scales[block] / f64::from(QUANT_LEVELS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, seeded};
    use proptest::prelude::*;

    /// Straight-line scalar reference, independent of the block loop above.
    fn reference_code(v: f64, absmax: f64) -> i8 {
        if absmax == 0.0 {
            return 0;
        }
        let x = v / absmax * 7.0;
        let mag = x.abs();
        let floor = mag.floor();
        let r = if mag - floor >= 0.5 { floor + 1.0 } else { floor };
        (r.min(7.0) * x.signum()) as i8
    }

    #[test]
    fn hand_block() {
        let w = Tensor::vector(vec![4.0, -2.0, 1.0, 0.5]).unwrap();
        let q = quantize_4bit(&w, QUANT_BLOCK);
        assert_eq!(q.codes, vec![7, -4, 2, 1]);
        assert_eq!(q.scales, vec![4.0]);
        for (i, v) in w.data().iter().enumerate() {
            assert_eq!(q.codes[i], reference_code(*v, 4.0));
        }
    }

    #[test]
    fn zero_block() {
        let q = quantize_4bit(&Tensor::zeros(vec![70]).unwrap(), QUANT_BLOCK);
        assert!(q.codes.iter().all(|&c| c == 0));
        assert_eq!(q.scales, vec![0.0, 0.0]);
        assert!(dequantize(&q).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_code_round_trip() {
        let q = QuantizedWeights { shape: vec![1], block_size: 64, codes: vec![7], scales: vec![4.0] };
        assert_eq!(dequantize(&q).unwrap().data(), &[4.0]);
    }

    #[test]
    fn corrupt_codes_rejected() {
        let q = QuantizedWeights { shape: vec![2], block_size: 64, codes: vec![8, 0], scales: vec![1.0] };
        assert!(matches!(dequantize(&q), Err(ModelError::CorruptQuantization(_))));
        let q = QuantizedWeights { shape: vec![3], block_size: 64, codes: vec![1, 0], scales: vec![1.0] };
        assert!(dequantize(&q).is_err());
    }

    #[test]
    fn random_normal_round_trip_respects_block_bound() {
        let mut rng = seeded(42);
        let w = Tensor::matrix(24, 40, normal_vec(&mut rng, 960, 0.02)).unwrap();
        let q = quantize_4bit(&w, QUANT_BLOCK);
        let back = dequantize(&q).unwrap();
        assert_eq!(back.shape(), w.shape());
        for (b, (orig, rec)) in w.data().chunks(64).zip(back.data().chunks(64)).enumerate() {
            let bound = q.error_bound(b);
            for (o, r) in orig.iter().zip(rec) {
                assert!((o - r).abs() <= bound);
            }
        }
    }

    proptest! {
        #[test]
        fn codes_match_reference(values in prop::collection::vec(-10.0f64..10.0, 1..200)) {
            let w = Tensor::vector(values.clone()).unwrap();
            let q = quantize_4bit(&w, QUANT_BLOCK);
            for (b, block) in values.chunks(QUANT_BLOCK).enumerate() {
                let absmax = block.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                prop_assert_eq!(q.scales[b], absmax);
                for (i, v) in block.iter().enumerate() {
                    prop_assert_eq!(q.codes[b * QUANT_BLOCK + i], reference_code(*v, absmax));
                }
            }
        }
    }
}
