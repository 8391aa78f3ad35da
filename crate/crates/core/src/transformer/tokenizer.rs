//! Byte-level tokenizer: one token per UTF-8 byte, `id = byte mod vocab`.

use super::{ModelError, PAD_ID};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoding {
    /// Exactly `max_seq_len` ids, right-padded with [`PAD_ID`].
    pub ids: Vec<usize>,
    /// `true` for real tokens, `false` for padding.
    pub mask: Vec<bool>,
}

impl Encoding {
    pub fn live_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Trims surrounding whitespace, then maps bytes to ids, truncating or
/// padding to `max_seq_len`.
pub fn tokenize(text: &str, vocab_size: usize, max_seq_len: usize) -> Result<Encoding, ModelError> {
    let text = text.trim();
    if text.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    if vocab_size == 0 || max_seq_len == 0 {
        return Err(ModelError::InvalidConfig("vocab_size and max_seq_len must be >= 1".into()));
    }
    let mut ids: Vec<usize> = text.bytes().take(max_seq_len).map(|b| b as usize % vocab_size).collect();
    let live = ids.len();
    ids.resize(max_seq_len, PAD_ID);
    let mask = (0..max_seq_len).map(|i| i < live).collect();
    Ok(Encoding { ids, mask })
}
