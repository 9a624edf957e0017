//! Byte-level vocabulary: ids 0..=255 are raw bytes, followed by three
//! special tokens.

use thiserror::Error;

pub const PAD: u32 = 256;
pub const BOS: u32 = 257;
pub const EOS: u32 = 258;
pub const VOCAB_SIZE: usize = 259;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("token id {0} is outside the {VOCAB_SIZE}-entry vocabulary")]
    Vocabulary(u32),
    #[error("{0}")]
    Contract(String),
}

pub fn encode(text: &[u8], add_bos: bool, add_eos: bool) -> Vec<u32> {
    let mut ids = Vec::with_capacity(text.len() + 2);
    if add_bos {
        ids.push(BOS);
    }
    ids.extend(text.iter().map(|&b| u32::from(b)));
    if add_eos {
        ids.push(EOS);
    }
    ids
}

/// Concatenates byte ids; special tokens are dropped.
pub fn decode(ids: &[u32]) -> Result<Vec<u8>, TokenizerError> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        match id {
            0..=255 => out.push(id as u8),
            PAD | BOS | EOS => {}
            _ => return Err(TokenizerError::Vocabulary(id)),
        }
    }
    Ok(out)
}

/// Fixed-width batch of id sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedBatch {
    pub ids: Vec<Vec<u32>>,
    pub mask: Vec<Vec<u8>>,
    /// Column of the final real token of each row.
    pub last: Vec<usize>,
}

impl PaddedBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn width(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }
}

/// Right-pads every sequence to `max_len` with [`PAD`].
///
/// Longer sequences lose tokens from the front so the tail, and with it the
/// token the classifier reads, survives.
pub fn pad_batch(sequences: &[Vec<u32>], max_len: usize) -> Result<PaddedBatch, TokenizerError> {
    if max_len == 0 {
        return Err(TokenizerError::Contract("max_len must be >= 1".into()));
    }
    let mut batch = PaddedBatch {
        ids: Vec::with_capacity(sequences.len()),
        mask: Vec::with_capacity(sequences.len()),
        last: Vec::with_capacity(sequences.len()),
    };
    for (i, seq) in sequences.iter().enumerate() {
        if seq.is_empty() {
            return Err(TokenizerError::Contract(format!("sequence {i} is empty")));
        }
        let tail = &seq[seq.len().saturating_sub(max_len)..];
        let mut ids = tail.to_vec();
        let mut mask = vec![1u8; tail.len()];
        ids.resize(max_len, PAD);
        mask.resize(max_len, 0);
        batch.ids.push(ids);
        batch.mask.push(mask);
        batch.last.push(tail.len() - 1);
    }
    Ok(batch)
}
