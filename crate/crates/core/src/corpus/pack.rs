use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, Vocabulary};

/// One training window: `block_size + 1` ids. Inputs are `ids[..block]`,
/// targets `ids[1..]`; only the first `valid` targets count toward the loss.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub ids: Vec<TokenId>,
    pub valid: usize,
}

/// Packed token stream chunked into fixed-length windows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenDataset {
    pub block_size: usize,
    pub pad_id: TokenId,
    pub windows: Vec<Window>,
}

/// A `batch × seq` grid of inputs and shifted targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub batch: usize,
    pub seq: usize,
    pub inputs: Vec<TokenId>,
    pub targets: Vec<TokenId>,
    /// `true` where the target contributes to the loss.
    pub mask: Vec<bool>,
}

impl Batch {
    pub fn num_targets(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Encodes each line, appends end-of-text, concatenates, and chunks the
/// stream into windows that overlap by one id.
pub fn pack<S: AsRef<str>>(lines: &[S], vocab: &Vocabulary, block_size: usize) -> Result<TokenDataset> {
    let eot = vocab.specials().eot;
    let mut stream = Vec::new();
    for line in lines {
        stream.extend(vocab.encode_ids(line.as_ref()));
        stream.push(eot);
    }
    pack_ids(&stream, block_size, vocab.specials().pad)
}

/// Chunks an id stream directly. The final window is padded with `pad_id`
/// and its padded targets are masked.
pub fn pack_ids(stream: &[TokenId], block_size: usize, pad_id: TokenId) -> Result<TokenDataset> {
    if block_size < 2 {
        return Err(Error::Config(format!("block size must be at least 2, got {block_size}")));
    }
    let mut windows = Vec::new();
    if !stream.is_empty() {
        let targets = stream.len() - 1;
        let count = targets.div_ceil(block_size).max(1);
        for w in 0..count {
            let start = w * block_size;
            let end = (start + block_size + 1).min(stream.len());
            let mut ids = stream[start..end].to_vec();
            let valid = ids.len() - 1;
            ids.resize(block_size + 1, pad_id);
            windows.push(Window { ids, valid });
        }
    }
    Ok(TokenDataset {
        block_size,
        pad_id,
        windows,
    })
}

impl TokenDataset {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Number of loss-bearing target positions.
    pub fn num_targets(&self) -> usize {
        self.windows.iter().map(|w| w.valid).sum()
    }

    /// Groups windows (in the given order) into batches, dropping windows
    /// with no loss-bearing targets.
    pub fn batches(&self, batch_size: usize, order: &[usize]) -> Vec<Batch> {
        let t = self.block_size;
        let usable: Vec<&Window> = order
            .iter()
            .map(|&i| &self.windows[i])
            .filter(|w| w.valid > 0)
            .collect();
        usable
            .chunks(batch_size.max(1))
            .map(|chunk| {
                let mut b = Batch {
                    batch: chunk.len(),
                    seq: t,
                    inputs: Vec::with_capacity(chunk.len() * t),
                    targets: Vec::with_capacity(chunk.len() * t),
                    mask: Vec::with_capacity(chunk.len() * t),
                };
                for w in chunk {
                    b.inputs.extend_from_slice(&w.ids[..t]);
                    b.targets.extend_from_slice(&w.ids[1..]);
                    b.mask.extend((0..t).map(|i| i < w.valid));
                }
                b
            })
            .collect()
    }

    /// Batches in stored order.
    pub fn sequential_batches(&self, batch_size: usize) -> Vec<Batch> {
        let order: Vec<usize> = (0..self.windows.len()).collect();
        self.batches(batch_size, &order)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
