use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tokenizer::{SpecialIds, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    Greedy,
    Sample,
    TopK,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Strategy::Greedy),
            "sample" => Ok(Strategy::Sample),
            "topk" | "top-k" | "top_k" => Ok(Strategy::TopK),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?} (expected greedy, sample or topk)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
    pub strategy: Strategy,
    /// Softmax temperature; only read when sampling.
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub stop_on_eot: bool,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 32,
            strategy: Strategy::Greedy,
            temperature: 1.0,
            top_k: None,
            stop_on_eot: true,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strategy != Strategy::Greedy && !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.top_k == Some(0) {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if self.strategy == Strategy::TopK && self.top_k.is_none() {
            return Err(Error::Config("top-k decoding needs top_k".into()));
        }
        Ok(())
    }
}

/// Autoregressive decoding from `prompt`; returns only the new ids. The
/// context slides to the last `block_size` ids once it fills. Padding and
/// occlusion ids are never emitted.
pub fn generate(
    model: &Model,
    specials: &SpecialIds,
    prompt: &[TokenId],
    gen: &GenerationConfig,
) -> Result<Vec<TokenId>> {
    gen.validate()?;
    let block = model.config.block_size;
    if prompt.is_empty() {
        return Err(Error::Length("prompt must not be empty".into()));
    }
    if prompt.len() >= block {
        return Err(Error::Length(format!(
            "prompt of {} ids must be shorter than the block size {block}",
            prompt.len()
        )));
    }
    let v = model.config.vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(gen.seed);
    let mut context = prompt.to_vec();
    let mut out = Vec::with_capacity(gen.max_new_tokens);
    for _ in 0..gen.max_new_tokens {
        let start = context.len().saturating_sub(block);
        let window = &context[start..];
        let logits = model.logits(window, 1, window.len())?;
        let mut row: Vec<f64> = logits.data()[(window.len() - 1) * v..].iter().map(|&x| x as f64).collect();
        for banned in [specials.pad, specials.occ] {
            if (banned as usize) < v {
                row[banned as usize] = f64::NEG_INFINITY;
            }
        }
        let next = pick(&row, gen, &mut rng) as TokenId;
        out.push(next);
        if gen.stop_on_eot && next == specials.eot {
            break;
        }
        context.push(next);
    }
    Ok(out)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

fn pick(row: &[f64], gen: &GenerationConfig, rng: &mut ChaCha8Rng) -> usize {
    let candidates: Vec<usize> = match (gen.strategy, gen.top_k) {
        (Strategy::Greedy, _) => return argmax(row),
        (_, Some(k)) => {
            let mut idx: Vec<usize> = (0..row.len()).collect();
            // stable: ties keep the lower id first
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
            idx.truncate(k);
            idx
        }
        (_, None) => (0..row.len()).collect(),
    };
    let max = candidates.iter().map(|&i| row[i]).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = candidates
        .iter()
        .map(|&i| ((row[i] - max) / gen.temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return argmax(row);
    }
    let mut u = rng.gen::<f64>() * total;
    for (&i, &w) in candidates.iter().zip(&weights) {
        if u < w {
            return i;
        }
        u -= w;
    }
    // rounding left u at the very top; take the last live candidate
    candidates
        .iter()
        .zip(&weights)
        .rev()
        .find(|(_, &w)| w > 0.0)
        .map(|(&i, _)| i)
        .unwrap_or_else(|| argmax(row))
}
