//! Evaluation: token-mean perplexity, corpus BLEU with brevity penalty,
//! prompted generation, and a BLEU protocol that scores continuations of
//! held-out sentences.

mod bleu;
mod generate;

pub use bleu::{bleu_corpus, bleu_corpus_with, brevity_penalty, BleuStats, Smoothing};
pub use generate::{generate, GenerationConfig, Strategy};

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::TokenDataset;
use crate::error::{Error, Result};
use crate::model::{log_softmax_at, Checkpoint, Model};
use crate::tokenizer::{TokenId, Vocabulary};

/// Mean negative log-likelihood over every loss-bearing target and its
/// exponential.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perplexity {
    pub mean_loss: f64,
    pub perplexity: f64,
    pub n_tokens: usize,
    pub n_sequences: usize,
}

/// Scores every unpadded target once. NLL terms are summed in f64 in window
/// order, so the result does not depend on `batch_size`.
pub fn perplexity(model: &Model, dataset: &TokenDataset, batch_size: usize) -> Result<Perplexity> {
    let v = model.config.vocab_size;
    let mut nll = 0.0f64;
    let mut n_tokens = 0usize;
    let mut n_sequences = 0usize;
    for batch in dataset.sequential_batches(batch_size) {
        let logits = model.logits(&batch.inputs, batch.batch, batch.seq)?;
        for (i, row) in logits.data().chunks_exact(v).enumerate() {
            if batch.mask[i] {
                let t = batch.targets[i] as usize;
                if t >= v {
                    return Err(Error::Index(format!("target id {t} is outside a vocabulary of {v}")));
                }
                nll -= log_softmax_at(row, t);
                n_tokens += 1;
            }
        }
        n_sequences += batch.batch;
    }
    if n_tokens == 0 {
        return Err(Error::Data("cannot compute perplexity over an empty dataset".into()));
    }
    let mean_loss = nll / n_tokens as f64;
    Ok(Perplexity {
        mean_loss,
        perplexity: mean_loss.exp(),
        n_tokens,
        n_sequences,
    })
}

/// One prompted continuation under the BLEU protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptPair {
    pub prompt: Vec<TokenId>,
    pub reference: Vec<TokenId>,
    pub generated: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolResult {
    pub bleu: f64,
    pub pairs: Vec<TranscriptPair>,
    /// Sentences too short to split into prompt and continuation.
    pub skipped: usize,
}

impl ProtocolResult {
    /// `REF:` / `GEN:` lines per pair; both show the full sentence, prompt
    /// included.
    pub fn transcript(&self, vocab: &Vocabulary) -> Result<String> {
        let mut out = String::new();
        for p in &self.pairs {
            let full_ref: Vec<TokenId> = p.prompt.iter().chain(&p.reference).copied().collect();
            let full_gen: Vec<TokenId> = p.prompt.iter().chain(&p.generated).copied().collect();
            out.push_str(&format!("REF:\t{}\nGEN:\t{}\n", vocab.decode(&full_ref)?, vocab.decode(&full_gen)?));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BleuOptions {
    pub prompt_frac: f64,
    pub max_n: usize,
    pub smoothing: Smoothing,
    pub generation: GenerationConfig,
}

impl Default for BleuOptions {
    fn default() -> Self {
        Self {
            prompt_frac: 0.25,
            max_n: 4,
            smoothing: Smoothing::None,
            generation: GenerationConfig::default(),
        }
    }
}

/// For each sentence: prompt with the leading `ceil(prompt_frac · n)`
/// tokens, generate as many tokens as the rest of the sentence has, and
/// score all continuations together with corpus BLEU.
pub fn bleu_eval_protocol<S: AsRef<str>>(
    model: &Model,
    vocab: &Vocabulary,
    sentences: &[S],
    opts: &BleuOptions,
) -> Result<ProtocolResult> {
    if !(opts.prompt_frac > 0.0 && opts.prompt_frac < 1.0) {
        return Err(Error::Config(format!(
            "prompt_frac must lie in (0, 1), got {}",
            opts.prompt_frac
        )));
    }
    let specials = vocab.specials();
    let block = model.config.block_size;
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for s in sentences {
        let ids = vocab.encode_ids(s.as_ref());
        let k = (opts.prompt_frac * ids.len() as f64).ceil() as usize;
        if k == 0 || k >= ids.len() {
            skipped += 1;
            continue;
        }
        let (prompt, reference) = ids.split_at(k);
        // keep the prompt within the context window
        let prompt = &prompt[prompt.len().saturating_sub(block - 1)..];
        let gen = GenerationConfig {
            max_new_tokens: reference.len(),
            ..opts.generation.clone()
        };
        let mut generated = generate(model, &specials, prompt, &gen)?;
        if generated.last() == Some(&specials.eot) && gen.stop_on_eot {
            generated.pop();
        }
        pairs.push(TranscriptPair {
            prompt: prompt.to_vec(),
            reference: reference.to_vec(),
            generated,
        });
    }
    if pairs.is_empty() {
        return Err(Error::Data(format!(
            "no sentence was long enough to split ({skipped} skipped)"
        )));
    }
    let cands: Vec<Vec<TokenId>> = pairs.iter().map(|p| p.generated.clone()).collect();
    let refs: Vec<Vec<TokenId>> = pairs.iter().map(|p| p.reference.clone()).collect();
    let bleu = bleu_corpus_with(&cands, &refs, opts.max_n, opts.smoothing)?;
    Ok(ProtocolResult {
        bleu,
        pairs,
        skipped,
    })
}

/// One (model, split) evaluation with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub mean_loss: f64,
    pub perplexity: f64,
    pub bleu: Option<f64>,
    pub n_sequences: usize,
    pub n_tokens: usize,
    pub bleu_options: Option<BleuOptions>,
    pub bleu_pairs: Option<usize>,
    pub bleu_skipped: Option<usize>,
    pub run_id: Option<String>,
    pub checkpoint_sha256: String,
    pub vocab_hash: String,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone)]
pub struct EvalOptions<'a> {
    pub split: String,
    pub batch_size: usize,
    /// Sentences and settings for the BLEU protocol; skipped when `None`.
    pub bleu: Option<(&'a [String], BleuOptions)>,
}

/// Perplexity (and optionally BLEU) of a checkpoint on one split. Fails if
/// the checkpoint was trained with a different vocabulary.
pub fn evaluate(
    checkpoint: &Checkpoint,
    vocab: &Vocabulary,
    dataset: &TokenDataset,
    opts: &EvalOptions<'_>,
) -> Result<(EvalReport, Option<ProtocolResult>)> {
    let vocab_hash = vocab.hash();
    checkpoint.check_compatible(None, Some(&vocab_hash))?;
    let model = checkpoint.model()?;
    let ppl = perplexity(&model, dataset, opts.batch_size)?;
    let protocol = match &opts.bleu {
        Some((sentences, bo)) => Some((bleu_eval_protocol(&model, vocab, sentences, bo)?, bo.clone())),
        None => None,
    };
    let report = EvalReport {
        split: opts.split.clone(),
        mean_loss: ppl.mean_loss,
        perplexity: ppl.perplexity,
        bleu: protocol.as_ref().map(|(p, _)| p.bleu),
        n_sequences: ppl.n_sequences,
        n_tokens: ppl.n_tokens,
        bleu_options: protocol.as_ref().map(|(_, o)| o.clone()),
        bleu_pairs: protocol.as_ref().map(|(p, _)| p.pairs.len()),
        bleu_skipped: protocol.as_ref().map(|(p, _)| p.skipped),
        run_id: checkpoint.meta.run_id.clone(),
        checkpoint_sha256: sha256_hex(&checkpoint.to_bytes()?),
        vocab_hash,
    };
    Ok((report, protocol.map(|(p, _)| p)))
}
