#![allow(dead_code)]

use occlm::corpus::{self, demo, CleaningConfig, SplitSpec, TokenDataset};
use occlm::model::ModelConfig;
use occlm::tokenizer::{train_bpe, SpecialTokens, Vocabulary};

/// Bundled corpus, cleaned, split 80/10/10, 512-token BPE, packed at 64.
pub struct DeskData {
    pub vocab: Vocabulary,
    pub splits: corpus::Splits,
    pub train: TokenDataset,
    pub valid: TokenDataset,
}

pub fn desk_data() -> DeskData {
    let lines = corpus::clean(demo::desk_corpus(), &CleaningConfig::default());
    let splits = corpus::split(&lines, &SplitSpec::default()).unwrap();
    let vocab = train_bpe(splits.train.iter(), 512, SpecialTokens::default()).unwrap();
    let train = corpus::pack(&splits.train, &vocab, 64).unwrap();
    let valid = corpus::pack(&splits.valid, &vocab, 64).unwrap();
    DeskData {
        vocab,
        splits,
        train,
        valid,
    }
}

pub fn tiny_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        block_size: 8,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        dropout: 0.0,
        ffn_mult: 2,
        tie_embeddings: true,
        activation: Default::default(),
    }
}

/// Small vocabulary and packed data for fast training tests.
pub fn small_data(sentences: usize, block: usize) -> (Vocabulary, TokenDataset, TokenDataset) {
    let lines = corpus::clean(demo::general_corpus(sentences, 3), &CleaningConfig::default());
    let splits = corpus::split(&lines, &SplitSpec::default()).unwrap();
    let vocab = train_bpe(splits.train.iter(), 300, SpecialTokens::default()).unwrap();
    let train = corpus::pack(&splits.train, &vocab, block).unwrap();
    let valid = corpus::pack(&splits.valid, &vocab, block).unwrap();
    (vocab, train, valid)
}

/// Relative error of two gradient vectors in the 2-norm.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Corpus BLEU written independently of the library: n-grams keyed as
/// strings, geometric mean in product form. Orders with no candidate
/// n-grams are left out; an empty candidate side scores 0.
pub fn reference_bleu(cands: &[Vec<u32>], refs: &[Vec<u32>], max_n: usize) -> f64 {
    use std::collections::BTreeMap;
    let key = |s: &[u32]| s.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    let c_len: usize = cands.iter().map(Vec::len).sum();
    let r_len: usize = refs.iter().map(Vec::len).sum();
    if c_len == 0 {
        return 0.0;
    }
    let mut product = 1.0f64;
    let mut orders = 0usize;
    for n in 1..=max_n {
        let (mut hit, mut all) = (0usize, 0usize);
        for (c, r) in cands.iter().zip(refs) {
            let mut rc: BTreeMap<String, usize> = BTreeMap::new();
            if r.len() >= n {
                for i in 0..=r.len() - n {
                    *rc.entry(key(&r[i..i + n])).or_insert(0) += 1;
                }
            }
            let mut cc: BTreeMap<String, usize> = BTreeMap::new();
            if c.len() >= n {
                for i in 0..=c.len() - n {
                    *cc.entry(key(&c[i..i + n])).or_insert(0) += 1;
                }
            }
            for (g, k) in &cc {
                all += k;
                hit += (*k).min(*rc.get(g).unwrap_or(&0));
            }
        }
        if all == 0 {
            continue;
        }
        orders += 1;
        product *= hit as f64 / all as f64;
    }
    if orders == 0 || product == 0.0 {
        return 0.0;
    }
    let bp = if c_len >= r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    bp * product.powf(1.0 / orders as f64)
}
