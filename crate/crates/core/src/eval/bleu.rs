use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How zero n-gram match counts are treated.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    /// Any zero precision zeroes the score.
    #[default]
    None,
    /// Zero match counts are replaced by this epsilon.
    Epsilon(f64),
}

/// Corpus-level n-gram statistics.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BleuStats {
    pub matches: Vec<u64>,
    pub totals: Vec<u64>,
    pub candidate_len: u64,
    pub reference_len: u64,
}

fn ngram_counts<T: Eq + std::hash::Hash>(tokens: &[T], n: usize) -> HashMap<&[T], u64> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

impl BleuStats {
    pub fn collect<T: Eq + std::hash::Hash>(
        candidates: &[Vec<T>],
        references: &[Vec<T>],
        max_n: usize,
    ) -> Result<Self> {
        if candidates.len() != references.len() {
            return Err(Error::Contract(format!(
                "{} candidates but {} references",
                candidates.len(),
                references.len()
            )));
        }
        if candidates.is_empty() {
            return Err(Error::Contract("BLEU needs at least one pair".into()));
        }
        if max_n == 0 {
            return Err(Error::Config("max_n must be at least 1".into()));
        }
        let mut s = BleuStats {
            matches: vec![0; max_n],
            totals: vec![0; max_n],
            ..Default::default()
        };
        for (c, r) in candidates.iter().zip(references) {
            s.candidate_len += c.len() as u64;
            s.reference_len += r.len() as u64;
            for n in 1..=max_n {
                let cc = ngram_counts(c, n);
                let rc = ngram_counts(r, n);
                s.totals[n - 1] += cc.values().sum::<u64>();
                s.matches[n - 1] += cc
                    .iter()
                    .map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0)))
                    .sum::<u64>();
            }
        }
        Ok(s)
    }

    /// Combines precisions and the brevity penalty. Orders for which the
    /// candidates contain no n-grams at all (every candidate shorter than
    /// n) carry no evidence and are left out of the geometric mean.
    pub fn score(&self, smoothing: Smoothing) -> f64 {
        if self.candidate_len == 0 {
            return 0.0;
        }
        let orders: Vec<usize> = (0..self.totals.len()).filter(|&i| self.totals[i] > 0).collect();
        let w = 1.0 / orders.len() as f64;
        let mut log_sum = 0.0;
        for &i in &orders {
            let m = match (self.matches[i], smoothing) {
                (0, Smoothing::None) => return 0.0,
                (0, Smoothing::Epsilon(eps)) => eps,
                (m, _) => m as f64,
            };
            log_sum += w * (m / self.totals[i] as f64).ln();
        }
        brevity_penalty(self.candidate_len as f64, self.reference_len as f64) * log_sum.exp()
    }
}

/// `1` when `c > r`, else `exp(1 − r/c)`; 0 for an empty candidate.
pub fn brevity_penalty(c: f64, r: f64) -> f64 {
    if c > r {
        1.0
    } else if c <= 0.0 {
        0.0
    } else {
        (1.0 - r / c).exp()
    }
}

/// Corpus BLEU with uniform weights over orders `1..=max_n`, no smoothing.
pub fn bleu_corpus<T: Eq + std::hash::Hash>(
    candidates: &[Vec<T>],
    references: &[Vec<T>],
    max_n: usize,
) -> Result<f64> {
    bleu_corpus_with(candidates, references, max_n, Smoothing::None)
}

pub fn bleu_corpus_with<T: Eq + std::hash::Hash>(
    candidates: &[Vec<T>],
    references: &[Vec<T>],
    max_n: usize,
    smoothing: Smoothing,
) -> Result<f64> {
    Ok(BleuStats::collect(candidates, references, max_n)?.score(smoothing))
}
