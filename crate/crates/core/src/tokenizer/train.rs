use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap, HashSet};

use super::pretokenize::pieces;
use super::{normalize, SpecialKind, SpecialTokens, TokenId, Vocabulary, BYTE_ALPHABET};
use crate::error::{Error, Result};

type Pair = (TokenId, TokenId);

struct Candidate {
    count: u64,
    // (left bytes, right bytes); smaller wins ties
    key: Reverse<(Vec<u8>, Vec<u8>)>,
    pair: Pair,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| self.key.cmp(&other.key))
    }
}

/// Learns merges greedily: the most frequent adjacent pair wins, ties go to
/// the lexicographically smaller `(left bytes, right bytes)`. Stops at
/// `target_size` tokens or when no pair occurs at least twice.
pub fn train_bpe<I, S>(corpus: I, target_size: usize, specials: SpecialTokens) -> Result<Vocabulary>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    specials.validate()?;
    let base = BYTE_ALPHABET + SpecialKind::ALL.len();
    if target_size <= base {
        return Err(Error::Config(format!(
            "vocabulary target size {target_size} must exceed {BYTE_ALPHABET} bytes + {} specials",
            SpecialKind::ALL.len()
        )));
    }

    let mut counts: HashMap<String, u64> = HashMap::new();
    let mut any_text = false;
    for line in corpus {
        let norm = normalize(line.as_ref());
        any_text |= !norm.is_empty();
        for (_, piece) in pieces(&norm) {
            *counts.entry(piece.to_owned()).or_default() += 1;
        }
    }
    if !any_text {
        return Err(Error::Data("cannot train a tokenizer on an empty corpus".into()));
    }
    let mut sorted: Vec<(String, u64)> = counts.into_iter().collect();
    sorted.sort_unstable();
    let mut words: Vec<Vec<TokenId>> = sorted
        .iter()
        .map(|(w, _)| w.bytes().map(TokenId::from).collect())
        .collect();
    let freqs: Vec<u64> = sorted.iter().map(|(_, c)| *c).collect();

    let mut token_bytes: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    // placeholders keep ids aligned with the final layout
    token_bytes.extend(std::iter::repeat_n(Vec::new(), SpecialKind::ALL.len()));

    let mut pair_counts: HashMap<Pair, u64> = HashMap::new();
    let mut occurs_in: HashMap<Pair, HashSet<usize>> = HashMap::new();
    for (wi, word) in words.iter().enumerate() {
        for w in word.windows(2) {
            *pair_counts.entry((w[0], w[1])).or_default() += freqs[wi];
            occurs_in.entry((w[0], w[1])).or_default().insert(wi);
        }
    }
    let candidate = |pair: Pair, count: u64, tb: &[Vec<u8>]| Candidate {
        count,
        key: Reverse((tb[pair.0 as usize].clone(), tb[pair.1 as usize].clone())),
        pair,
    };
    let mut heap: BinaryHeap<Candidate> = pair_counts
        .iter()
        .map(|(&p, &c)| candidate(p, c, &token_bytes))
        .collect();

    let mut merges = Vec::new();
    while token_bytes.len() < target_size {
        let Some(top) = heap.pop() else { break };
        if pair_counts.get(&top.pair).copied().unwrap_or(0) != top.count {
            continue; // stale
        }
        if top.count < 2 {
            break;
        }
        let pair = top.pair;
        let new_id = token_bytes.len() as TokenId;
        let mut joined = token_bytes[pair.0 as usize].clone();
        joined.extend_from_slice(&token_bytes[pair.1 as usize]);
        token_bytes.push(joined);
        merges.push(pair);

        let mut affected: Vec<usize> = occurs_in.remove(&pair).unwrap_or_default().into_iter().collect();
        affected.sort_unstable();
        let mut touched: HashSet<Pair> = HashSet::new();
        for wi in affected {
            let word = &mut words[wi];
            if !word.windows(2).any(|w| (w[0], w[1]) == pair) {
                continue;
            }
            let f = freqs[wi];
            for w in word.windows(2) {
                let p = (w[0], w[1]);
                let c = pair_counts.get_mut(&p).expect("pair was counted");
                *c -= f;
                touched.insert(p);
            }
            let mut merged = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && (word[i], word[i + 1]) == pair {
                    merged.push(new_id);
                    i += 2;
                } else {
                    merged.push(word[i]);
                    i += 1;
                }
            }
            *word = merged;
            for w in word.windows(2) {
                let p = (w[0], w[1]);
                *pair_counts.entry(p).or_default() += f;
                occurs_in.entry(p).or_default().insert(wi);
                touched.insert(p);
            }
        }
        for p in touched {
            match pair_counts.get(&p).copied() {
                Some(0) | None => {
                    pair_counts.remove(&p);
                }
                Some(c) => heap.push(candidate(p, c, &token_bytes)),
            }
        }
    }
    Vocabulary::from_merges(merges, specials, target_size, None)
}
