//! Byte-level BPE tokenizer.
//!
//! Ids `0..256` are raw bytes, the three special tokens follow, and every
//! learned merge appends one id after that in acquisition order. Because the
//! base alphabet is all 256 bytes, any UTF-8 input encodes without unknown
//! tokens. Text is lowercased before encoding.

mod file;
mod pretokenize;
mod train;

pub use train::train_bpe;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Number of single-byte base tokens.
pub const BYTE_ALPHABET: usize = 256;

/// Default vocabulary size of the full-scale presets.
pub const DEFAULT_VOCAB_SIZE: usize = 50_225;

pub type TokenId = u32;

/// Unicode-aware lowercasing. Nothing else is changed.
pub fn normalize(text: &str) -> String {
    text.to_lowercase()
}

/// [`normalize`] for raw bytes, rejecting invalid UTF-8.
pub fn normalize_bytes(bytes: &[u8]) -> Result<String> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| Error::Encoding(format!("invalid UTF-8 at byte {}", e.valid_up_to())))?;
    Ok(normalize(text))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpecialKind {
    Pad,
    Occ,
    Eot,
}

impl SpecialKind {
    pub const ALL: [SpecialKind; 3] = [SpecialKind::Pad, SpecialKind::Occ, SpecialKind::Eot];

    pub fn label(self) -> &'static str {
        match self {
            SpecialKind::Pad => "pad",
            SpecialKind::Occ => "occ",
            SpecialKind::Eot => "eot",
        }
    }
}

/// Surface strings of the special tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub pad: String,
    pub occ: String,
    pub eot: String,
}

impl Default for SpecialTokens {
    fn default() -> Self {
        Self {
            pad: "<|pad|>".into(),
            occ: "<|occ|>".into(),
            eot: "<|endoftext|>".into(),
        }
    }
}

impl SpecialTokens {
    pub fn get(&self, kind: SpecialKind) -> &str {
        match kind {
            SpecialKind::Pad => &self.pad,
            SpecialKind::Occ => &self.occ,
            SpecialKind::Eot => &self.eot,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        for kind in SpecialKind::ALL {
            let name = self.get(kind);
            if name.is_empty() || name.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!(
                    "special token {name:?} must be non-empty and free of whitespace"
                )));
            }
        }
        if self.pad == self.occ || self.pad == self.eot || self.occ == self.eot {
            return Err(Error::Config("special tokens must be distinct".into()));
        }
        Ok(())
    }
}

/// Ids of the special tokens inside a [`Vocabulary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub pad: TokenId,
    pub occ: TokenId,
    pub eot: TokenId,
}

impl SpecialIds {
    pub fn contains(&self, id: TokenId) -> bool {
        id == self.pad || id == self.occ || id == self.eot
    }

    pub fn kind_of(&self, id: TokenId) -> Option<SpecialKind> {
        SpecialKind::ALL.into_iter().find(|&k| self.get(k) == id)
    }

    pub fn get(&self, kind: SpecialKind) -> TokenId {
        match kind {
            SpecialKind::Pad => self.pad,
            SpecialKind::Occ => self.occ,
            SpecialKind::Eot => self.eot,
        }
    }
}

/// Token ids plus the byte span each token covers in the normalized text.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EncodedText {
    pub ids: Vec<TokenId>,
    pub offsets: Vec<(usize, usize)>,
}

/// A trained BPE vocabulary. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    // id -> raw bytes; special ids map to their surface string's bytes
    tokens: Vec<Vec<u8>>,
    byte_to_id: HashMap<Vec<u8>, TokenId>,
    merges: Vec<(TokenId, TokenId)>,
    merge_rank: HashMap<(TokenId, TokenId), u32>,
    special_names: SpecialTokens,
    specials: SpecialIds,
    target_size: usize,
    run_id: Option<String>,
}

impl Vocabulary {
    /// Builds a vocabulary from an ordered merge list. Each merge must only
    /// reference ids that already exist.
    pub(crate) fn from_merges(
        merges: Vec<(TokenId, TokenId)>,
        special_names: SpecialTokens,
        target_size: usize,
        run_id: Option<String>,
    ) -> Result<Self> {
        special_names.validate()?;
        let mut tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        for kind in SpecialKind::ALL {
            tokens.push(special_names.get(kind).as_bytes().to_vec());
        }
        let specials = SpecialIds {
            pad: BYTE_ALPHABET as TokenId,
            occ: BYTE_ALPHABET as TokenId + 1,
            eot: BYTE_ALPHABET as TokenId + 2,
        };
        let mut byte_to_id: HashMap<Vec<u8>, TokenId> = tokens[..BYTE_ALPHABET]
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        let mut merge_rank = HashMap::with_capacity(merges.len());
        for (rank, &(l, r)) in merges.iter().enumerate() {
            let known = tokens.len() as TokenId;
            if l >= known || r >= known || specials.contains(l) || specials.contains(r) {
                return Err(Error::format(
                    "vocabulary",
                    format!("merge {rank} references an unknown or special id ({l}, {r})"),
                ));
            }
            let mut joined = tokens[l as usize].clone();
            joined.extend_from_slice(&tokens[r as usize]);
            if byte_to_id.contains_key(&joined) || merge_rank.insert((l, r), rank as u32).is_some() {
                return Err(Error::format(
                    "vocabulary",
                    format!("merge {rank} duplicates an existing token"),
                ));
            }
            byte_to_id.insert(joined.clone(), tokens.len() as TokenId);
            tokens.push(joined);
        }
        if tokens.len() > target_size {
            return Err(Error::format(
                "vocabulary",
                format!("{} tokens exceed the target size {target_size}", tokens.len()),
            ));
        }
        Ok(Self {
            tokens,
            byte_to_id,
            merges,
            merge_rank,
            special_names,
            specials,
            target_size,
            run_id,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn target_size(&self) -> usize {
        self.target_size
    }

    pub fn specials(&self) -> SpecialIds {
        self.specials
    }

    pub fn special_names(&self) -> &SpecialTokens {
        &self.special_names
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    pub fn run_id(&self) -> Option<&str> {
        self.run_id.as_deref()
    }

    /// Raw bytes of a non-special token.
    pub fn token_bytes(&self, id: TokenId) -> Option<&[u8]> {
        if self.specials.contains(id) {
            return None;
        }
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    /// Printable form of a token, as written in the vocab file.
    pub fn token_str(&self, id: TokenId) -> Option<String> {
        if let Some(kind) = self.specials.kind_of(id) {
            return Some(self.special_names.get(kind).to_string());
        }
        self.tokens
            .get(id as usize)
            .map(|b| pretokenize::bytes_to_display(b))
    }

    /// Inverse of [`Vocabulary::token_str`] for ordinary tokens.
    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        pretokenize::display_to_bytes(token).and_then(|b| self.byte_to_id.get(&b).copied())
    }

    /// Normalizes then segments `text`, applying merges in rank order.
    pub fn encode(&self, text: &str) -> EncodedText {
        let norm = normalize(text);
        let mut out = EncodedText::default();
        for (start, piece) in pretokenize::pieces(&norm) {
            let mut offset = start;
            for id in self.encode_piece(piece.as_bytes()) {
                let len = self.tokens[id as usize].len();
                out.ids.push(id);
                out.offsets.push((offset, offset + len));
                offset += len;
            }
        }
        out
    }

    /// Token ids only.
    pub fn encode_ids(&self, text: &str) -> Vec<TokenId> {
        self.encode(text).ids
    }

    fn encode_piece(&self, bytes: &[u8]) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = bytes.iter().map(|&b| b as TokenId).collect();
        let base = (BYTE_ALPHABET + SpecialKind::ALL.len()) as TokenId;
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.merge_rank.get(&(w[0], w[1])).map(|&r| (r, (w[0], w[1]))))
                .min();
            let Some((rank, pair)) = best else {
                return ids;
            };
            let merged = base + rank;
            let mut next = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(ids[i]);
                    i += 1;
                }
            }
            ids = next;
        }
    }

    /// Decodes ids, rendering specials by their surface strings.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        self.decode_with(ids, |kind| self.special_names.get(kind).to_string())
    }

    /// Decodes ids, rendering each special token through `sentinel`.
    /// Byte sequences that are not valid UTF-8 decode lossily.
    pub fn decode_with(
        &self,
        ids: &[TokenId],
        sentinel: impl Fn(SpecialKind) -> String,
    ) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            if id as usize >= self.tokens.len() {
                return Err(Error::Index(format!(
                    "token id {id} is outside a vocabulary of {}",
                    self.tokens.len()
                )));
            }
            match self.specials.kind_of(id) {
                Some(kind) => bytes.extend_from_slice(sentinel(kind).as_bytes()),
                None => bytes.extend_from_slice(&self.tokens[id as usize]),
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// Hex SHA-256 of the serialized vocab file.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_file_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
