// Vocab file: a UTF-8 text file with a short header and three sections.
//
//   occlm-vocab 1
//   target_size 512
//   run_id <id or ->
//   [specials]
//   pad 256 <|pad|>
//   ...
//   [tokens]
//   <id> <token>
//   [merges]
//   <left> <right>
//
// Tokens use a printable one-character-per-byte alphabet, so no token
// contains whitespace and every line splits on single spaces.

use std::fmt::Write as _;
use std::path::Path;

use super::pretokenize::{bytes_to_display, display_to_bytes};
use super::{SpecialKind, SpecialTokens, TokenId, Vocabulary};
use crate::error::{Error, Result};

const MAGIC: &str = "occlm-vocab 1";

impl Vocabulary {
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{MAGIC}").unwrap();
        writeln!(out, "target_size {}", self.target_size).unwrap();
        writeln!(out, "run_id {}", self.run_id.as_deref().unwrap_or("-")).unwrap();
        out.push_str("[specials]\n");
        for kind in SpecialKind::ALL {
            writeln!(
                out,
                "{} {} {}",
                kind.label(),
                self.specials.get(kind),
                self.special_names.get(kind)
            )
            .unwrap();
        }
        out.push_str("[tokens]\n");
        for id in 0..self.tokens.len() as TokenId {
            writeln!(out, "{id} {}", self.token_str(id).expect("id in range")).unwrap();
        }
        out.push_str("[merges]\n");
        for &(l, r) in &self.merges {
            writeln!(
                out,
                "{} {}",
                bytes_to_display(&self.tokens[l as usize]),
                bytes_to_display(&self.tokens[r as usize])
            )
            .unwrap();
        }
        out
    }

    pub fn from_file_str(text: &str) -> Result<Self> {
        let bad = |detail: String| Error::format("vocab file", detail);
        let mut lines = text.lines().enumerate();
        let mut next = |expect: &str| {
            lines
                .next()
                .ok_or_else(|| bad(format!("unexpected end of file, expected {expect}")))
        };
        let (_, magic) = next("header")?;
        if magic != MAGIC {
            return Err(bad(format!("unrecognized header {magic:?}")));
        }
        let (n, line) = next("target_size")?;
        let target_size = line
            .strip_prefix("target_size ")
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| bad(format!("line {}: expected `target_size N`", n + 1)))?;
        let (n, line) = next("run_id")?;
        let run_id = match line.strip_prefix("run_id ") {
            Some("-") => None,
            Some(id) if !id.is_empty() => Some(id.to_string()),
            _ => return Err(bad(format!("line {}: expected `run_id ID`", n + 1))),
        };
        let (n, line) = next("[specials]")?;
        if line != "[specials]" {
            return Err(bad(format!("line {}: expected [specials]", n + 1)));
        }
        let mut names = SpecialTokens::default();
        for kind in SpecialKind::ALL {
            let (n, line) = next("special token")?;
            let parts: Vec<&str> = line.split(' ').collect();
            let [label, _id, name] = parts[..] else {
                return Err(bad(format!("line {}: expected `kind id name`", n + 1)));
            };
            if label != kind.label() {
                return Err(bad(format!("line {}: expected special `{}`", n + 1, kind.label())));
            }
            match kind {
                SpecialKind::Pad => names.pad = name.to_string(),
                SpecialKind::Occ => names.occ = name.to_string(),
                SpecialKind::Eot => names.eot = name.to_string(),
            }
        }
        let (n, line) = next("[tokens]")?;
        if line != "[tokens]" {
            return Err(bad(format!("line {}: expected [tokens]", n + 1)));
        }
        let mut table: Vec<(usize, String)> = Vec::new();
        let mut merge_lines = Vec::new();
        let mut in_merges = false;
        for (n, line) in lines {
            if !in_merges && line == "[merges]" {
                in_merges = true;
                continue;
            }
            let Some((a, b)) = line.split_once(' ') else {
                return Err(bad(format!("line {}: expected two fields", n + 1)));
            };
            if in_merges {
                merge_lines.push((n, a, b));
            } else {
                table.push((n, b.to_string()));
                if a.parse::<usize>().ok() != Some(table.len() - 1) {
                    return Err(bad(format!("line {}: token ids must be consecutive", n + 1)));
                }
            }
        }
        if !in_merges {
            return Err(bad("missing [merges] section".into()));
        }

        // Rebuild ids from the merge list, then check the token table agrees.
        let mut lookup: std::collections::HashMap<Vec<u8>, TokenId> =
            (0..=255u8).map(|b| (vec![b], b as TokenId)).collect();
        let mut merges = Vec::with_capacity(merge_lines.len());
        let first_id = (super::BYTE_ALPHABET + SpecialKind::ALL.len()) as TokenId;
        for (next_id, (n, l, r)) in (first_id..).zip(merge_lines) {
            let to_id = |s: &str| {
                display_to_bytes(s)
                    .and_then(|b| lookup.get(&b).copied())
                    .ok_or_else(|| bad(format!("line {}: unknown merge operand {s:?}", n + 1)))
            };
            let pair = (to_id(l)?, to_id(r)?);
            let mut joined = display_to_bytes(l).expect("checked");
            joined.extend(display_to_bytes(r).expect("checked"));
            lookup.insert(joined, next_id);
            merges.push(pair);
        }
        let vocab = Vocabulary::from_merges(merges, names, target_size, run_id)?;
        if table.len() != vocab.len() {
            return Err(bad(format!(
                "token table lists {} entries but the merges imply {}",
                table.len(),
                vocab.len()
            )));
        }
        for (id, (n, tok)) in table.iter().enumerate() {
            if vocab.token_str(id as TokenId).as_deref() != Some(tok.as_str()) {
                return Err(bad(format!("line {}: token {tok:?} disagrees with merges", n + 1)));
            }
        }
        Ok(vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_str(&text)
    }

    /// Copy with provenance attached.
    pub fn with_run_id(mut self, run_id: Option<String>) -> Self {
        self.run_id = run_id.filter(|s| !s.is_empty() && !s.contains(char::is_whitespace));
        self
    }
}
