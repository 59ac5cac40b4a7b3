//! Corpus preparation: cleaning, sentence splitting, seeded train/valid/test
//! partitioning, partition statistics, and packing into fixed-length token
//! windows for training.

pub mod demo;
mod pack;

pub use pack::{pack, pack_ids, Batch, TokenDataset, Window};

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::Vocabulary;

/// Which cleaning rules run. Rules apply in a fixed order: slashes, special
/// characters, repeated full stops, sentence splitting, lowercasing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CleaningConfig {
    pub strip_slashes: bool,
    pub strip_special_chars: bool,
    /// Punctuation that survives special-character stripping, in addition to
    /// letters, digits and whitespace.
    pub allowed_punctuation: String,
    pub collapse_repeated_fullstops: bool,
    pub sentence_split_on_fullstop: bool,
    pub lowercase: bool,
}

impl Default for CleaningConfig {
    fn default() -> Self {
        Self {
            strip_slashes: true,
            strip_special_chars: true,
            allowed_punctuation: ".,'-".into(),
            collapse_repeated_fullstops: true,
            sentence_split_on_fullstop: true,
            lowercase: true,
        }
    }
}

impl CleaningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.strip_slashes
            || self.strip_special_chars
            || self.collapse_repeated_fullstops
            || self.sentence_split_on_fullstop
            || self.lowercase)
        {
            return Err(Error::Config("at least one cleaning rule must be enabled".into()));
        }
        Ok(())
    }
}

/// Cleans every line and flattens the resulting sentences. Lines with no
/// letters or digits left are dropped.
pub fn clean<I, S>(lines: I, cfg: &CleaningConfig) -> Vec<String>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    lines
        .into_iter()
        .flat_map(|l| clean_line(l.as_ref(), cfg))
        .collect()
}

pub fn clean_line(line: &str, cfg: &CleaningConfig) -> Vec<String> {
    let mut text: String = if cfg.strip_slashes {
        line.chars()
            .map(|c| if c == '/' || c == '\\' { ' ' } else { c })
            .collect()
    } else {
        line.to_string()
    };
    if cfg.strip_special_chars {
        text = text
            .chars()
            .map(|c| {
                if c.is_alphanumeric() || c.is_whitespace() || cfg.allowed_punctuation.contains(c) {
                    c
                } else {
                    ' '
                }
            })
            .collect();
    }
    if cfg.collapse_repeated_fullstops {
        let mut collapsed = String::with_capacity(text.len());
        let mut prev_stop = false;
        for c in text.chars() {
            if c == '.' && prev_stop {
                continue;
            }
            prev_stop = c == '.';
            collapsed.push(c);
        }
        text = collapsed;
    }
    let sentences: Vec<&str> = if cfg.sentence_split_on_fullstop {
        text.split_inclusive('.').collect()
    } else {
        vec![text.as_str()]
    };
    sentences
        .into_iter()
        .map(|s| {
            let s = s.split_whitespace().collect::<Vec<_>>().join(" ");
            if cfg.lowercase {
                s.to_lowercase()
            } else {
                s
            }
        })
        .filter(|s| s.chars().any(char::is_alphanumeric))
        .collect()
}

/// Reads a UTF-8 file, one entry per line. Invalid UTF-8 is reported with
/// its 1-based line number.
pub fn read_lines(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Ok(out);
        }
        while matches!(buf.last(), Some(b'\n' | b'\r')) {
            buf.pop();
        }
        let line = String::from_utf8(std::mem::take(&mut buf)).map_err(|_| {
            Error::Encoding(format!("{}: invalid UTF-8 on line {}", path.display(), out.len() + 1))
        })?;
        out.push(line);
    }
}

/// Writes one line per entry, creating parent directories as needed.
pub fn write_lines(path: impl AsRef<Path>, lines: &[String]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = String::with_capacity(lines.iter().map(|l| l.len() + 1).sum());
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Partition fractions and shuffle seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub valid_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_frac: 0.8,
            valid_frac: 0.1,
            test_frac: 0.1,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fracs = [self.train_frac, self.valid_frac, self.test_frac];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config(format!("split fractions must lie in [0, 1], got {fracs:?}")));
        }
        let total: f64 = fracs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions must sum to 1, got {total}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded shuffle followed by a contiguous train/valid/test partition.
pub fn split(lines: &[String], spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    if lines.len() < 3 {
        return Err(Error::Data(format!(
            "need at least 3 lines to split, got {}",
            lines.len()
        )));
    }
    let shuffled = shuffled(lines, spec.seed);
    let n = lines.len();
    let n_train = ((spec.train_frac * n as f64).round() as usize).min(n);
    let n_valid = ((spec.valid_frac * n as f64).round() as usize).min(n - n_train);
    let mut rest = shuffled.into_iter();
    Ok(Splits {
        train: rest.by_ref().take(n_train).collect(),
        valid: rest.by_ref().take(n_valid).collect(),
        test: rest.collect(),
    })
}

/// Splits `lines` into train/valid only and takes the test partition from a
/// separate shard (for a test set disjoint in source or time).
pub fn split_with_test_shard(
    lines: &[String],
    test_shard: &[String],
    spec: &SplitSpec,
) -> Result<Splits> {
    spec.validate()?;
    if lines.len() < 2 {
        return Err(Error::Data(format!(
            "need at least 2 lines for train/valid, got {}",
            lines.len()
        )));
    }
    let kept = spec.train_frac + spec.valid_frac;
    if kept <= 0.0 {
        return Err(Error::Config("train and valid fractions are both zero".into()));
    }
    let shuffled = shuffled(lines, spec.seed);
    let n_train = ((spec.train_frac / kept * lines.len() as f64).round() as usize).min(lines.len());
    let mut rest = shuffled.into_iter();
    Ok(Splits {
        train: rest.by_ref().take(n_train).collect(),
        valid: rest.collect(),
        test: test_shard.to_vec(),
    })
}

fn shuffled(lines: &[String], seed: u64) -> Vec<String> {
    let mut out = lines.to_vec();
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}

/// How sentences are counted into tokens for [`stats`].
#[derive(Debug, Clone, Copy)]
pub enum TokenCounter<'a> {
    Whitespace,
    Bpe(&'a Vocabulary),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitStats {
    pub name: String,
    pub sentences: usize,
    pub tokens: usize,
    pub unique_tokens: usize,
}

/// Per-partition counts plus totals. Sentence and token totals are sums;
/// the unique-token total counts the union.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CorpusStats {
    pub splits: Vec<SplitStats>,
    pub total: SplitStats,
}

pub fn stats(splits: &[(&str, &[String])], counter: TokenCounter<'_>) -> CorpusStats {
    let mut all: HashSet<String> = HashSet::new();
    let mut out = CorpusStats {
        splits: Vec::with_capacity(splits.len()),
        total: SplitStats {
            name: "total".into(),
            ..Default::default()
        },
    };
    for (name, lines) in splits {
        let mut seen: HashSet<String> = HashSet::new();
        let mut tokens = 0;
        for line in lines.iter() {
            match counter {
                TokenCounter::Whitespace => {
                    for w in line.split_whitespace() {
                        tokens += 1;
                        seen.insert(w.to_string());
                    }
                }
                TokenCounter::Bpe(vocab) => {
                    for id in vocab.encode_ids(line) {
                        tokens += 1;
                        seen.insert(id.to_string());
                    }
                }
            }
        }
        out.total.sentences += lines.len();
        out.total.tokens += tokens;
        out.splits.push(SplitStats {
            name: name.to_string(),
            sentences: lines.len(),
            tokens,
            unique_tokens: seen.len(),
        });
        all.extend(seen);
    }
    out.total.unique_tokens = all.len();
    out
}

impl CorpusStats {
    /// Aligned text table: one row per measure, one column per partition.
    pub fn render_table(&self) -> String {
        let cols: Vec<&SplitStats> = self.splits.iter().chain([&self.total]).collect();
        type Measure = fn(&SplitStats) -> usize;
        let rows: [(&str, Measure); 3] = [
            ("#Sentences", |s| s.sentences),
            ("#Tokens", |s| s.tokens),
            ("#Unique tokens", |s| s.unique_tokens),
        ];
        let width = cols
            .iter()
            .map(|c| c.name.len())
            .chain(cols.iter().map(|c| c.tokens.to_string().len()))
            .max()
            .unwrap_or(0)
            .max(8);
        let mut out = format!("{:<16}", "");
        for c in &cols {
            write!(out, " {:>width$}", c.name).unwrap();
        }
        out.push('\n');
        for (label, get) in rows {
            write!(out, "{label:<16}").unwrap();
            for c in &cols {
                write!(out, " {:>width$}", get(c)).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(lines: &[&str]) -> Vec<String> {
        lines.iter().map(|l| l.to_string()).collect()
    }

    #[test]
    fn collapse_then_split() {
        let cfg = CleaningConfig::default();
        assert_eq!(clean(["a...b"], &cfg), s(&["a.", "b"]));
    }

    #[test]
    fn slashes_become_spaces() {
        let cfg = CleaningConfig::default();
        assert_eq!(clean(["x / y \\ z"], &cfg), s(&["x y z"]));
    }

    #[test]
    fn special_chars_lowercase_and_empty_lines() {
        let cfg = CleaningConfig::default();
        assert_eq!(
            clean(["Ke a TSEBA!! (gore) o-tla", "", "  ***  ", "ga-e šoma, 'a'."], &cfg),
            s(&["ke a tseba gore o-tla", "ga-e šoma, 'a'."])
        );
    }

    #[test]
    fn question_marks_do_not_split() {
        let cfg = CleaningConfig {
            strip_special_chars: false,
            ..CleaningConfig::default()
        };
        assert_eq!(clean(["a? b! c. d"], &cfg), s(&["a? b! c.", "d"]));
    }

    #[test]
    fn every_rule_can_be_disabled() {
        let cfg = CleaningConfig {
            strip_slashes: false,
            strip_special_chars: false,
            allowed_punctuation: String::new(),
            collapse_repeated_fullstops: false,
            sentence_split_on_fullstop: false,
            lowercase: false,
        };
        assert!(cfg.validate().is_err());
        assert_eq!(clean(["A/B..c"], &cfg), s(&["A/B..c"]));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let lines: Vec<String> = (0..10).map(|i| format!("line {i}")).collect();
        let spec = SplitSpec::default();
        let a = split(&lines, &spec).unwrap();
        assert_eq!((a.train.len(), a.valid.len(), a.test.len()), (8, 1, 1));
        assert_eq!(a, split(&lines, &spec).unwrap());
        let other = split(&lines, &SplitSpec { seed: 99, ..spec }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn split_rejects_bad_input() {
        assert!(matches!(split(&s(&["a", "b"]), &SplitSpec::default()), Err(Error::Data(_))));
        let spec = SplitSpec {
            train_frac: 0.8,
            valid_frac: 0.3,
            test_frac: 0.1,
            seed: 0,
        };
        assert!(matches!(split(&s(&["a", "b", "c"]), &spec), Err(Error::Config(_))));
    }

    #[test]
    fn test_shard_is_kept_apart() {
        let lines: Vec<String> = (0..20).map(|i| format!("old {i}")).collect();
        let shard = s(&["new 1", "new 2"]);
        let sp = split_with_test_shard(&lines, &shard, &SplitSpec::default()).unwrap();
        assert_eq!(sp.test, shard);
        assert_eq!(sp.train.len() + sp.valid.len(), 20);
        assert_eq!(sp.train.len(), 18);
    }

    #[test]
    fn stats_whitespace_baseline() {
        let one = s(&["ke a tseba"]);
        let empty: Vec<String> = Vec::new();
        let st = stats(&[("train", &one), ("valid", &empty)], TokenCounter::Whitespace);
        assert_eq!(st.splits[0].tokens, 3);
        assert_eq!(st.splits[0].unique_tokens, 3);
        assert_eq!(st.splits[1], SplitStats { name: "valid".into(), ..Default::default() });
        assert_eq!(st.total.tokens, 3);
        let table = st.render_table();
        assert!(table.contains("#Unique tokens"));
        assert!(table.contains("total"));
    }

    #[test]
    fn read_lines_reports_bad_utf8_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, b"fine\nalso fine\nbad \xff here\n").unwrap();
        let err = read_lines(&path).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }
}
