// Splitting text into merge-isolated pieces, and the printable byte alphabet
// used when tokens are written out as text.

use std::sync::OnceLock;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    Letter,
    Digit,
    Space,
    Other,
}

fn class_of(c: char) -> Class {
    if c.is_whitespace() {
        Class::Space
    } else if c.is_alphabetic() || c == '\'' {
        Class::Letter
    } else if c.is_numeric() {
        Class::Digit
    } else {
        Class::Other
    }
}

/// Splits `text` into pieces whose concatenation is `text`. A non-space piece
/// is a run of one character class, optionally led by the single space that
/// preceded it; leftover whitespace forms its own pieces.
pub(crate) fn pieces(text: &str) -> Vec<(usize, &str)> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let start = chars[i].0;
        let cls = class_of(chars[i].1);
        let mut j = i + 1;
        if cls == Class::Space {
            while j < chars.len() && class_of(chars[j].1) == Class::Space {
                j += 1;
            }
            // hand a trailing ' ' to the following word
            if j < chars.len() && chars[j - 1].1 == ' ' {
                j -= 1;
                if j == i {
                    let word_cls = class_of(chars[j + 1].1);
                    let mut k = j + 2;
                    while k < chars.len() && class_of(chars[k].1) == word_cls {
                        k += 1;
                    }
                    out.push((start, slice(text, &chars, i, k)));
                    i = k;
                    continue;
                }
            }
        } else {
            while j < chars.len() && class_of(chars[j].1) == cls {
                j += 1;
            }
        }
        out.push((start, slice(text, &chars, i, j)));
        i = j;
    }
    out
}

fn slice<'a>(text: &'a str, chars: &[(usize, char)], from: usize, to: usize) -> &'a str {
    let end = chars.get(to).map_or(text.len(), |c| c.0);
    &text[chars[from].0..end]
}

fn tables() -> &'static ([char; 256], std::collections::HashMap<char, u8>) {
    static TABLES: OnceLock<([char; 256], std::collections::HashMap<char, u8>)> = OnceLock::new();
    TABLES.get_or_init(|| {
        let printable = |b: u8| matches!(b, b'!'..=b'~' | 0xA1..=0xAC | 0xAE..=0xFF);
        let mut fwd = ['\0'; 256];
        let mut extra = 0u32;
        for b in 0..=255u8 {
            fwd[b as usize] = if printable(b) {
                b as char
            } else {
                extra += 1;
                char::from_u32(255 + extra).expect("valid code point")
            };
        }
        let inv = fwd.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        (fwd, inv)
    })
}

/// Renders raw bytes with a printable, whitespace-free character per byte.
pub(crate) fn bytes_to_display(bytes: &[u8]) -> String {
    let (fwd, _) = tables();
    bytes.iter().map(|&b| fwd[b as usize]).collect()
}

pub(crate) fn display_to_bytes(s: &str) -> Option<Vec<u8>> {
    let (_, inv) = tables();
    s.chars().map(|c| inv.get(&c).copied()).collect()
}
