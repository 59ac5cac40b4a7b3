//! Synthetic demo corpora.
//!
//! A small invented Bantu-like language with noun classes and concord
//! agreement, generated from a fixed lexicon. Two registers share the
//! lexicon: a general register for pretraining and a news register for
//! fine-tuning. Raw lines carry light formatting noise (slashes, ellipses,
//! stray symbols, joined sentences) so that cleaning has work to do.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LEXICON_SEED: u64 = 0x05ee_d1e8;

struct NounClass {
    sg_prefix: &'static str,
    pl_prefix: &'static str,
    sg_concord: &'static str,
    pl_concord: &'static str,
    sg_poss: &'static str,
    pl_poss: &'static str,
    sg_dem: &'static str,
    pl_dem: &'static str,
}

const CLASSES: [NounClass; 5] = [
    NounClass {
        sg_prefix: "mo",
        pl_prefix: "ba",
        sg_concord: "o",
        pl_concord: "ba",
        sg_poss: "wa",
        pl_poss: "ba",
        sg_dem: "yo",
        pl_dem: "ba",
    },
    NounClass {
        sg_prefix: "mo",
        pl_prefix: "me",
        sg_concord: "o",
        pl_concord: "e",
        sg_poss: "wa",
        pl_poss: "ya",
        sg_dem: "wo",
        pl_dem: "ye",
    },
    NounClass {
        sg_prefix: "le",
        pl_prefix: "ma",
        sg_concord: "le",
        pl_concord: "a",
        sg_poss: "la",
        pl_poss: "a",
        sg_dem: "le",
        pl_dem: "a",
    },
    NounClass {
        sg_prefix: "se",
        pl_prefix: "di",
        sg_concord: "se",
        pl_concord: "di",
        sg_poss: "sa",
        pl_poss: "tša",
        sg_dem: "se",
        pl_dem: "tše",
    },
    NounClass {
        sg_prefix: "",
        pl_prefix: "di",
        sg_concord: "e",
        pl_concord: "di",
        sg_poss: "ya",
        pl_poss: "tša",
        sg_dem: "ye",
        pl_dem: "tše",
    },
];

const ONSETS: [&str; 22] = [
    "b", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "š", "tš", "kg", "ng", "ts",
    "hl", "bj", "fs", "tl",
];
const VOWELS: [&str; 7] = ["a", "e", "i", "o", "u", "ê", "ô"];
const MONTHS: [&str; 12] = [
    "pherekgong",
    "dibokwane",
    "hlakola",
    "moranang",
    "mopitlo",
    "phupu",
    "mosegamanye",
    "phato",
    "lewedi",
    "diphalane",
    "dibatsela",
    "manthole",
];

struct Noun {
    class: usize,
    stem: String,
}

struct Lexicon {
    nouns: Vec<Noun>,
    verbs: Vec<String>,
    adjectives: Vec<String>,
    places: Vec<String>,
    names: Vec<String>,
    // news-register vocabulary
    institutions: Vec<Noun>,
    news_verbs: Vec<String>,
}

fn stem(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    (0..syllables)
        .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
        .collect()
}

impl Lexicon {
    fn build() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(LEXICON_SEED);
        let noun = |rng: &mut ChaCha8Rng| {
            let class = rng.gen_range(0..CLASSES.len());
            let n = rng.gen_range(2..=3);
            Noun {
                class,
                stem: stem(rng, n),
            }
        };
        let nouns = (0..90).map(|_| noun(&mut rng)).collect();
        let institutions = (0..20).map(|_| noun(&mut rng)).collect();
        let verb = |rng: &mut ChaCha8Rng| {
            let n = rng.gen_range(1..=2);
            format!("{}{}a", stem(rng, n), ONSETS.choose(rng).unwrap())
        };
        let verbs = (0..60).map(|_| verb(&mut rng)).collect();
        let news_verbs = (0..15).map(|_| verb(&mut rng)).collect();
        let adjectives = (0..20).map(|_| stem(&mut rng, 2)).collect();
        let places = (0..25).map(|_| stem(&mut rng, 3)).collect();
        let names = (0..30)
            .map(|_| {
                let n = rng.gen_range(2..=3);
                stem(&mut rng, n)
            })
            .collect();
        Self {
            nouns,
            verbs,
            adjectives,
            places,
            names,
            institutions,
            news_verbs,
        }
    }
}

/// Zipf-like pick: low indices are much more frequent.
fn zipf<'a, T>(rng: &mut ChaCha8Rng, items: &'a [T]) -> &'a T {
    let u: f64 = rng.gen();
    let idx = ((items.len() as f64).powf(u) - 1.0) as usize;
    &items[idx.min(items.len() - 1)]
}

struct Phrase {
    text: String,
    concord: &'static str,
}

fn noun_phrase(rng: &mut ChaCha8Rng, lex: &Lexicon, pool: &[Noun]) -> Phrase {
    let noun = zipf(rng, pool);
    let class = &CLASSES[noun.class];
    let plural = rng.gen_bool(0.35);
    let (prefix, concord, poss, dem) = if plural {
        (class.pl_prefix, class.pl_concord, class.pl_poss, class.pl_dem)
    } else {
        (class.sg_prefix, class.sg_concord, class.sg_poss, class.sg_dem)
    };
    let mut text = format!("{prefix}{}", noun.stem);
    let r: f64 = rng.gen();
    if r < 0.25 {
        let adj = zipf(rng, &lex.adjectives);
        text.push_str(&format!(" {dem} {prefix}{adj}"));
    } else if r < 0.45 {
        let owner = zipf(rng, &lex.nouns);
        let oc = &CLASSES[owner.class];
        text.push_str(&format!(" {poss} {}{}", oc.sg_prefix, owner.stem));
    } else if r < 0.55 {
        text.push_str(&format!(" {dem}"));
    }
    Phrase { text, concord }
}

fn verb_group(rng: &mut ChaCha8Rng, verbs: &[String], concord: &str) -> String {
    let verb = zipf(rng, verbs);
    match rng.gen_range(0..4) {
        0 => format!("{concord} a {verb}"),
        1 => format!("{concord} {}ile", &verb[..verb.len() - 1]),
        2 => format!("{concord} tla {verb}"),
        _ => format!("ga {concord} {}e", &verb[..verb.len() - 1]),
    }
}

fn general_sentence(rng: &mut ChaCha8Rng, lex: &Lexicon) -> String {
    let mut words = Vec::new();
    if rng.gen_bool(0.15) {
        words.push(zipf(rng, &["gomme", "ka gona", "le ge", "eupša", "bjale"]).to_string());
    }
    let subject = if rng.gen_bool(0.2) {
        Phrase {
            text: zipf(rng, &lex.names).clone(),
            concord: "o",
        }
    } else {
        noun_phrase(rng, lex, &lex.nouns)
    };
    words.push(subject.text);
    words.push(verb_group(rng, &lex.verbs, subject.concord));
    if rng.gen_bool(0.8) {
        words.push(noun_phrase(rng, lex, &lex.nouns).text);
    }
    if rng.gen_bool(0.4) {
        let place = zipf(rng, &lex.places);
        words.push(format!("{} {place}ng", zipf(rng, &["go", "ka", "mo"])));
    }
    if rng.gen_bool(0.2) {
        let second = noun_phrase(rng, lex, &lex.nouns);
        words.push(format!("gore {}", second.text));
        words.push(verb_group(rng, &lex.verbs, second.concord));
    }
    format!("{}.", words.join(" "))
}

fn news_sentence(rng: &mut ChaCha8Rng, lex: &Lexicon, year: u32) -> String {
    let inst = noun_phrase(rng, lex, &lex.institutions);
    let frame = match rng.gen_range(0..4) {
        0 => format!(
            "go ya ka pego ya {} ka la {} {}",
            inst.text,
            rng.gen_range(1..=28),
            MONTHS.choose(rng).unwrap()
        ),
        1 => format!("{} {} gore", inst.text, verb_group(rng, &lex.news_verbs, inst.concord)),
        2 => format!(
            "ka ngwaga wa {year} {} {}",
            inst.text,
            verb_group(rng, &lex.news_verbs, inst.concord)
        ),
        _ => format!("mmoleledi {} o boletše gore", zipf(rng, &lex.names)),
    };
    let mut body = general_sentence(rng, lex);
    body.pop();
    if rng.gen_bool(0.3) {
        body.push_str(&format!(" ka diperesente tše {}", rng.gen_range(2..=95)));
    }
    format!("{frame} {body}.")
}

fn noisy(rng: &mut ChaCha8Rng, sentences: Vec<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(sentences.len());
    let mut iter = sentences.into_iter().peekable();
    while let Some(mut s) = iter.next() {
        let r: f64 = rng.gen();
        if r < 0.04 {
            s = s.replacen(' ', " / ", 1);
        } else if r < 0.07 {
            s.push_str("..");
        } else if r < 0.09 {
            s = format!("* {s}");
        } else if r < 0.11 {
            s = capitalize(&s);
        }
        if rng.gen_bool(0.1) {
            if let Some(next) = iter.next() {
                s = format!("{s} {next}");
            }
        }
        out.push(s);
    }
    out
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    chars
        .next()
        .map(|c| c.to_uppercase().chain(chars).collect())
        .unwrap_or_default()
}

/// Size and seed of the bundled desk-scale corpus (about 50k BPE tokens at
/// a 512-entry vocabulary).
pub const DESK_SENTENCES: usize = 3000;
pub const DESK_SEED: u64 = 7;

/// The bundled desk-scale corpus, raw.
pub fn desk_corpus() -> Vec<String> {
    general_corpus(DESK_SENTENCES, DESK_SEED)
}

/// Raw general-register lines (before cleaning).
pub fn general_corpus(sentences: usize, seed: u64) -> Vec<String> {
    let lex = Lexicon::build();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = (0..sentences).map(|_| general_sentence(&mut rng, &lex)).collect();
    noisy(&mut rng, s)
}

/// Raw news-register lines dated in `year` (before cleaning). Different
/// years give disjoint shards for held-out testing.
pub fn news_corpus(sentences: usize, seed: u64, year: u32) -> Vec<String> {
    let lex = Lexicon::build();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ u64::from(year).rotate_left(32));
    let s = (0..sentences)
        .map(|_| news_sentence(&mut rng, &lex, year))
        .collect();
    noisy(&mut rng, s)
}
