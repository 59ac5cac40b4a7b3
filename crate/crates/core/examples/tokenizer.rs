//! Train a byte-level BPE vocabulary, encode and decode text, and save it.
//!
//! cargo run --release --example tokenizer -- [vocab_size]

use occlm::corpus::demo;
use occlm::tokenizer::{train_bpe, SpecialTokens, Vocabulary};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let size: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(512);
    let corpus = demo::desk_corpus();
    let vocab = train_bpe(&corpus, size, SpecialTokens::default())?;
    println!("trained {} entries ({} merges), hash {}", vocab.len(), vocab.merges().len(), &vocab.hash()[..12]);

    let text = "Modimafu wa kgêke o tla dadeša mosobi wo mobjeto.";
    let ids = vocab.encode_ids(text);
    let pieces: Vec<String> = ids.iter().map(|&id| vocab.token_str(id).unwrap_or_default()).collect();
    println!("{text:?}\n  -> {} ids {:?}\n  -> pieces {:?}", ids.len(), ids, pieces);
    println!("  -> decoded {:?}", vocab.decode(&ids)?);
    let s = vocab.specials();
    println!("specials: pad {} occ {} eot {}", s.pad, s.occ, s.eot);

    let dir = std::env::temp_dir().join("occlm-example-tokenizer");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("vocab.txt");
    vocab.save(&path)?;
    let back = Vocabulary::load(&path)?;
    assert_eq!(back.hash(), vocab.hash());
    println!("saved and reloaded {}", path.display());
    Ok(())
}
