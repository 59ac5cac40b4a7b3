//! Clean, split, count and pack the bundled corpus.
//!
//! cargo run --release --example corpus

use occlm::corpus::{self, demo, CleaningConfig, SplitSpec, TokenCounter};
use occlm::tokenizer::{train_bpe, SpecialTokens};

fn main() -> occlm::Result<()> {
    let raw = demo::desk_corpus();
    let lines = corpus::clean(&raw, &CleaningConfig::default());
    println!("{} raw lines -> {} clean sentences", raw.len(), lines.len());
    for before in raw.iter().filter(|l| l.contains(['/', '*'])).take(3) {
        println!("  {before:?}\n  => {:?}", corpus::clean_line(before, &CleaningConfig::default()));
    }

    let splits = corpus::split(&lines, &SplitSpec::default())?;
    let vocab = train_bpe(&splits.train, 512, SpecialTokens::default())?;
    let parts: [(&str, &[String]); 3] = [
        ("train", &splits.train),
        ("valid", &splits.valid),
        ("test", &splits.test),
    ];
    println!("{}", corpus::stats(&parts, TokenCounter::Bpe(&vocab)).render_table());

    let packed = corpus::pack(&splits.train, &vocab, 64)?;
    println!(
        "train packs into {} windows of {} with {} targets",
        packed.len(),
        packed.block_size,
        packed.num_targets()
    );
    Ok(())
}
