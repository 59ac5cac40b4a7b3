//! Train a small model briefly, then report test perplexity and the
//! prompted-continuation BLEU with a short transcript.
//!
//! cargo run --release --example eval_bleu -- [epochs]

use occlm::cli::RunConfig;
use occlm::corpus::{self, demo, CleaningConfig, SplitSpec};
use occlm::eval::{self, BleuOptions, EvalOptions};
use occlm::model::Model;
use occlm::tokenizer::{train_bpe, SpecialTokens};
use occlm::train::{self, NullSink, RunContext, TrainConfig};

fn main() -> occlm::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let lines = corpus::clean(demo::desk_corpus(), &CleaningConfig::default());
    let splits = corpus::split(&lines, &SplitSpec::default())?;
    let desk = RunConfig::default();
    let vocab = train_bpe(&splits.train, desk.tokenizer.vocab_size, SpecialTokens::default())?;
    let block = desk.model.block_size;
    let ctx = RunContext {
        vocab_hash: Some(vocab.hash()),
        ..RunContext::new(vocab.specials(), "eval-example")
    };
    let cfg = TrainConfig {
        max_epochs: epochs,
        ..desk.train.clone()
    };
    let fit = train::fit(
        Model::init(desk.model.clone(), 1)?,
        &corpus::pack(&splits.train, &vocab, block)?,
        &corpus::pack(&splits.valid, &vocab, block)?,
        &cfg,
        &ctx,
        &mut NullSink,
    )?;

    let test = corpus::pack(&splits.test, &vocab, block)?;
    let opts = EvalOptions {
        split: "test".into(),
        batch_size: 16,
        bleu: Some((&splits.test, BleuOptions::default())),
    };
    let (report, protocol) = eval::evaluate(&fit.best, &vocab, &test, &opts)?;
    print!("{}", report.to_json()?);
    if let Some(p) = protocol {
        let mut short = p.clone();
        short.pairs.truncate(3);
        print!("{}", short.transcript(&vocab)?);
    }
    Ok(())
}
