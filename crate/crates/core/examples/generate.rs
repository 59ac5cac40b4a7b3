//! Greedy, sampled and top-k continuations from a briefly trained model.
//!
//! cargo run --release --example generate -- [prompt]

use occlm::cli::RunConfig;
use occlm::corpus::{self, demo, CleaningConfig, SplitSpec};
use occlm::eval::{generate, GenerationConfig, Strategy};
use occlm::model::Model;
use occlm::tokenizer::{train_bpe, SpecialTokens};
use occlm::train::{self, NullSink, RunContext, TrainConfig};

fn main() -> occlm::Result<()> {
    let prompt = std::env::args().nth(1).unwrap_or_else(|| "modimafu wa".into());
    let lines = corpus::clean(demo::desk_corpus(), &CleaningConfig::default());
    let splits = corpus::split(&lines, &SplitSpec::default())?;
    let desk = RunConfig::default();
    let vocab = train_bpe(&splits.train, desk.tokenizer.vocab_size, SpecialTokens::default())?;
    let block = desk.model.block_size;
    let cfg = TrainConfig {
        max_epochs: 3,
        ..desk.train.clone()
    };
    let fit = train::fit(
        Model::init(desk.model.clone(), 1)?,
        &corpus::pack(&splits.train, &vocab, block)?,
        &corpus::pack(&splits.valid, &vocab, block)?,
        &cfg,
        &RunContext::new(vocab.specials(), "generate-example"),
        &mut NullSink,
    )?;
    let model = fit.best_model()?;
    let ids = vocab.encode_ids(&prompt);

    let settings = [
        ("greedy", Strategy::Greedy, 1.0, None),
        ("sample t=0.8", Strategy::Sample, 0.8, None),
        ("top-k 5", Strategy::TopK, 1.0, Some(5)),
    ];
    for (name, strategy, temperature, top_k) in settings {
        let gen = GenerationConfig {
            max_new_tokens: 20,
            strategy,
            temperature,
            top_k,
            seed: 7,
            ..GenerationConfig::default()
        };
        let new = generate(&model, &vocab.specials(), &ids, &gen)?;
        let full: Vec<_> = ids.iter().chain(&new).copied().collect();
        println!("{name:>14}: {}", vocab.decode(&full)?);
    }
    Ok(())
}
