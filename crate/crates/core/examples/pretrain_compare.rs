//! Standard vs occlusion pretraining on the bundled corpus: the same model,
//! data and seed, trained with occlusion probability 0, 0.1, 0.3 and 0.5.
//!
//! cargo run --release --example pretrain_compare -- [epochs] [seed]

use occlm::cli::RunConfig;
use occlm::corpus::{self, demo, CleaningConfig, SplitSpec};
use occlm::model::Model;
use occlm::tokenizer::{train_bpe, SpecialTokens};
use occlm::train::{self, NullSink, RunContext, TrainConfig};

fn main() -> occlm::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);

    let lines = corpus::clean(demo::desk_corpus(), &CleaningConfig::default());
    let splits = corpus::split(&lines, &SplitSpec::default())?;
    let desk = RunConfig::default();
    let vocab = train_bpe(&splits.train, desk.tokenizer.vocab_size, SpecialTokens::default())?;
    let block = desk.model.block_size;
    let train_ds = corpus::pack(&splits.train, &vocab, block)?;
    let valid_ds = corpus::pack(&splits.valid, &vocab, block)?;
    println!(
        "{} train windows, {} parameters, {epochs} epochs, seed {seed}",
        train_ds.len(),
        desk.model.parameter_count()
    );

    println!("{:>6} {:>10} {:>10} {:>6}", "p", "valid loss", "valid ppl", "best");
    for p in [0.0, 0.1, 0.3, 0.5] {
        let cfg = TrainConfig {
            max_epochs: epochs,
            occlusion_prob: p,
            seed,
            ..desk.train.clone()
        };
        let ctx = RunContext::new(vocab.specials(), format!("compare-p{p}"));
        let model = Model::init(desk.model.clone(), seed)?;
        let fit = train::fit(model, &train_ds, &valid_ds, &cfg, &ctx, &mut NullSink)?;
        let loss = fit.best.meta.valid_loss.unwrap_or(f64::NAN);
        println!("{p:>6} {loss:>10.4} {:>10.2} {:>6}", loss.exp(), fit.best.meta.epoch);
    }
    Ok(())
}
