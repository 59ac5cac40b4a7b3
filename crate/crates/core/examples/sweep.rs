//! A small seeded hyperparameter search with a leaderboard and TSV report.
//!
//! cargo run --release --example sweep -- [trials] [epochs]

use occlm::cli::RunConfig;
use occlm::corpus::{self, demo, CleaningConfig, SplitSpec};
use occlm::sweep::{self, LogRange, SweepOptions, SweepSpec};
use occlm::tokenizer::{train_bpe, SpecialTokens};
use occlm::train::NullSink;

fn main() -> occlm::Result<()> {
    let mut args = std::env::args().skip(1);
    let trials: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(4);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(2);

    let lines = corpus::clean(demo::general_corpus(800, 3), &CleaningConfig::default());
    let splits = corpus::split(&lines, &SplitSpec::default())?;
    let desk = RunConfig::default();
    let vocab = train_bpe(&splits.train, 400, SpecialTokens::default())?;
    let model = occlm::model::ModelConfig {
        vocab_size: vocab.len(),
        block_size: 32,
        d_model: 32,
        ..desk.model
    };
    let spec = SweepSpec {
        trial_count: trials,
        max_epochs: epochs,
        seed: 0,
        lr: LogRange { min: 3e-4, max: 1e-2 },
        n_layers: vec![1, 2],
        n_heads: vec![2, 4],
        dropout: vec![0.0, 0.1],
        occlusion_prob: vec![0.1, 0.3, 0.5],
        base_model: model,
        base_train: desk.train,
    };
    let train_ds = corpus::pack(&splits.train, &vocab, 32)?;
    let valid_ds = corpus::pack(&splits.valid, &vocab, 32)?;
    let dir = std::env::temp_dir().join("occlm-example-sweep");
    let opts = SweepOptions {
        out_dir: Some(dir.clone()),
        ..SweepOptions::new(format!("sweep-{trials}x{epochs}"))
    };
    // finished trials in `dir` are picked up instead of rerun
    let outcome = sweep::run_sweep(&spec, &train_ds, &valid_ds, vocab.specials(), &opts, &mut NullSink)?;
    print!("{}", sweep::sweep_report(&outcome.leaderboard).table_tsv());
    println!("best trial {} -> {}", outcome.best.trial_id, dir.join(&opts.run_id).display());
    Ok(())
}
