//! Checkpoint every epoch, simulate a crash, and resume bit-identically.
//!
//! cargo run --release --example resume

use occlm::corpus::{self, demo, CleaningConfig, SplitSpec, TokenDataset};
use occlm::eval;
use occlm::model::{Checkpoint, Model, ModelConfig};
use occlm::tokenizer::{train_bpe, SpecialTokens};
use occlm::train::{self, NullSink, RunContext, TrainConfig, Validator, LAST_CHECKPOINT};
use occlm::{Error, Result};

/// Stops the run with an error once `crash_at` is reached.
struct Crash<'a> {
    valid: &'a TokenDataset,
    crash_at: usize,
}

impl Validator for Crash<'_> {
    fn validation_loss(&mut self, model: &Model, epoch: usize) -> Result<f64> {
        if epoch == self.crash_at {
            return Err(Error::Data(format!("power cut in epoch {epoch}")));
        }
        Ok(eval::perplexity(model, self.valid, 16)?.mean_loss)
    }
}

fn main() -> Result<()> {
    let lines = corpus::clean(demo::general_corpus(600, 2), &CleaningConfig::default());
    let splits = corpus::split(&lines, &SplitSpec::default())?;
    let vocab = train_bpe(&splits.train, 400, SpecialTokens::default())?;
    let train_ds = corpus::pack(&splits.train, &vocab, 32)?;
    let valid_ds = corpus::pack(&splits.valid, &vocab, 32)?;
    let model_cfg = ModelConfig {
        vocab_size: vocab.len(),
        block_size: 32,
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        max_epochs: 4,
        base_lr: 3e-3,
        occlusion_prob: 0.3,
        ..TrainConfig::default()
    };
    let dir = std::env::temp_dir().join("occlm-example-resume");
    let ctx = RunContext {
        checkpoint_dir: Some(dir.clone()),
        ..RunContext::new(vocab.specials(), "resume-example")
    };

    let reference = train::fit(Model::init(model_cfg.clone(), 1)?, &train_ds, &valid_ds, &cfg, &ctx, &mut NullSink)?;

    let mut crash = Crash {
        valid: &valid_ds,
        crash_at: 3,
    };
    let err = train::fit_with(Model::init(model_cfg, 1)?, &train_ds, &mut crash, &cfg, &ctx, &mut NullSink, None)
        .unwrap_err();
    println!("interrupted: {err}");

    let last = Checkpoint::load(dir.join(LAST_CHECKPOINT))?;
    println!("resuming from epoch {} (step {})", last.meta.epoch, last.meta.step);
    let resumed = train::resume_fit(&last, &train_ds, &valid_ds, &cfg, &ctx, &mut NullSink)?;
    for (a, b) in reference.state.history.iter().zip(&resumed.state.history) {
        println!("epoch {}: valid loss {:.6} vs {:.6}", a.epoch, a.valid_loss, b.valid_loss);
    }
    println!("final weights identical: {}", reference.last.params == resumed.last.params);
    Ok(())
}
