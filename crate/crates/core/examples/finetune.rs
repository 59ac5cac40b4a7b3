//! Pretrain on the general corpus, then fine-tune on a news-style corpus
//! with gradual unfreezing, and compare against training from scratch.
//!
//! cargo run --release --example finetune -- [pretrain_epochs] [finetune_epochs]

use occlm::cli::RunConfig;
use occlm::corpus::{self, demo, CleaningConfig, SplitSpec};
use occlm::model::Model;
use occlm::tokenizer::{train_bpe, SpecialTokens};
use occlm::train::{self, NullSink, RunContext, TrainConfig};

fn main() -> occlm::Result<()> {
    let mut args = std::env::args().skip(1);
    let pre_epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(4);
    let ft_epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(4);

    let clean = |lines: Vec<String>| corpus::clean(&lines, &CleaningConfig::default());
    let general = corpus::split(&clean(demo::desk_corpus()), &SplitSpec::default())?;
    let desk = RunConfig::default();
    let vocab = train_bpe(&general.train, desk.tokenizer.vocab_size, SpecialTokens::default())?;
    let block = desk.model.block_size;
    let pack = |lines: &[String]| corpus::pack(lines, &vocab, block);
    let ctx = RunContext {
        vocab_hash: Some(vocab.hash()),
        ..RunContext::new(vocab.specials(), "finetune-example")
    };

    let pre_cfg = TrainConfig {
        max_epochs: pre_epochs,
        occlusion_prob: 0.1,
        ..desk.train.clone()
    };
    let model = Model::init(desk.model.clone(), 1)?;
    let pre = train::fit(model, &pack(&general.train)?, &pack(&general.valid)?, &pre_cfg, &ctx, &mut NullSink)?;
    println!("pretrained: valid loss {:.4}", pre.best.meta.valid_loss.unwrap_or(f64::NAN));

    let news_train = pack(&clean(demo::news_corpus(300, 1, 2019)))?;
    let news_valid = pack(&clean(demo::news_corpus(150, 2, 2021)))?;
    let ft_cfg = TrainConfig {
        max_epochs: ft_epochs,
        occlusion_prob: 0.0,
        unfreeze_top_k: 1,
        unfreeze_interval_epochs: 1,
        ..desk.train.clone()
    };
    let ft = train::finetune(&pre.best, &desk.model, &news_train, &news_valid, &ft_cfg, &ctx, &mut NullSink)?;
    for r in &ft.state.history {
        println!(
            "  finetune epoch {}: trainable blocks {:?}, valid loss {:.4}",
            r.epoch, r.trainable_blocks, r.valid_loss
        );
    }
    let scratch_model = Model::init(desk.model.clone(), 2)?;
    let scratch = train::fit(scratch_model, &news_train, &news_valid, &ft_cfg, &ctx, &mut NullSink)?;
    println!(
        "news valid loss: fine-tuned {:.4}, from scratch {:.4}",
        ft.best.meta.valid_loss.unwrap_or(f64::NAN),
        scratch.best.meta.valid_loss.unwrap_or(f64::NAN)
    );
    Ok(())
}
