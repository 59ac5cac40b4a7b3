//! The `occlm` command line: tokenizer training, corpus preparation,
//! pretraining, fine-tuning, evaluation, sweeps and generation.
//!
//! Configuration precedence is flags, then `OCCLM_SEED`, then the config
//! file, then the built-in preset. Exit codes: 0 success, 1 domain or
//! validation error, 2 usage error.

pub mod config;
mod manifest;
mod quickstart;

pub use config::{preset, resolve, ConfigFile, RunConfig, TokenizerSettings, PRESETS};
pub use manifest::{derive_run_id, file_hash, RunManifest, RunStatus, MANIFEST_FILE};
pub use quickstart::{quickstart, QuickstartFiles};

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::corpus::{self, CleaningConfig, SplitSpec, TokenCounter, TokenDataset};
use crate::error::{Error, Result};
use crate::eval::{self, BleuOptions, EvalOptions, GenerationConfig, Smoothing, Strategy};
use crate::model::{Checkpoint, Model};
use crate::sweep::{self, SweepOptions, SweepSpec};
use crate::tokenizer::{train_bpe, SpecialTokens, Vocabulary};
use crate::train::{self, JsonlSink, MetricRecord, RunContext, StopReason};
pub use crate::train::{BEST_CHECKPOINT, LAST_CHECKPOINT};

pub const SEED_ENV: &str = "OCCLM_SEED";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Parser)]
#[command(name = "occlm", version, about = "Standard vs occlusion pretraining of a small GPT-style decoder")]
pub struct Cli {
    /// Single-threaded, bit-reproducible mode; wall-clock fields are zeroed.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Byte-level BPE tokenizer.
    #[command(subcommand)]
    Tokenizer(TokenizerCmd),
    /// Cleaning, splitting, statistics and packing.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Train a model from scratch.
    Pretrain(PretrainArgs),
    /// Fine-tune a pretrained checkpoint with gradual unfreezing.
    Finetune(FinetuneArgs),
    /// Perplexity and optional BLEU of a checkpoint on one split.
    Eval(EvalArgs),
    /// Seeded random hyperparameter search.
    Sweep(SweepArgs),
    /// Continue a prompt with a trained model.
    Generate(GenerateArgs),
    /// Write the bundled corpus, a desk-scale config and a comparison script.
    Quickstart(QuickstartArgs),
}

#[derive(Debug, Subcommand)]
pub enum TokenizerCmd {
    /// Train a vocabulary on one or more text files.
    Train(TokenizerTrainArgs),
}

#[derive(Debug, Args)]
pub struct TokenizerTrainArgs {
    /// Training text, one sentence per line.
    #[arg(long, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// Target vocabulary size including the byte alphabet and specials.
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory for the vocabulary and manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override the derived run id.
    #[arg(long)]
    pub run_id: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum CorpusCmd {
    /// Apply the cleaning rules and write one sentence per line.
    Clean {
        #[arg(long, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Seeded train/valid/test partition into `train.txt`, `valid.txt`,
    /// `test.txt`.
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Take the test partition from this file instead.
        #[arg(long)]
        test_shard: Option<PathBuf>,
        #[arg(long, default_value_t = 0.8)]
        train_frac: f64,
        #[arg(long, default_value_t = 0.1)]
        valid_frac: f64,
        #[arg(long, default_value_t = 0.1)]
        test_frac: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sentence and token counts per partition of a split directory.
    Stats {
        #[arg(long)]
        data: PathBuf,
        /// Count BPE tokens with this vocabulary instead of words.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Encode and pack text into fixed windows (JSON).
    Pack {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        block_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Objective {
    Standard,
    Occlusion,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// TOML file with `[tokenizer]`, `[model]` and `[train]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base configuration: preset:desk, preset:table3-occ or preset:table3-std.
    #[arg(long)]
    pub preset: Option<String>,
}

/// Training data: a split directory or explicit files. Files ending in
/// `.json` are read as packed datasets, anything else as text lines.
#[derive(Debug, Args, Clone, Default)]
pub struct DataArgs {
    /// Directory holding `train.txt` and `valid.txt`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Training split file.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Validation split file.
    #[arg(long)]
    pub valid: Option<PathBuf>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct TrainOverrides {
    /// Maximum training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Windows per update.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Peak learning rate after warmup.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Seed for init, shuffling, dropout and occlusion.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Chance that each eligible input token is occluded.
    #[arg(long)]
    pub occlusion_prob: Option<f64>,
    /// Epochs without strict improvement before stopping.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Share of all updates spent warming up.
    #[arg(long)]
    pub warmup_fraction: Option<f64>,
    /// Decoupled AdamW weight decay.
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Clip the global gradient norm to this value.
    #[arg(long)]
    pub grad_clip: Option<f64>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ModelOverrides {
    /// Transformer blocks.
    #[arg(long)]
    pub n_layers: Option<usize>,
    /// Attention heads; must divide d_model.
    #[arg(long)]
    pub n_heads: Option<usize>,
    /// Hidden width.
    #[arg(long)]
    pub d_model: Option<usize>,
    /// Context length in tokens.
    #[arg(long)]
    pub block_size: Option<usize>,
    /// Dropout probability.
    #[arg(long)]
    pub dropout: Option<f32>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Vocabulary file from `tokenizer train`.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Output directory; defaults to `runs/<run_id>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Standard forces occlusion off; occlusion defaults it to 0.3.
    #[arg(long, value_enum)]
    pub objective: Option<Objective>,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub train: TrainOverrides,
    #[command(flatten)]
    pub model: ModelOverrides,
    /// Override the derived run id.
    #[arg(long)]
    pub run_id: Option<String>,
    /// Continue an interrupted run from `last.ckpt` in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Pretrained checkpoint; the model shape comes from here.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Vocabulary file from `tokenizer train`.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Standard forces occlusion off; occlusion defaults it to 0.3.
    #[arg(long, value_enum)]
    pub objective: Option<Objective>,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub train: TrainOverrides,
    /// Blocks trainable from the first epoch, counted from the top.
    #[arg(long)]
    pub unfreeze_top_k: Option<usize>,
    /// Epochs between unfreezing one more block.
    #[arg(long)]
    pub unfreeze_interval: Option<usize>,
    /// Override the derived run id.
    #[arg(long)]
    pub run_id: Option<String>,
}

#[derive(Debug, Args, Clone)]
pub struct GenerationArgs {
    #[arg(long, default_value = "greedy", value_parser = parse_strategy)]
    pub strategy: Strategy,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Sampling seed.
    #[arg(long = "gen-seed", default_value_t = 0)]
    pub gen_seed: u64,
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl GenerationArgs {
    fn config(&self, max_new_tokens: usize) -> GenerationConfig {
        GenerationConfig {
            max_new_tokens,
            strategy: self.strategy,
            temperature: self.temperature,
            top_k: self.top_k,
            stop_on_eot: true,
            seed: self.gen_seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Vocabulary file from `tokenizer train`.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Text file (one sentence per line) or packed `.json` dataset.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Name stored in the report; defaults to the file stem, with `valid`
    /// reported as `validation`.
    #[arg(long)]
    pub split_name: Option<String>,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Also run the prompted-continuation BLEU protocol (text splits only).
    #[arg(long)]
    pub bleu: bool,
    #[arg(long, default_value_t = 0.25)]
    pub prompt_frac: f64,
    #[arg(long, default_value_t = 4)]
    pub max_n: usize,
    /// Replace zero n-gram match counts with this epsilon.
    #[arg(long)]
    pub smoothing_epsilon: Option<f64>,
    #[command(flatten)]
    pub generation: GenerationArgs,
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// REF/GEN transcript of the BLEU protocol.
    #[arg(long)]
    pub transcript: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Sweep spec (TOML).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Write the default occlusion sweep spec to this path and exit.
    #[arg(long)]
    pub init_spec: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Vocabulary file from `tokenizer train`.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for trials; forced to 1 with --deterministic.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    /// Override the derived run id.
    #[arg(long)]
    pub run_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Checkpoint to generate with.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Vocabulary file from `tokenizer train`.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Text to continue.
    #[arg(long)]
    pub prompt: String,
    /// Upper bound on generated tokens; end-of-text stops earlier.
    #[arg(long, default_value_t = 32)]
    pub max_new_tokens: usize,
    #[command(flatten)]
    pub generation: GenerationArgs,
}

#[derive(Debug, Args)]
pub struct QuickstartArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite files from an earlier quickstart.
    #[arg(long)]
    pub force: bool,
}

/// Outcome of a pretrain or finetune command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub objective: String,
    pub occlusion_prob: f64,
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub best_valid_perplexity: f64,
    pub stop_reason: StopReason,
}

impl RunSummary {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let det = cli.deterministic;
    match cli.command {
        Command::Tokenizer(TokenizerCmd::Train(a)) => tokenizer_train(a, det),
        Command::Corpus(c) => corpus_cmd(c),
        Command::Pretrain(a) => pretrain(a, det).map(|_| ()),
        Command::Finetune(a) => finetune(a, det).map(|_| ()),
        Command::Eval(a) => eval_cmd(a),
        Command::Sweep(a) => sweep_cmd(a, det),
        Command::Generate(a) => generate_cmd(a),
        Command::Quickstart(a) => {
            let files = quickstart(&a.out, a.force)?;
            println!("wrote {}", files.script.display());
            println!("run: sh {}", files.script.display());
            Ok(())
        }
    }
}

fn missing(what: &str) -> Error {
    Error::Config(format!("missing input: {what}"))
}

fn required<'a, T>(v: &'a Option<T>, what: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| missing(what))
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let file = args.config.as_deref().map(ConfigFile::load).transpose()?;
    let env = std::env::var(SEED_ENV).ok();
    resolve(args.preset.as_deref(), file.as_ref(), env.as_deref())
}

impl TrainOverrides {
    pub fn apply(&self, t: &mut train::TrainConfig) {
        if let Some(v) = self.epochs {
            t.max_epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.lr {
            t.base_lr = v;
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.occlusion_prob {
            t.occlusion_prob = v;
        }
        if let Some(v) = self.patience {
            t.patience = v;
        }
        if let Some(v) = self.warmup_fraction {
            t.warmup_fraction = v;
        }
        if let Some(v) = self.weight_decay {
            t.weight_decay = v;
        }
        if let Some(v) = self.grad_clip {
            t.grad_clip = Some(v);
        }
    }
}

impl ModelOverrides {
    pub fn apply(&self, m: &mut crate::model::ModelConfig) {
        if let Some(v) = self.n_layers {
            m.n_layers = v;
        }
        if let Some(v) = self.n_heads {
            m.n_heads = v;
        }
        if let Some(v) = self.d_model {
            m.d_model = v;
        }
        if let Some(v) = self.block_size {
            m.block_size = v;
        }
        if let Some(v) = self.dropout {
            m.dropout = v;
        }
    }
}

/// `standard` forces p = 0; `occlusion` keeps a configured p > 0 and falls
/// back to 0.3 otherwise.
fn apply_objective(t: &mut train::TrainConfig, objective: Option<Objective>, explicit_p: bool) -> Result<()> {
    match objective {
        Some(Objective::Standard) if explicit_p && t.occlusion_prob > 0.0 => Err(Error::Config(format!(
            "objective standard contradicts --occlusion-prob {}",
            t.occlusion_prob
        ))),
        Some(Objective::Standard) => {
            t.occlusion_prob = 0.0;
            Ok(())
        }
        Some(Objective::Occlusion) if t.occlusion_prob == 0.0 => {
            if explicit_p {
                return Err(Error::Config("objective occlusion needs --occlusion-prob above 0".into()));
            }
            t.occlusion_prob = 0.3;
            Ok(())
        }
        _ => Ok(()),
    }
}

impl DataArgs {
    fn paths(&self) -> Result<(PathBuf, PathBuf)> {
        match (&self.train, &self.valid, &self.data) {
            (Some(t), Some(v), _) => Ok((t.clone(), v.clone())),
            (None, None, Some(d)) => Ok((d.join("train.txt"), d.join("valid.txt"))),
            (Some(_), None, _) => Err(missing("--valid <file>")),
            (None, Some(_), _) => Err(missing("--train <file>")),
            (None, None, None) => Err(missing("training data; pass --data <dir> or --train <file> --valid <file>")),
        }
    }
}

fn is_packed(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "json")
}

fn load_split(path: &Path, vocab: &Vocabulary, block_size: usize) -> Result<TokenDataset> {
    if !path.exists() {
        return Err(missing(&format!("{} does not exist", path.display())));
    }
    let ds = if is_packed(path) {
        let ds = TokenDataset::load(path)?;
        if ds.block_size > block_size {
            return Err(Error::Config(format!(
                "{} was packed with block size {}, above the model's {block_size}",
                path.display(),
                ds.block_size
            )));
        }
        if let Some(id) = ds.windows.iter().flat_map(|w| w.ids.iter()).find(|&&i| i as usize >= vocab.len()) {
            return Err(Error::Index(format!(
                "{} holds token id {id}, outside the vocabulary of {}",
                path.display(),
                vocab.len()
            )));
        }
        ds
    } else {
        corpus::pack(&corpus::read_lines(path)?, vocab, block_size)?
    };
    if ds.num_targets() == 0 {
        return Err(Error::Data(format!("{} holds no tokens", path.display())));
    }
    Ok(ds)
}

/// Content hashes of `paths` in order, plus the path-keyed map for the
/// manifest.
fn hash_inputs(paths: &[&Path]) -> Result<(Vec<String>, BTreeMap<String, String>)> {
    let mut ordered = Vec::with_capacity(paths.len());
    let mut by_path = BTreeMap::new();
    for p in paths {
        let h = file_hash(p)?;
        by_path.insert(p.display().to_string(), h.clone());
        ordered.push(h);
    }
    Ok((ordered, by_path))
}

fn fresh_jsonl(path: &Path) -> Result<JsonlSink> {
    if path.exists() {
        std::fs::remove_file(path).map_err(|e| Error::io(path, e))?;
    }
    JsonlSink::create(path)
}

/// Keeps the metric lines up to `epoch` and appends after them.
fn truncated_jsonl(path: &Path, epoch: usize) -> Result<JsonlSink> {
    let kept: Vec<MetricRecord> = if path.exists() {
        JsonlSink::read(path)?.into_iter().filter(|r| r.epoch <= epoch).collect()
    } else {
        Vec::new()
    };
    let mut text = String::new();
    for r in &kept {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_text(path, &text)?;
    JsonlSink::create(path)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn tokenizer_train(a: TokenizerTrainArgs, det: bool) -> Result<()> {
    if a.input.is_empty() {
        return Err(missing("--input <file>"));
    }
    let mut cfg = load_config(&a.config)?;
    if let Some(v) = a.vocab_size {
        cfg.tokenizer.vocab_size = v;
    }
    let inputs: Vec<&Path> = a.input.iter().map(PathBuf::as_path).collect();
    let (ordered, hashes) = hash_inputs(&inputs)?;
    let snapshot = toml::to_string(&cfg.tokenizer).map_err(|e| Error::Config(e.to_string()))?;
    let run_id = a
        .run_id
        .clone()
        .unwrap_or_else(|| derive_run_id("tokenizer", &snapshot, None, &ordered));
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(&run_id));
    let mut manifest = RunManifest::new(run_id.clone(), snapshot, cfg.train.seed, det);
    manifest.data_hashes = hashes;
    manifest.save(&out)?;
    let result = (|| -> Result<Vocabulary> {
        let mut lines = Vec::new();
        for p in &inputs {
            lines.extend(corpus::read_lines(p)?);
        }
        let vocab = train_bpe(lines.iter(), cfg.tokenizer.vocab_size, SpecialTokens::default())?
            .with_run_id(Some(run_id.clone()));
        vocab.save(out.join(VOCAB_FILE))?;
        Ok(vocab)
    })();
    if let Ok(v) = &result {
        manifest.vocab_hash = Some(v.hash());
    }
    manifest.finalize(&out, &result)?;
    let vocab = result?;
    println!("{} tokens -> {}", vocab.len(), out.join(VOCAB_FILE).display());
    Ok(())
}

fn corpus_cmd(c: CorpusCmd) -> Result<()> {
    match c {
        CorpusCmd::Clean { input, out } => {
            if input.is_empty() {
                return Err(missing("--input <file>"));
            }
            let mut raw = Vec::new();
            for p in &input {
                raw.extend(corpus::read_lines(p)?);
            }
            let cleaned = corpus::clean(&raw, &CleaningConfig::default());
            corpus::write_lines(&out, &cleaned)?;
            println!("{} lines in, {} sentences out", raw.len(), cleaned.len());
            Ok(())
        }
        CorpusCmd::Split {
            input,
            out,
            test_shard,
            train_frac,
            valid_frac,
            test_frac,
            seed,
        } => {
            let spec = SplitSpec {
                train_frac,
                valid_frac,
                test_frac,
                seed,
            };
            let lines = corpus::read_lines(&input)?;
            let splits = match test_shard {
                Some(p) => corpus::split_with_test_shard(&lines, &corpus::read_lines(&p)?, &spec)?,
                None => corpus::split(&lines, &spec)?,
            };
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            for (name, part) in [("train", &splits.train), ("valid", &splits.valid), ("test", &splits.test)] {
                corpus::write_lines(out.join(format!("{name}.txt")), part)?;
            }
            println!(
                "train {} / valid {} / test {}",
                splits.train.len(),
                splits.valid.len(),
                splits.test.len()
            );
            Ok(())
        }
        CorpusCmd::Stats { data, vocab, json } => {
            let mut parts = Vec::new();
            for name in ["train", "valid", "test"] {
                let p = data.join(format!("{name}.txt"));
                if p.exists() {
                    parts.push((name, corpus::read_lines(&p)?));
                }
            }
            if parts.is_empty() {
                return Err(missing(&format!("no train.txt, valid.txt or test.txt in {}", data.display())));
            }
            let vocab = vocab.as_deref().map(Vocabulary::load).transpose()?;
            let counter = match &vocab {
                Some(v) => TokenCounter::Bpe(v),
                None => TokenCounter::Whitespace,
            };
            let borrowed: Vec<(&str, &[String])> = parts.iter().map(|(n, l)| (*n, l.as_slice())).collect();
            let s = corpus::stats(&borrowed, counter);
            if json {
                println!("{}", serde_json::to_string_pretty(&s)?);
            } else {
                print!("{}", s.render_table());
            }
            Ok(())
        }
        CorpusCmd::Pack {
            input,
            vocab,
            block_size,
            out,
        } => {
            let vocab = Vocabulary::load(&vocab)?;
            let ds = corpus::pack(&corpus::read_lines(&input)?, &vocab, block_size)?;
            ds.save(&out)?;
            println!("{} windows, {} targets -> {}", ds.len(), ds.num_targets(), out.display());
            Ok(())
        }
    }
}

struct Prepared {
    vocab: Vocabulary,
    train: TokenDataset,
    valid: TokenDataset,
    manifest: RunManifest,
    out: PathBuf,
}

/// Shared front half of pretrain and finetune: loads inputs, derives the
/// run id and writes the manifest and config snapshot.
#[allow(clippy::too_many_arguments)]
fn prepare(
    command: &str,
    cfg: &RunConfig,
    data: &DataArgs,
    vocab_path: &Path,
    extra_inputs: &[&Path],
    run_id: Option<&str>,
    out: Option<&Path>,
    det: bool,
) -> Result<Prepared> {
    let (train_p, valid_p) = data.paths()?;
    for p in [&train_p, &valid_p] {
        if !p.exists() {
            return Err(missing(&format!("{} does not exist", p.display())));
        }
    }
    let vocab = Vocabulary::load(vocab_path)?;
    let snapshot = cfg.to_toml()?;
    let mut inputs = vec![train_p.as_path(), valid_p.as_path()];
    inputs.extend_from_slice(extra_inputs);
    let (ordered, hashes) = hash_inputs(&inputs)?;
    let vocab_hash = vocab.hash();
    let run_id = run_id
        .map(str::to_string)
        .unwrap_or_else(|| derive_run_id(command, &snapshot, Some(&vocab_hash), &ordered));
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("runs").join(&run_id));
    let mut manifest = RunManifest::new(run_id, snapshot.clone(), cfg.train.seed, det);
    manifest.vocab_hash = Some(vocab_hash);
    manifest.data_hashes = hashes;
    manifest.save(&out)?;
    let loaded = (|| -> Result<(TokenDataset, TokenDataset)> {
        write_text(&out.join("config.toml"), &snapshot)?;
        Ok((
            load_split(&train_p, &vocab, cfg.model.block_size)?,
            load_split(&valid_p, &vocab, cfg.model.block_size)?,
        ))
    })();
    match loaded {
        Ok((train, valid)) => Ok(Prepared {
            vocab,
            train,
            valid,
            manifest,
            out,
        }),
        Err(e) => {
            let failed: Result<()> = Err(e);
            manifest.finalize(&out, &failed)?;
            failed.map(|_| unreachable!())
        }
    }
}

fn finish_fit(p: &mut Prepared, cfg: &RunConfig, fit: Result<train::FitResult>) -> Result<RunSummary> {
    let result = fit.and_then(|fit| {
        fit.best.save(p.out.join(BEST_CHECKPOINT))?;
        fit.last.save(p.out.join(LAST_CHECKPOINT))?;
        let best = fit
            .state
            .history
            .iter()
            .min_by(|a, b| a.valid_loss.total_cmp(&b.valid_loss).then(a.epoch.cmp(&b.epoch)))
            .ok_or_else(|| Error::Data("training ran no epochs".into()))?;
        let summary = RunSummary {
            run_id: p.manifest.run_id.clone(),
            objective: cfg.train.objective().to_string(),
            occlusion_prob: cfg.train.occlusion_prob,
            seed: cfg.train.seed,
            epochs: fit.state.history.len(),
            best_epoch: best.epoch,
            best_valid_loss: best.valid_loss,
            best_valid_perplexity: best.valid_perplexity,
            stop_reason: fit.stop,
        };
        let mut text = serde_json::to_string_pretty(&summary)?;
        text.push('\n');
        write_text(&p.out.join(SUMMARY_FILE), &text)?;
        Ok(summary)
    });
    p.manifest.finalize(&p.out, &result)?;
    let s = result?;
    println!(
        "{}: best valid loss {:.4} (ppl {:.2}) at epoch {} of {}, {} -> {}",
        s.run_id,
        s.best_valid_loss,
        s.best_valid_perplexity,
        s.best_epoch,
        s.epochs,
        s.stop_reason,
        p.out.display()
    );
    Ok(s)
}

pub fn pretrain(a: PretrainArgs, det: bool) -> Result<RunSummary> {
    let vocab_path = required(&a.vocab, "--vocab <file>")?.clone();
    a.data.paths()?;
    let mut cfg = load_config(&a.config)?;
    a.train.apply(&mut cfg.train);
    a.model.apply(&mut cfg.model);
    apply_objective(&mut cfg.train, a.objective, a.train.occlusion_prob.is_some())?;
    let vocab_len = Vocabulary::load(&vocab_path)?.len();
    cfg.model.vocab_size = vocab_len;
    cfg.tokenizer.vocab_size = vocab_len;
    cfg.validate()?;
    let mut p = prepare(
        "pretrain",
        &cfg,
        &a.data,
        &vocab_path,
        &[],
        a.run_id.as_deref(),
        a.out.as_deref(),
        det,
    )?;
    let fit = (|| {
        let ctx = run_context(&p, det);
        let metrics = p.out.join("metrics.jsonl");
        let last = p.out.join(LAST_CHECKPOINT);
        if a.resume && last.exists() {
            let ckpt = Checkpoint::load(&last)?;
            if ckpt.meta.run_id.as_deref() != Some(p.manifest.run_id.as_str()) {
                return Err(Error::Config(format!(
                    "{} belongs to run {}, not {}; the configuration or inputs changed",
                    last.display(),
                    ckpt.meta.run_id.as_deref().unwrap_or("<unknown>"),
                    p.manifest.run_id
                )));
            }
            let mut sink = truncated_jsonl(&metrics, ckpt.meta.epoch)?;
            return train::resume_fit(&ckpt, &p.train, &p.valid, &cfg.train, &ctx, &mut sink);
        }
        let mut sink = fresh_jsonl(&metrics)?;
        let model = Model::init(cfg.model.clone(), cfg.train.seed)?;
        train::fit(model, &p.train, &p.valid, &cfg.train, &ctx, &mut sink)
    })();
    finish_fit(&mut p, &cfg, fit)
}

fn run_context(p: &Prepared, det: bool) -> RunContext {
    RunContext {
        specials: p.vocab.specials(),
        run_id: p.manifest.run_id.clone(),
        vocab_hash: p.manifest.vocab_hash.clone(),
        deterministic: det,
        checkpoint_dir: Some(p.out.clone()),
    }
}

pub fn finetune(a: FinetuneArgs, det: bool) -> Result<RunSummary> {
    let ckpt_path = required(&a.checkpoint, "--checkpoint <file>")?.clone();
    let vocab_path = required(&a.vocab, "--vocab <file>")?.clone();
    a.data.paths()?;
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let mut cfg = load_config(&a.config)?;
    a.train.apply(&mut cfg.train);
    if let Some(k) = a.unfreeze_top_k {
        cfg.train.unfreeze_top_k = k;
    }
    if let Some(i) = a.unfreeze_interval {
        cfg.train.unfreeze_interval_epochs = i;
    }
    apply_objective(&mut cfg.train, a.objective, a.train.occlusion_prob.is_some())?;
    cfg.model = ckpt.meta.model.clone();
    cfg.tokenizer.vocab_size = cfg.model.vocab_size;
    cfg.validate()?;
    let mut p = prepare(
        "finetune",
        &cfg,
        &a.data,
        &vocab_path,
        &[ckpt_path.as_path()],
        a.run_id.as_deref(),
        a.out.as_deref(),
        det,
    )?;
    let fit = (|| {
        let ctx = run_context(&p, det);
        let mut sink = fresh_jsonl(&p.out.join("metrics.jsonl"))?;
        train::finetune(&ckpt, &cfg.model, &p.train, &p.valid, &cfg.train, &ctx, &mut sink)
    })();
    finish_fit(&mut p, &cfg, fit)
}

fn split_name(path: &Path) -> String {
    match path.file_stem().and_then(|s| s.to_str()) {
        Some("valid") => "validation".into(),
        Some(s) => s.to_string(),
        None => "split".into(),
    }
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(required(&a.checkpoint, "--checkpoint <file>")?)?;
    let vocab = Vocabulary::load(required(&a.vocab, "--vocab <file>")?)?;
    let split_path = required(&a.split, "--split <file>")?;
    ckpt.check_compatible(None, Some(&vocab.hash()))?;
    let dataset = load_split(split_path, &vocab, ckpt.meta.model.block_size)?;
    let sentences = if a.bleu {
        if is_packed(split_path) {
            return Err(Error::Config("--bleu needs a text split, not a packed dataset".into()));
        }
        Some(corpus::read_lines(split_path)?)
    } else {
        None
    };
    let bleu_opts = BleuOptions {
        prompt_frac: a.prompt_frac,
        max_n: a.max_n,
        smoothing: a.smoothing_epsilon.map_or(Smoothing::None, Smoothing::Epsilon),
        generation: a.generation.config(GenerationConfig::default().max_new_tokens),
    };
    bleu_opts.generation.validate()?;
    let opts = EvalOptions {
        split: a.split_name.clone().unwrap_or_else(|| split_name(split_path)),
        batch_size: a.batch_size,
        bleu: sentences.as_deref().map(|s| (s, bleu_opts.clone())),
    };
    let (report, protocol) = eval::evaluate(&ckpt, &vocab, &dataset, &opts)?;
    if let (Some(path), Some(p)) = (&a.transcript, &protocol) {
        write_text(path, &p.transcript(&vocab)?)?;
    }
    match &a.out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            report.save(path)?;
            let bleu = report.bleu.map(|b| format!(", BLEU {:.2}%", 100.0 * b)).unwrap_or_default();
            println!(
                "{}: loss {:.4}, perplexity {:.2}{bleu} -> {}",
                report.split,
                report.mean_loss,
                report.perplexity,
                path.display()
            );
        }
        None => print!("{}", report.to_json()?),
    }
    Ok(())
}

fn sweep_cmd(a: SweepArgs, det: bool) -> Result<()> {
    if let Some(path) = &a.init_spec {
        let base = RunConfig::default();
        let spec = SweepSpec::occlusion_default(base.model, base.train);
        write_text(path, &spec.to_toml()?)?;
        println!("wrote {}", path.display());
        return Ok(());
    }
    let spec_path = required(&a.spec, "--spec <file> (or --init-spec <file> to write one)")?;
    let vocab_path = required(&a.vocab, "--vocab <file>")?;
    let (train_p, valid_p) = a.data.paths()?;
    let text = std::fs::read_to_string(spec_path).map_err(|e| Error::io(spec_path, e))?;
    let mut spec = SweepSpec::from_toml(&text)?;
    if let Ok(s) = std::env::var(SEED_ENV) {
        spec.seed = s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {s:?}")))?;
    }
    let vocab = Vocabulary::load(vocab_path)?;
    spec.base_model.vocab_size = vocab.len();
    spec.validate()?;
    let snapshot = spec.to_toml()?;
    let (ordered, hashes) = hash_inputs(&[&train_p, &valid_p])?;
    let run_id = a
        .run_id
        .clone()
        .unwrap_or_else(|| derive_run_id("sweep", &snapshot, Some(&vocab.hash()), &ordered));
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("sweeps"));
    let run_dir = out.join(&run_id);
    let mut manifest = RunManifest::new(run_id.clone(), snapshot, spec.seed, det);
    manifest.vocab_hash = Some(vocab.hash());
    manifest.data_hashes = hashes;
    manifest.save(&run_dir)?;
    let result = (|| -> Result<sweep::SweepOutcome> {
        let block = spec.base_model.block_size;
        let train_ds = load_split(&train_p, &vocab, block)?;
        let valid_ds = load_split(&valid_p, &vocab, block)?;
        let opts = SweepOptions {
            run_id: run_id.clone(),
            out_dir: Some(out.clone()),
            parallel: if det { 1 } else { a.parallel.max(1) },
            deterministic: det,
            vocab_hash: Some(vocab.hash()),
        };
        let mut sink = train::NullSink;
        let outcome = sweep::run_sweep(&spec, &train_ds, &valid_ds, vocab.specials(), &opts, &mut sink)?;
        let report = sweep::sweep_report(&outcome.leaderboard);
        report.save(run_dir.join("report.json"))?;
        write_text(&run_dir.join("table.tsv"), &report.table_tsv())?;
        write_text(&run_dir.join("curves.tsv"), &report.curves_tsv())?;
        Ok(outcome)
    })();
    manifest.finalize(&run_dir, &result)?;
    let outcome = result?;
    for r in &outcome.leaderboard {
        let loss = r.best_valid_loss.map_or("-".to_string(), |l| format!("{l:.4}"));
        println!("trial {:>3}  {loss}  {}", r.trial_id, r.stop_reason);
    }
    println!("best: trial {} -> {}", outcome.best.trial_id, run_dir.display());
    Ok(())
}

fn generate_cmd(a: GenerateArgs) -> Result<()> {
    let ckpt = Checkpoint::load(required(&a.checkpoint, "--checkpoint <file>")?)?;
    let vocab = Vocabulary::load(required(&a.vocab, "--vocab <file>")?)?;
    ckpt.check_compatible(None, Some(&vocab.hash()))?;
    let model = ckpt.model()?;
    let gen = a.generation.config(a.max_new_tokens);
    gen.validate()?;
    let prompt = vocab.encode_ids(&a.prompt);
    let ids = eval::generate(&model, &vocab.specials(), &prompt, &gen)?;
    let full: Vec<_> = prompt.iter().chain(&ids).copied().collect();
    println!("{}", vocab.decode(&full)?);
    Ok(())
}
