//! Seeded random hyperparameter search over learning rate, depth, heads,
//! dropout and occlusion probability, minimizing validation loss.
//!
//! On-disk layout under `out/<run_id>/`:
//!
//! ```text
//! trial_<k>/config.toml   resolved model and training config
//! trial_<k>/metrics.jsonl per-epoch metric records
//! trial_<k>/checkpoint.ckpt  best checkpoint (absent if diverged)
//! trial_<k>/record.json   finished trial record
//! leaderboard.json        records sorted by best validation loss
//! ```
//!
//! A trial directory with `record.json` counts as done, so re-running a
//! sweep into the same directory resumes at the first unfinished trial.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenDataset;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Model, ModelConfig};
use crate::train::{self, EpochRecord, JsonlSink, MemorySink, MetricsSink, RunContext, StopReason, TrainConfig};
use crate::tokenizer::SpecialIds;

const MAX_RESAMPLES: usize = 100;

/// Inclusive range sampled uniformly in log space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRange {
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub trial_count: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub lr: LogRange,
    pub n_layers: Vec<usize>,
    pub n_heads: Vec<usize>,
    pub dropout: Vec<f32>,
    /// `[0.0]` for a standard-objective sweep.
    pub occlusion_prob: Vec<f64>,
    /// Fields not searched over come from here.
    pub base_model: ModelConfig,
    pub base_train: TrainConfig,
}

impl SweepSpec {
    /// Twenty trials over 100 epochs with the tuned optima among the
    /// choices and occlusion at 0.1, 0.3 or 0.5.
    pub fn occlusion_default(base_model: ModelConfig, base_train: TrainConfig) -> Self {
        Self {
            trial_count: 20,
            max_epochs: 100,
            seed: 0,
            lr: LogRange { min: 1e-5, max: 1e-3 },
            n_layers: vec![4, 6, 8],
            n_heads: vec![4, 8],
            dropout: vec![0.1, 0.2, 0.3],
            occlusion_prob: vec![0.1, 0.3, 0.5],
            base_model,
            base_train,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.trial_count == 0 {
            return fail("trial_count must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be at least 1".into());
        }
        if self.seed > train::MAX_SEED {
            return fail(format!("seed must be at most {}, got {}", train::MAX_SEED, self.seed));
        }
        if !(self.lr.min > 0.0 && self.lr.min <= self.lr.max && self.lr.max.is_finite()) {
            return fail(format!(
                "lr range must satisfy 0 < min <= max, got [{}, {}]",
                self.lr.min, self.lr.max
            ));
        }
        for (name, empty) in [
            ("n_layers", self.n_layers.is_empty()),
            ("n_heads", self.n_heads.is_empty()),
            ("dropout", self.dropout.is_empty()),
            ("occlusion_prob", self.occlusion_prob.is_empty()),
        ] {
            if empty {
                return fail(format!("choice set {name} is empty"));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize sweep spec: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::format("sweep spec", e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// The searched values for one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialParams {
    pub lr: f64,
    pub n_layers: usize,
    pub n_heads: usize,
    pub dropout: f32,
    pub occlusion_prob: f64,
}

impl TrialParams {
    /// Name/value pairs for tabular output.
    pub fn columns(&self) -> BTreeMap<String, f64> {
        BTreeMap::from([
            ("lr".to_string(), self.lr),
            ("n_layers".to_string(), self.n_layers as f64),
            ("n_heads".to_string(), self.n_heads as f64),
            // through the shortest decimal so that 0.1f32 reads as 0.1
            ("dropout".to_string(), self.dropout.to_string().parse().unwrap_or(self.dropout as f64)),
            ("occlusion_prob".to_string(), self.occlusion_prob),
        ])
    }

    pub fn apply(&self, spec: &SweepSpec, trial_id: usize) -> (ModelConfig, TrainConfig) {
        let model = ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            dropout: self.dropout,
            ..spec.base_model.clone()
        };
        let train = TrainConfig {
            base_lr: self.lr,
            occlusion_prob: self.occlusion_prob,
            max_epochs: spec.max_epochs,
            seed: trial_seed(spec.seed, trial_id),
            ..spec.base_train.clone()
        };
        (model, train)
    }
}

fn trial_seed(seed: u64, trial_id: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial_id as u64 + (1 << 32));
    rng.gen::<u64>() & train::MAX_SEED
}

/// Draws trial `trial_index` of the sweep. Depends only on the spec seed and
/// the index. Head counts that do not divide `d_model` are redrawn.
pub fn sample_trial(spec: &SweepSpec, trial_index: usize) -> Result<TrialParams> {
    spec.validate()?;
    if trial_index >= spec.trial_count {
        return Err(Error::Config(format!(
            "trial index {trial_index} is outside a sweep of {} trials",
            spec.trial_count
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(trial_index as u64);
    let d = spec.base_model.d_model;
    let (lo, hi) = (spec.lr.min.ln(), spec.lr.max.ln());
    for _ in 0..MAX_RESAMPLES {
        let u: f64 = rng.gen();
        let params = TrialParams {
            lr: (lo + u * (hi - lo)).exp().clamp(spec.lr.min, spec.lr.max),
            n_layers: *spec.n_layers.choose(&mut rng).expect("validated non-empty"),
            n_heads: *spec.n_heads.choose(&mut rng).expect("validated non-empty"),
            dropout: *spec.dropout.choose(&mut rng).expect("validated non-empty"),
            occlusion_prob: *spec.occlusion_prob.choose(&mut rng).expect("validated non-empty"),
        };
        let (model, train) = params.apply(spec, trial_index);
        if model.validate().is_ok() && train.validate().is_ok() {
            return Ok(params);
        }
    }
    Err(Error::Config(format!(
        "no valid configuration after {MAX_RESAMPLES} draws (d_model {d} against heads {:?})",
        spec.n_heads
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: usize,
    pub params: TrialParams,
    pub history: Vec<EpochRecord>,
    pub best_valid_loss: Option<f64>,
    pub best_valid_perplexity: Option<f64>,
    pub best_epoch: Option<usize>,
    pub stop_reason: StopReason,
    pub wall_ms: u64,
    pub note: Option<String>,
}

impl TrialRecord {
    fn from_history(
        trial_id: usize,
        params: TrialParams,
        history: Vec<EpochRecord>,
        stop_reason: StopReason,
        wall_ms: u64,
        note: Option<String>,
    ) -> Self {
        let best = history
            .iter()
            .min_by(|a, b| a.valid_loss.total_cmp(&b.valid_loss).then(a.epoch.cmp(&b.epoch)));
        Self {
            trial_id,
            best_valid_loss: best.map(|r| r.valid_loss),
            best_valid_perplexity: best.map(|r| r.valid_perplexity),
            best_epoch: best.map(|r| r.epoch),
            params,
            history,
            stop_reason,
            wall_ms,
            note,
        }
    }

    pub fn completed(&self) -> bool {
        self.stop_reason != StopReason::Diverged
    }
}

/// Ascending by best validation loss; trials with no finished epoch go
/// last. Ties fall back to trial id.
pub fn leaderboard(records: &[TrialRecord]) -> Vec<TrialRecord> {
    let mut out = records.to_vec();
    out.sort_by(|a, b| {
        let key = |r: &TrialRecord| r.best_valid_loss.unwrap_or(f64::INFINITY);
        key(a).total_cmp(&key(b)).then(a.trial_id.cmp(&b.trial_id))
    });
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOptions {
    pub run_id: String,
    /// Results directory; `out/<run_id>/` is created. In-memory when `None`.
    pub out_dir: Option<PathBuf>,
    /// Trials run on this many worker threads; 1 runs them in order.
    pub parallel: usize,
    pub deterministic: bool,
    pub vocab_hash: Option<String>,
}

impl SweepOptions {
    pub fn new(run_id: impl Into<String>) -> Self {
        Self {
            run_id: run_id.into(),
            out_dir: None,
            parallel: 1,
            deterministic: false,
            vocab_hash: None,
        }
    }

    fn run_dir(&self) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| d.join(&self.run_id))
    }
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub best: TrialRecord,
    pub leaderboard: Vec<TrialRecord>,
    /// Best checkpoint of the winning trial, when it ran in this process or
    /// could be read back from the results directory.
    pub best_checkpoint: Option<Checkpoint>,
}

struct TrialOutput {
    record: TrialRecord,
    metrics: Vec<train::MetricRecord>,
    checkpoint: Option<Checkpoint>,
}

fn run_trial(
    spec: &SweepSpec,
    trial_id: usize,
    train_ds: &TokenDataset,
    valid_ds: &TokenDataset,
    specials: SpecialIds,
    opts: &SweepOptions,
) -> Result<TrialOutput> {
    let params = sample_trial(spec, trial_id)?;
    let (model_cfg, train_cfg) = params.apply(spec, trial_id);
    let started = Instant::now();
    let model = Model::init(model_cfg, train_cfg.seed)?;
    let ctx = RunContext {
        specials,
        run_id: format!("{}/trial_{trial_id}", opts.run_id),
        vocab_hash: opts.vocab_hash.clone(),
        deterministic: opts.deterministic,
        checkpoint_dir: None,
    };
    let mut sink = MemorySink::default();
    let result = train::fit(model, train_ds, valid_ds, &train_cfg, &ctx, &mut sink);
    let wall_ms = if opts.deterministic { 0 } else { started.elapsed().as_millis() as u64 };
    let (record, checkpoint) = match result {
        Ok(fit) => (
            TrialRecord::from_history(trial_id, params, fit.state.history, fit.stop, wall_ms, None),
            Some(fit.best),
        ),
        Err(Error::Diverged(d)) => (
            TrialRecord::from_history(
                trial_id,
                params,
                d.history.clone(),
                StopReason::Diverged,
                wall_ms,
                Some(d.to_string()),
            ),
            None,
        ),
        Err(e) => return Err(e),
    };
    Ok(TrialOutput {
        record,
        metrics: sink.records,
        checkpoint,
    })
}

fn write_trial(dir: &Path, spec: &SweepSpec, out: &TrialOutput) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (model, train) = out.record.params.apply(spec, out.record.trial_id);
    #[derive(Serialize)]
    struct Resolved<'a> {
        model: &'a ModelConfig,
        train: &'a TrainConfig,
    }
    let config = toml::to_string(&Resolved {
        model: &model,
        train: &train,
    })
    .map_err(|e| Error::Config(format!("cannot serialize trial config: {e}")))?;
    let path = dir.join("config.toml");
    std::fs::write(&path, config).map_err(|e| Error::io(&path, e))?;

    let path = dir.join("metrics.jsonl");
    if path.exists() {
        std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
    }
    let mut sink = JsonlSink::create(&path)?;
    for m in &out.metrics {
        sink.record(m)?;
    }
    sink.finish()?;
    if let Some(ck) = &out.checkpoint {
        ck.save(dir.join("checkpoint.ckpt"))?;
    }
    // written last: its presence marks the trial as done
    let path = dir.join("record.json");
    std::fs::write(&path, serde_json::to_string_pretty(&out.record)?).map_err(|e| Error::io(&path, e))
}

fn read_record(dir: &Path) -> Result<Option<TrialRecord>> {
    let path = dir.join("record.json");
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

/// Runs every trial not already recorded in the results directory. Diverged
/// trials are recorded, not fatal; the sweep fails only if no trial
/// completes.
pub fn run_sweep(
    spec: &SweepSpec,
    train_ds: &TokenDataset,
    valid_ds: &TokenDataset,
    specials: SpecialIds,
    opts: &SweepOptions,
    sink: &mut dyn MetricsSink,
) -> Result<SweepOutcome> {
    spec.validate()?;
    if train_ds.num_targets() == 0 || valid_ds.num_targets() == 0 {
        return Err(Error::Data("sweep needs non-empty train and validation data".into()));
    }
    let run_dir = opts.run_dir();
    if let Some(d) = &run_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let trial_dir = |k: usize| run_dir.as_ref().map(|d| d.join(format!("trial_{k}")));

    let mut done: BTreeMap<usize, TrialRecord> = BTreeMap::new();
    for k in 0..spec.trial_count {
        if let Some(dir) = trial_dir(k) {
            if let Some(rec) = read_record(&dir)? {
                done.insert(k, rec);
            }
        }
    }
    let pending: Vec<usize> = (0..spec.trial_count).filter(|k| !done.contains_key(k)).collect();

    let mut checkpoints: BTreeMap<usize, Checkpoint> = BTreeMap::new();
    let mut finish = |out: TrialOutput, sink: &mut dyn MetricsSink| -> Result<()> {
        let k = out.record.trial_id;
        if let Some(dir) = trial_dir(k) {
            write_trial(&dir, spec, &out)?;
        }
        for m in &out.metrics {
            sink.record(m)?;
        }
        if let Some(ck) = out.checkpoint {
            checkpoints.insert(k, ck);
        }
        done.insert(k, out.record);
        Ok(())
    };

    if opts.parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.parallel)
            .build()
            .map_err(|e| Error::Sweep(format!("cannot start worker pool: {e}")))?;
        let outputs: Vec<Result<TrialOutput>> = pool.install(|| {
            pending
                .par_iter()
                .map(|&k| run_trial(spec, k, train_ds, valid_ds, specials, opts))
                .collect()
        });
        // merged in trial order
        for out in outputs {
            finish(out?, sink)?;
        }
    } else {
        for &k in &pending {
            let out = run_trial(spec, k, train_ds, valid_ds, specials, opts)?;
            finish(out, sink)?;
        }
    }
    sink.finish()?;

    let records: Vec<TrialRecord> = done.into_values().collect();
    let board = leaderboard(&records);
    if let Some(d) = &run_dir {
        let path = d.join("leaderboard.json");
        std::fs::write(&path, serde_json::to_string_pretty(&board)?).map_err(|e| Error::io(&path, e))?;
    }
    let best = board
        .iter()
        .find(|r| r.completed() && r.best_valid_loss.is_some())
        .cloned()
        .ok_or_else(|| Error::Sweep(format!("none of {} trials completed", records.len())))?;
    let best_checkpoint = match checkpoints.remove(&best.trial_id) {
        Some(ck) => Some(ck),
        None => match trial_dir(best.trial_id).map(|d| d.join("checkpoint.ckpt")) {
            Some(p) if p.exists() => Some(Checkpoint::load(p)?),
            _ => None,
        },
    };
    Ok(SweepOutcome {
        best,
        leaderboard: board,
        best_checkpoint,
    })
}

/// One row per trial for external plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub trial_id: usize,
    pub values: BTreeMap<String, f64>,
    pub best_valid_loss: Option<f64>,
    pub best_valid_perplexity: Option<f64>,
    pub stop_reason: StopReason,
}

/// Per-trial table plus the full records (whose histories are the curves).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
    pub trials: Vec<TrialRecord>,
}

pub fn sweep_report(records: &[TrialRecord]) -> SweepReport {
    let rows: Vec<ReportRow> = records
        .iter()
        .map(|r| ReportRow {
            trial_id: r.trial_id,
            values: r.params.columns(),
            best_valid_loss: r.best_valid_loss,
            best_valid_perplexity: r.best_valid_perplexity,
            stop_reason: r.stop_reason,
        })
        .collect();
    let mut columns: Vec<String> = rows.iter().flat_map(|r| r.values.keys().cloned()).collect();
    columns.sort();
    columns.dedup();
    SweepReport {
        columns,
        rows,
        trials: records.to_vec(),
    }
}

impl SweepReport {
    /// Tab-separated table: trial id, sampled values, best loss and
    /// perplexity, stop reason.
    pub fn table_tsv(&self) -> String {
        let mut out = String::from("trial_id");
        for c in &self.columns {
            out.push('\t');
            out.push_str(c);
        }
        out.push_str("\tbest_valid_loss\tbest_valid_perplexity\tstop_reason\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "-".into());
        for r in &self.rows {
            out.push_str(&r.trial_id.to_string());
            for c in &self.columns {
                out.push('\t');
                out.push_str(&r.values.get(c).map(|v| v.to_string()).unwrap_or_else(|| "-".into()));
            }
            out.push_str(&format!(
                "\t{}\t{}\t{}\n",
                opt(r.best_valid_loss),
                opt(r.best_valid_perplexity),
                r.stop_reason
            ));
        }
        out
    }

    /// Tab-separated curves: one line per (trial, epoch).
    pub fn curves_tsv(&self) -> String {
        let mut out = String::from("trial_id\tepoch\ttrain_loss\tvalid_loss\tvalid_perplexity\tlr\n");
        for t in &self.trials {
            for e in &t.history {
                out.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\n",
                    t.trial_id, e.epoch, e.train_loss, e.valid_loss, e.valid_perplexity, e.lr
                ));
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
