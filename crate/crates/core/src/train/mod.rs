//! Training: the standard causal objective and its occlusion-augmented
//! variant, AdamW with a warmup-then-decay schedule, patience-based early
//! stopping, and gradual-unfreezing fine-tuning.
//!
//! Randomness is derived, never carried: the dropout and occlusion stream
//! for update `s` comes from `(seed, s)` and the shuffle for epoch `e` from
//! `(seed, e)`, so a run restored from a checkpoint continues bit-identically.

mod metrics;
mod occlusion;
mod optim;

pub use metrics::{ChannelSink, JsonlSink, MemorySink, MetricRecord, MetricsSink, NullSink};
pub use occlusion::{occlude_batch, Occluded};
pub use optim::{adamw_update, clip_grad_norm, lr_at, Moments, BETA1, BETA2, EPS};

use std::fmt;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, TokenDataset};
use crate::error::{Error, Result};
use crate::eval;
use crate::model::{Checkpoint, CheckpointMeta, FreezeMask, Model, ModelConfig, ParameterSet, ResumeBlob};
use crate::tensor::Tape;
use crate::tokenizer::{SpecialIds, TokenId};

/// Largest accepted seed; config files are TOML, whose integers are i64.
pub const MAX_SEED: u64 = i64::MAX as u64;

/// File names written into [`RunContext::checkpoint_dir`].
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub base_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub patience: usize,
    /// Probability of occluding each eligible input token; 0 gives the
    /// standard causal objective.
    pub occlusion_prob: f64,
    /// Loss weight for targets whose input token was occluded.
    pub occlusion_loss_weight: f64,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    pub unfreeze_top_k: usize,
    pub unfreeze_interval_epochs: usize,
    /// A run whose epoch train loss stays above this for
    /// `divergence_epochs` consecutive epochs is declared diverged.
    pub divergence_loss: f64,
    pub divergence_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            max_epochs: 100,
            base_lr: 2e-4,
            warmup_fraction: 0.1,
            weight_decay: 1e-2,
            patience: 5,
            occlusion_prob: 0.0,
            occlusion_loss_weight: 1.0,
            seed: 0,
            grad_clip: None,
            unfreeze_top_k: 2,
            unfreeze_interval_epochs: 2,
            divergence_loss: 20.0,
            divergence_epochs: 3,
        }
    }
}

impl TrainConfig {
    /// The tuned optimum: batch 512, lr 2e-4, up to 100 epochs, and
    /// occlusion at 0.3 when `occlusion` is set.
    pub fn table3(occlusion: bool) -> Self {
        Self {
            batch_size: 512,
            base_lr: 2e-4,
            max_epochs: 100,
            occlusion_prob: if occlusion { 0.3 } else { 0.0 },
            ..Self::default()
        }
    }

    /// The starting point of the search, lr 1e-4.
    pub fn sweep_start() -> Self {
        Self {
            base_lr: 1e-4,
            ..Self::table3(false)
        }
    }

    /// Fine-tuning defaults: 50 epochs, top two blocks first, one more
    /// block every two epochs.
    pub fn finetune_default() -> Self {
        Self {
            max_epochs: 50,
            unfreeze_top_k: 2,
            unfreeze_interval_epochs: 2,
            ..Self::default()
        }
    }

    pub fn objective(&self) -> &'static str {
        if self.occlusion_prob > 0.0 {
            "occlusion"
        } else {
            "standard"
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return fail(format!("occlusion_prob must lie in [0, 1], got {}", self.occlusion_prob));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return fail(format!("warmup_fraction must lie in [0, 1), got {}", self.warmup_fraction));
        }
        if self.patience == 0 {
            return fail("patience must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be at least 1".into());
        }
        if self.seed > MAX_SEED {
            return fail(format!("seed must be at most {MAX_SEED}, got {}", self.seed));
        }
        if self.weight_decay < 0.0 {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.occlusion_loss_weight < 0.0 {
            return fail("occlusion_loss_weight must be non-negative".into());
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return fail(format!("grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }

    fn validate_finetune(&self) -> Result<()> {
        self.validate()?;
        if self.unfreeze_top_k == 0 {
            return Err(Error::Config("unfreeze_top_k must be at least 1".into()));
        }
        if self.unfreeze_interval_epochs == 0 {
            return Err(Error::Config("unfreeze_interval_epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Number of trainable blocks in 0-based `epoch` under gradual unfreezing.
pub fn unfrozen_blocks(n_layers: usize, top_k: usize, interval: usize, epoch: usize) -> usize {
    (top_k + epoch / interval.max(1)).min(n_layers)
}

/// Summary of one completed epoch. Epochs are numbered from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub train_perplexity: f64,
    pub valid_loss: f64,
    pub valid_perplexity: f64,
    pub lr: f64,
    pub trainable_blocks: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
    Diverged,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::EarlyStop => "early_stop",
            StopReason::MaxEpochs => "max_epochs",
            StopReason::Diverged => "diverged",
        })
    }
}

/// Why and where a run blew up, with the history up to that point.
#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub epoch: usize,
    pub step: u64,
    pub batch_index: Option<usize>,
    pub lr: f64,
    pub loss: f64,
    pub reason: String,
    pub history: Vec<EpochRecord>,
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "training diverged in epoch {} at step {}", self.epoch, self.step)?;
        if let Some(b) = self.batch_index {
            write!(f, " (batch {b})")?;
        }
        write!(f, " with lr {:e}: {}", self.lr, self.reason)
    }
}

/// Patience counter over validation losses. Only a strictly lower loss
/// counts as an improvement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: Option<usize>,
    pub since_improvement: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: None,
            since_improvement: 0,
        }
    }

    /// Records `loss` for `epoch`; returns whether it is a new best.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if self.best.is_none_or(|b| loss < b) {
            self.best = Some(loss);
            self.best_epoch = Some(epoch);
            self.since_improvement = 0;
            true
        } else {
            self.since_improvement += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_improvement >= self.patience
    }
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Optimizer updates applied so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub total_steps: u64,
    pub seed: u64,
    pub moments: Vec<Moments>,
    pub early: EarlyStopping,
    pub freeze: FreezeMask,
    pub history: Vec<EpochRecord>,
    pub epochs_above_divergence: usize,
}

impl TrainState {
    pub fn new(params: &ParameterSet, cfg: &TrainConfig, n_layers: usize, total_steps: u64) -> Self {
        Self {
            step: 0,
            epoch: 0,
            total_steps,
            seed: cfg.seed,
            moments: params.tensors().iter().map(|t| Moments::zeros(t.numel())).collect(),
            early: EarlyStopping::new(cfg.patience),
            freeze: FreezeMask::all_trainable(n_layers),
            history: Vec::new(),
            epochs_above_divergence: 0,
        }
    }

    pub fn best_valid_loss(&self) -> Option<f64> {
        self.early.best
    }

    pub fn epochs_since_improvement(&self) -> usize {
        self.early.since_improvement
    }

    /// Serializes counters as JSON and moments as tensors named
    /// `adam.m.<param>` / `adam.v.<param>`.
    pub fn to_resume(&self, params: &ParameterSet) -> Result<ResumeBlob> {
        let json = serde_json::to_string(self)?;
        let mut tensors = Vec::with_capacity(2 * params.len());
        for ((name, t), mom) in params.iter().zip(&self.moments) {
            let shape = t.shape().to_vec();
            tensors.push((format!("adam.m.{name}"), crate::tensor::Tensor::new(shape.clone(), mom.m.clone())?));
            tensors.push((format!("adam.v.{name}"), crate::tensor::Tensor::new(shape, mom.v.clone())?));
        }
        Ok(ResumeBlob { json, tensors })
    }

    pub fn from_resume(blob: &ResumeBlob, params: &ParameterSet) -> Result<Self> {
        let mut state: TrainState = serde_json::from_str(&blob.json)
            .map_err(|e| Error::Checkpoint(format!("bad resume state: {e}")))?;
        if state.moments.len() != params.len() || blob.tensors.len() != 2 * params.len() {
            return Err(Error::Checkpoint("resume state does not match the parameter set".into()));
        }
        for (i, ((name, t), mom)) in params.iter().zip(state.moments.iter_mut()).enumerate() {
            let (mn, m) = &blob.tensors[2 * i];
            let (vn, v) = &blob.tensors[2 * i + 1];
            if *mn != format!("adam.m.{name}") || *vn != format!("adam.v.{name}") {
                return Err(Error::Checkpoint(format!("resume moments out of order at {name}")));
            }
            if m.shape() != t.shape() || v.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("moment shape mismatch for {name}")));
            }
            mom.m = m.data().to_vec();
            mom.v = v.data().to_vec();
        }
        Ok(state)
    }
}

/// Dropout and occlusion randomness for update `step`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_mul(2));
    rng
}

/// Window visiting order for 0-based `epoch`.
pub fn epoch_order(n_windows: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch as u64).wrapping_mul(2) + 1);
    let mut order: Vec<usize> = (0..n_windows).collect();
    order.shuffle(&mut rng);
    order
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutput {
    /// Weighted mean training loss of the batch, before the update.
    pub loss: f64,
    pub lr: f64,
    /// Total weight over loss-bearing targets (the token count when no
    /// extra weight is put on occluded positions).
    pub weight: f64,
    pub occluded: usize,
}

/// Ids the occlusion step must never replace.
fn protected_ids(specials: &SpecialIds) -> [TokenId; 2] {
    [specials.pad, specials.eot]
}

/// One optimizer update: optional occlusion of the inputs, forward with
/// dropout, weighted cross-entropy over unpadded targets, backward, then
/// AdamW on the parameters that `state.freeze` leaves trainable.
pub fn train_step(
    model: &mut Model,
    state: &mut TrainState,
    batch: &Batch,
    cfg: &TrainConfig,
    specials: &SpecialIds,
) -> Result<StepOutput> {
    if !state.freeze.any_trainable() {
        return Err(Error::Contract("every layer is frozen".into()));
    }
    let lr = lr_at(state.step + 1, state.total_steps, cfg.base_lr, cfg.warmup_fraction)?;
    let mut rng = step_rng(state.seed, state.step);
    let (b, t) = (batch.batch, batch.seq);

    let occ = occlude_batch(
        &batch.inputs,
        cfg.occlusion_prob,
        specials.occ,
        &protected_ids(specials),
        &mut rng,
    )?;
    // target i predicts input i+1, so it carries the occlusion weight
    // when that input was hidden
    let mut weights = vec![0.0f32; b * t];
    for row in 0..b {
        for i in 0..t {
            let at = row * t + i;
            if batch.mask[at] {
                let hidden = i + 1 < t && occ.flags[at + 1];
                weights[at] = if hidden { cfg.occlusion_loss_weight as f32 } else { 1.0 };
            }
        }
    }
    let weight: f64 = weights.iter().map(|&w| w as f64).sum();
    let targets: Vec<usize> = batch.targets.iter().map(|&x| x as usize).collect();

    let mut tape = Tape::new();
    let forward = model
        .bind(&mut tape, Some(&state.freeze))
        .and_then(|bound| {
            let logits = model.forward_on_tape(&mut tape, &bound, &occ.inputs, b, t, true, &mut rng)?;
            Ok((bound, logits))
        });
    let (bound, logits) = match forward {
        Ok(v) => v,
        Err(e) => match non_finite_op(&e) {
            Some(op) => return Err(diverged(state, lr, f64::NAN, format!("non-finite values in {op}"))),
            None => return Err(e),
        },
    };
    let loss_var = match tape.weighted_cross_entropy(logits, &targets, &weights) {
        Ok(v) => v,
        Err(crate::tensor::TensorError::NonFinite { op }) => {
            return Err(diverged(state, lr, f64::NAN, format!("non-finite values in {op}")))
        }
        Err(e) => return Err(e.into()),
    };
    let loss = tape.value(loss_var).item().unwrap_or(f32::NAN) as f64;
    if !loss.is_finite() {
        return Err(diverged(state, lr, loss, "non-finite training loss".into()));
    }
    if let Err(e) = tape.backward(loss_var) {
        return match e {
            crate::tensor::TensorError::NonFinite { op } => {
                Err(diverged(state, lr, loss, format!("non-finite gradient in {op}")))
            }
            e => Err(e.into()),
        };
    }

    let mut slots = Vec::new();
    let mut grads = Vec::new();
    for (i, &var) in bound.vars.iter().enumerate() {
        if tape.requires_grad(var) {
            let g = tape
                .take_grad(var)
                .unwrap_or_else(|| vec![0.0; model.params.tensors()[i].numel()]);
            slots.push(i);
            grads.push(g);
        }
    }
    if let Some(max_norm) = cfg.grad_clip {
        clip_grad_norm(&mut grads, max_norm);
    }
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(diverged(state, lr, loss, "non-finite gradient".into()));
    }
    let tensors = model.params.tensors_mut();
    for (slot, grad) in slots.into_iter().zip(grads) {
        let param = &mut tensors[slot];
        let wd = if param.ndim() >= 2 { cfg.weight_decay } else { 0.0 };
        adamw_update(param.data_mut(), &grad, &mut state.moments[slot], lr, wd);
    }
    state.step += 1;
    Ok(StepOutput {
        loss,
        lr,
        weight,
        occluded: occ.count(),
    })
}

fn diverged(state: &TrainState, lr: f64, loss: f64, reason: String) -> Error {
    Error::Diverged(Box::new(Divergence {
        epoch: state.epoch + 1,
        step: state.step,
        batch_index: None,
        lr,
        loss,
        reason,
        history: state.history.clone(),
    }))
}

/// Produces the per-epoch validation loss.
pub trait Validator {
    fn validation_loss(&mut self, model: &Model, epoch: usize) -> Result<f64>;
}

/// Token-mean loss over a validation dataset.
pub struct DatasetValidator<'a> {
    pub dataset: &'a TokenDataset,
    pub batch_size: usize,
}

impl Validator for DatasetValidator<'_> {
    fn validation_loss(&mut self, model: &Model, _epoch: usize) -> Result<f64> {
        Ok(eval::perplexity(model, self.dataset, self.batch_size)?.mean_loss)
    }
}

/// Replays a fixed list of validation losses; for exercising the stopping
/// logic without depending on training noise.
pub struct ScriptedValidator {
    pub losses: Vec<f64>,
}

impl Validator for ScriptedValidator {
    fn validation_loss(&mut self, _model: &Model, epoch: usize) -> Result<f64> {
        self.losses
            .get(epoch - 1)
            .copied()
            .ok_or_else(|| Error::Contract(format!("no scripted loss for epoch {epoch}")))
    }
}

/// Provenance and special ids shared by [`fit`] and [`finetune`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunContext {
    pub specials: SpecialIds,
    pub run_id: String,
    pub vocab_hash: Option<String>,
    /// Zero out wall-clock fields so that logs are reproducible.
    pub deterministic: bool,
    /// When set, the best checkpoint is written on every improvement and the
    /// last one, with optimizer state, after every epoch, so an interrupted
    /// run can be continued with [`resume_fit`].
    pub checkpoint_dir: Option<PathBuf>,
}

impl RunContext {
    pub fn new(specials: SpecialIds, run_id: impl Into<String>) -> Self {
        Self {
            specials,
            run_id: run_id.into(),
            vocab_hash: None,
            deterministic: false,
            checkpoint_dir: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Parameters from the epoch with the lowest validation loss.
    pub best: Checkpoint,
    /// Parameters and optimizer state after the final epoch.
    pub last: Checkpoint,
    pub state: TrainState,
    pub stop: StopReason,
}

impl FitResult {
    pub fn best_model(&self) -> Result<Model> {
        self.best.model()
    }
}

#[derive(Debug, Clone, Copy)]
struct Unfreeze {
    top_k: usize,
    interval: usize,
}

/// Trains until early stopping or `max_epochs` and returns the best
/// checkpoint by validation loss.
pub fn fit(
    model: Model,
    train: &TokenDataset,
    valid: &TokenDataset,
    cfg: &TrainConfig,
    ctx: &RunContext,
    sink: &mut dyn MetricsSink,
) -> Result<FitResult> {
    if valid.num_targets() == 0 {
        return Err(Error::Data("validation dataset has no targets".into()));
    }
    let mut validator = DatasetValidator {
        dataset: valid,
        batch_size: cfg.batch_size,
    };
    fit_with(model, train, &mut validator, cfg, ctx, sink, None)
}

/// [`fit`] with a custom validation source and an optional state to resume
/// from (at an epoch boundary).
pub fn fit_with(
    model: Model,
    train: &TokenDataset,
    validator: &mut dyn Validator,
    cfg: &TrainConfig,
    ctx: &RunContext,
    sink: &mut dyn MetricsSink,
    resume: Option<TrainState>,
) -> Result<FitResult> {
    cfg.validate()?;
    run(model, train, validator, cfg, ctx, sink, resume, None, None)
}

/// Continues a run from a checkpoint that carries optimizer state.
pub fn resume_fit(
    checkpoint: &Checkpoint,
    train: &TokenDataset,
    valid: &TokenDataset,
    cfg: &TrainConfig,
    ctx: &RunContext,
    sink: &mut dyn MetricsSink,
) -> Result<FitResult> {
    let blob = checkpoint
        .resume
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("checkpoint carries no optimizer state".into()))?;
    checkpoint.check_compatible(None, ctx.vocab_hash.as_deref())?;
    let state = TrainState::from_resume(blob, &checkpoint.params)?;
    let mut validator = DatasetValidator {
        dataset: valid,
        batch_size: cfg.batch_size,
    };
    cfg.validate()?;
    // the best weights so far live in the checkpoint directory, if any
    let prior_best = match &ctx.checkpoint_dir {
        Some(dir) if dir.join(BEST_CHECKPOINT).exists() => {
            let best = Checkpoint::load(dir.join(BEST_CHECKPOINT))?;
            (state.early.best_epoch == Some(best.meta.epoch) && best.meta.valid_loss.is_some()).then_some(best)
        }
        _ => None,
    };
    run(checkpoint.model()?, train, &mut validator, cfg, ctx, sink, Some(state), None, prior_best)
}

/// Fine-tunes a pretrained checkpoint with gradual unfreezing: the top
/// `unfreeze_top_k` blocks (and the final norm) train first, one more block
/// joins every `unfreeze_interval_epochs`, and the embeddings join with the
/// bottom block. Stopping follows [`fit`].
pub fn finetune(
    pretrained: &Checkpoint,
    expected: &ModelConfig,
    train: &TokenDataset,
    valid: &TokenDataset,
    cfg: &TrainConfig,
    ctx: &RunContext,
    sink: &mut dyn MetricsSink,
) -> Result<FitResult> {
    let mut validator = DatasetValidator {
        dataset: valid,
        batch_size: cfg.batch_size,
    };
    finetune_with(pretrained, expected, train, &mut validator, cfg, ctx, sink)
}

pub fn finetune_with(
    pretrained: &Checkpoint,
    expected: &ModelConfig,
    train: &TokenDataset,
    validator: &mut dyn Validator,
    cfg: &TrainConfig,
    ctx: &RunContext,
    sink: &mut dyn MetricsSink,
) -> Result<FitResult> {
    cfg.validate_finetune()?;
    pretrained.check_compatible(Some(expected), ctx.vocab_hash.as_deref())?;
    let schedule = Unfreeze {
        top_k: cfg.unfreeze_top_k,
        interval: cfg.unfreeze_interval_epochs,
    };
    run(pretrained.model()?, train, validator, cfg, ctx, sink, None, Some(schedule), None)
}

fn non_finite_op(e: &Error) -> Option<&'static str> {
    match e {
        Error::Tensor(crate::tensor::TensorError::NonFinite { op }) => Some(op),
        _ => None,
    }
}

#[allow(clippy::too_many_arguments)]
fn run(
    mut model: Model,
    train: &TokenDataset,
    validator: &mut dyn Validator,
    cfg: &TrainConfig,
    ctx: &RunContext,
    sink: &mut dyn MetricsSink,
    resume: Option<TrainState>,
    schedule: Option<Unfreeze>,
    prior_best: Option<Checkpoint>,
) -> Result<FitResult> {
    if train.block_size > model.config.block_size {
        return Err(Error::Config(format!(
            "dataset windows of {} exceed the model block size {}",
            train.block_size, model.config.block_size
        )));
    }
    let per_epoch = train
        .windows
        .iter()
        .filter(|w| w.valid > 0)
        .count()
        .div_ceil(cfg.batch_size) as u64;
    if per_epoch == 0 {
        return Err(Error::Data("training dataset has no targets".into()));
    }
    let n_layers = model.config.n_layers;
    let mut state = match resume {
        Some(s) => s,
        None => TrainState::new(&model.params, cfg, n_layers, per_epoch * cfg.max_epochs as u64),
    };
    let started = Instant::now();
    let wall = |ctx: &RunContext| {
        if ctx.deterministic {
            0
        } else {
            started.elapsed().as_millis() as u64
        }
    };
    let model_config = model.config.clone();
    let meta = |epoch: usize, step: u64, valid: Option<f64>| CheckpointMeta {
        vocab_hash: ctx.vocab_hash.clone(),
        run_id: Some(ctx.run_id.clone()),
        epoch,
        step,
        valid_loss: valid,
        objective: Some(cfg.objective().to_string()),
        occlusion_prob: Some(cfg.occlusion_prob),
        ..CheckpointMeta::new(model_config.clone())
    };
    let (mut best_params, mut best_meta) = match prior_best {
        Some(cp) => {
            let m = (cp.meta.epoch, cp.meta.step, cp.meta.valid_loss.unwrap_or(f64::INFINITY));
            (cp.params, Some(m))
        }
        None => (model.params.clone(), None),
    };
    let mut stop = StopReason::MaxEpochs;

    while state.epoch < cfg.max_epochs {
        let epoch0 = state.epoch;
        state.freeze = match schedule {
            Some(s) => FreezeMask::top_blocks(n_layers, unfrozen_blocks(n_layers, s.top_k, s.interval, epoch0)),
            None => FreezeMask::all_trainable(n_layers),
        };
        let order = epoch_order(train.len(), state.seed, epoch0);
        let batches = train.batches(cfg.batch_size, &order);
        let (mut loss_sum, mut weight_sum, mut lr) = (0.0f64, 0.0f64, 0.0f64);
        for (bi, batch) in batches.iter().enumerate() {
            let out = train_step(&mut model, &mut state, batch, cfg, &ctx.specials).map_err(|e| match e {
                Error::Diverged(mut d) => {
                    d.batch_index = Some(bi);
                    Error::Diverged(d)
                }
                e => e,
            })?;
            loss_sum += out.loss * out.weight;
            weight_sum += out.weight;
            lr = out.lr;
        }
        let train_loss = loss_sum / weight_sum;
        let epoch = epoch0 + 1;
        let valid_loss = match validator.validation_loss(&model, epoch) {
            Ok(l) => l,
            Err(e) if non_finite_op(&e).is_some() => f64::NAN,
            Err(e) => return Err(e),
        };
        if !valid_loss.is_finite() {
            return Err(Error::Diverged(Box::new(Divergence {
                epoch,
                step: state.step,
                batch_index: None,
                lr,
                loss: valid_loss,
                reason: "non-finite validation loss".into(),
                history: state.history.clone(),
            })));
        }
        let record = EpochRecord {
            epoch,
            step: state.step,
            train_loss,
            train_perplexity: train_loss.exp(),
            valid_loss,
            valid_perplexity: valid_loss.exp(),
            lr,
            trainable_blocks: state.freeze.trainable_blocks(),
        };
        for (split, loss) in [("train", train_loss), ("valid", valid_loss)] {
            sink.record(&MetricRecord {
                run_id: ctx.run_id.clone(),
                epoch,
                step: state.step,
                split: split.into(),
                loss,
                perplexity: loss.exp(),
                lr,
                occlusion_prob: cfg.occlusion_prob,
                wall_ms: wall(ctx),
            })?;
        }
        state.history.push(record);
        state.epoch = epoch;
        let improved = state.early.observe(epoch, valid_loss);
        if improved {
            best_params = model.params.clone();
            best_meta = Some((epoch, state.step, valid_loss));
        }
        if train_loss > cfg.divergence_loss {
            state.epochs_above_divergence += 1;
        } else {
            state.epochs_above_divergence = 0;
        }
        if let Some(dir) = &ctx.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            if improved {
                Checkpoint {
                    meta: meta(epoch, state.step, Some(valid_loss)),
                    params: best_params.clone(),
                    resume: None,
                }
                .save(dir.join(BEST_CHECKPOINT))?;
            }
            let mut last = Checkpoint::from_model(&model, meta(epoch, state.step, Some(valid_loss)));
            last.resume = Some(state.to_resume(&model.params)?);
            last.save(dir.join(LAST_CHECKPOINT))?;
        }
        if state.epochs_above_divergence >= cfg.divergence_epochs.max(1) {
            return Err(Error::Diverged(Box::new(Divergence {
                epoch,
                step: state.step,
                batch_index: None,
                lr,
                loss: train_loss,
                reason: format!(
                    "train loss above {} for {} consecutive epochs",
                    cfg.divergence_loss, state.epochs_above_divergence
                ),
                history: state.history.clone(),
            })));
        }
        if state.early.should_stop() {
            stop = StopReason::EarlyStop;
            break;
        }
    }
    sink.finish()?;

    let best = match best_meta {
        Some((epoch, step, loss)) => Checkpoint {
            meta: meta(epoch, step, Some(loss)),
            params: best_params,
            resume: None,
        },
        // resumed run that had already finished: keep the current weights
        None => Checkpoint::from_model(&model, meta(state.epoch, state.step, state.early.best)),
    };
    let mut last = Checkpoint::from_model(
        &model,
        meta(state.epoch, state.step, state.history.last().map(|r| r.valid_loss)),
    );
    last.resume = Some(state.to_resume(&model.params)?);
    Ok(FitResult {
        best,
        last,
        state,
        stop,
    })
}
