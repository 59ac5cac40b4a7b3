//! Decoder-only transformer: learned token and position embeddings, a stack
//! of pre-norm blocks (causal multi-head self-attention, then a feed-forward
//! network, each wrapped in a residual), a final layer norm, and an output
//! projection onto the vocabulary that is tied to the token embedding by
//! default.

mod checkpoint;

pub use checkpoint::{Checkpoint, CheckpointMeta, ResumeBlob, CHECKPOINT_VERSION};

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::tokenizer::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Context length in tokens.
    pub block_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub dropout: f32,
    pub ffn_mult: usize,
    pub tie_embeddings: bool,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: crate::tokenizer::DEFAULT_VOCAB_SIZE,
            block_size: 128,
            d_model: 256,
            n_layers: 6,
            n_heads: 4,
            dropout: 0.3,
            ffn_mult: 4,
            tie_embeddings: true,
            activation: Activation::Gelu,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.vocab_size == 0 {
            return fail("vocab_size must be positive".into());
        }
        if self.block_size < 2 {
            return fail(format!("block_size must be at least 2, got {}", self.block_size));
        }
        if self.n_layers == 0 {
            return fail("n_layers must be at least 1".into());
        }
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.ffn_mult == 0 {
            return fail("ffn_mult must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_width(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    /// Every parameter name with its shape, in storage order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, f) = (self.vocab_size, self.d_model, self.ffn_width());
        let mut out = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![self.block_size, d]),
        ];
        for i in 0..self.n_layers {
            let p = |s: &str| format!("blocks.{i}.{s}");
            out.push((p("ln1.weight"), vec![d]));
            out.push((p("ln1.bias"), vec![d]));
            for proj in ["q", "k", "v", "out"] {
                out.push((p(&format!("attn.{proj}.weight")), vec![d, d]));
                out.push((p(&format!("attn.{proj}.bias")), vec![d]));
            }
            out.push((p("ln2.weight"), vec![d]));
            out.push((p("ln2.bias"), vec![d]));
            out.push((p("ffn.fc.weight"), vec![d, f]));
            out.push((p("ffn.fc.bias"), vec![f]));
            out.push((p("ffn.proj.weight"), vec![f, d]));
            out.push((p("ffn.proj.bias"), vec![d]));
        }
        out.push(("ln_f.weight".to_string(), vec![d]));
        out.push(("ln_f.bias".to_string(), vec![d]));
        if !self.tie_embeddings {
            out.push(("head.weight".to_string(), vec![v, d]));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// The part of the network a parameter belongs to, for freezing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerGroup {
    Embeddings,
    Block(usize),
    /// Final layer norm and (when untied) the output projection.
    Head,
}

impl LayerGroup {
    pub fn of(name: &str) -> Self {
        if let Some(rest) = name.strip_prefix("blocks.") {
            let idx = rest.split('.').next().and_then(|s| s.parse().ok()).unwrap_or(0);
            LayerGroup::Block(idx)
        } else if name.starts_with("ln_f") || name.starts_with("head") {
            LayerGroup::Head
        } else {
            LayerGroup::Embeddings
        }
    }
}

/// Per-layer trainable flags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    pub embeddings: bool,
    pub blocks: Vec<bool>,
    pub head: bool,
}

impl FreezeMask {
    pub fn all_trainable(n_layers: usize) -> Self {
        Self {
            embeddings: true,
            blocks: vec![true; n_layers],
            head: true,
        }
    }

    /// Head plus the top `n` blocks are trainable; embeddings join once the
    /// bottom block does.
    pub fn top_blocks(n_layers: usize, n: usize) -> Self {
        let n = n.min(n_layers);
        Self {
            embeddings: n == n_layers,
            blocks: (0..n_layers).map(|i| i >= n_layers - n).collect(),
            head: true,
        }
    }

    pub fn is_trainable(&self, group: LayerGroup) -> bool {
        match group {
            LayerGroup::Embeddings => self.embeddings,
            LayerGroup::Block(i) => self.blocks.get(i).copied().unwrap_or(false),
            LayerGroup::Head => self.head,
        }
    }

    pub fn any_trainable(&self) -> bool {
        self.embeddings || self.head || self.blocks.iter().any(|&b| b)
    }

    /// 0-based indices of trainable blocks.
    pub fn trainable_blocks(&self) -> Vec<usize> {
        (0..self.blocks.len()).filter(|&i| self.blocks[i]).collect()
    }
}

/// Named learnable tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParameterSet {
    pub(crate) fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        let mut names = Vec::with_capacity(entries.len());
        let mut tensors = Vec::with_capacity(entries.len());
        for (i, (name, t)) in entries.into_iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate parameter name {name}")));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            names,
            tensors,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    fn tensor(&self, name: &str) -> &Tensor {
        self.get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from a validated set"))
    }
}

/// Tape handles for one block's parameters.
struct BlockVars {
    ln1: (Var, Var),
    q: (Var, Var),
    k: (Var, Var),
    v: (Var, Var),
    out: (Var, Var),
    ln2: (Var, Var),
    fc: (Var, Var),
    proj: (Var, Var),
}

/// Parameters registered on a tape, in [`ParameterSet`] order.
pub struct BoundParams {
    pub vars: Vec<Var>,
    tok_emb: Var,
    pos_emb: Var,
    blocks: Vec<BlockVars>,
    ln_f: (Var, Var),
    head: Var,
}

/// Configuration plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterSet,
}

impl Model {
    /// Weights drawn from N(0, 0.02); biases zero; layer-norm scales one.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 0.02).expect("valid normal");
        let entries = config
            .parameter_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let numel = shape.iter().product();
                let data: Vec<f32> = if name.ends_with(".bias") {
                    vec![0.0; numel]
                } else if name.starts_with("ln") || name.contains(".ln") {
                    vec![1.0; numel]
                } else {
                    (0..numel).map(|_| normal.sample(&mut rng)).collect()
                };
                let t = Tensor::new(shape, data).expect("shape matches data");
                (name, t)
            })
            .collect();
        Ok(Self {
            params: ParameterSet::from_entries(entries)?,
            config,
        })
    }

    /// Every parameter set to zero, layer-norm scales included. The model
    /// then emits all-zero logits: a uniform next-token distribution.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        let mut m = Self::init(config, 0)?;
        for t in m.params.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        Ok(m)
    }

    /// Builds a model around existing weights, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParameterSet) -> Result<Self> {
        config.validate()?;
        let want = config.parameter_shapes();
        if want.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "config implies {} tensors, found {}",
                want.len(),
                params.len()
            )));
        }
        for ((name, shape), (have_name, t)) in want.iter().zip(params.iter()) {
            if name != have_name || shape.as_slice() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "expected {name} {shape:?}, found {have_name} {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    /// Output projection `[V×d]`; the token embedding itself when tied.
    pub fn head_weight(&self) -> &Tensor {
        if self.config.tie_embeddings {
            self.params.tensor("tok_emb")
        } else {
            self.params.tensor("head.weight")
        }
    }

    /// Registers every parameter on `tape`. Parameters whose group is frozen
    /// under `mask` are registered without gradient tracking.
    pub fn bind(&self, tape: &mut Tape, mask: Option<&FreezeMask>) -> Result<BoundParams> {
        let mut vars = Vec::with_capacity(self.params.len());
        for (name, t) in self.params.iter() {
            let trainable = mask.is_none_or(|m| m.is_trainable(LayerGroup::of(name)));
            vars.push(tape.leaf(t.clone(), trainable)?);
        }
        let var = |name: &str| vars[self.params.index[name]];
        let pair = |prefix: String| (var(&format!("{prefix}.weight")), var(&format!("{prefix}.bias")));
        let blocks = (0..self.config.n_layers)
            .map(|i| BlockVars {
                ln1: pair(format!("blocks.{i}.ln1")),
                q: pair(format!("blocks.{i}.attn.q")),
                k: pair(format!("blocks.{i}.attn.k")),
                v: pair(format!("blocks.{i}.attn.v")),
                out: pair(format!("blocks.{i}.attn.out")),
                ln2: pair(format!("blocks.{i}.ln2")),
                fc: pair(format!("blocks.{i}.ffn.fc")),
                proj: pair(format!("blocks.{i}.ffn.proj")),
            })
            .collect();
        let head = if self.config.tie_embeddings {
            var("tok_emb")
        } else {
            var("head.weight")
        };
        Ok(BoundParams {
            tok_emb: var("tok_emb"),
            pos_emb: var("pos_emb"),
            ln_f: pair("ln_f".into()),
            head,
            blocks,
            vars,
        })
    }

    fn check_ids(&self, ids: &[TokenId], batch: usize, seq: usize) -> Result<()> {
        if seq == 0 || batch == 0 || ids.len() != batch * seq {
            return Err(Error::Length(format!(
                "expected a {batch}×{seq} id grid, got {} ids",
                ids.len()
            )));
        }
        if seq > self.config.block_size {
            return Err(Error::Length(format!(
                "sequence length {seq} exceeds block size {}",
                self.config.block_size
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::Index(format!(
                "token id {bad} is outside a vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`; returns logits `[batch×seq×V]`.
    /// Row `t` of the logits depends only on `ids[..=t]` of its sequence.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        ids: &[TokenId],
        batch: usize,
        seq: usize,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        self.check_ids(ids, batch, seq)?;
        let cfg = &self.config;
        let (d, h, dh) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
        let p = cfg.dropout;
        let tok_ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let pos_ids: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();

        let tok = tape.embedding(bound.tok_emb, &tok_ids)?;
        let pos = tape.embedding(bound.pos_emb, &pos_ids)?;
        let mut x = tape.add(tok, pos)?;
        x = tape.dropout(x, p, train, rng)?;

        let att_scale = 1.0 / (dh as f32).sqrt();
        for blk in &bound.blocks {
            let hn = tape.layer_norm(x, blk.ln1.0, blk.ln1.1)?;
            let heads = |tape: &mut Tape, w: (Var, Var)| -> Result<Var> {
                let y = tape.matmul(hn, w.0)?;
                let y = tape.add(y, w.1)?;
                let y = tape.reshape(y, &[batch, seq, h, dh])?;
                Ok(tape.permute(y, &[0, 2, 1, 3])?)
            };
            let q = heads(tape, blk.q)?;
            let k = heads(tape, blk.k)?;
            let v = heads(tape, blk.v)?;
            let scores = tape.matmul_nt(q, k)?;
            let scores = tape.scale(scores, att_scale)?;
            let scores = tape.causal_mask_fill(scores)?;
            let att = tape.softmax_lastdim(scores)?;
            let att = tape.dropout(att, p, train, rng)?;
            let y = tape.matmul(att, v)?;
            let y = tape.permute(y, &[0, 2, 1, 3])?;
            let y = tape.reshape(y, &[batch * seq, d])?;
            let y = tape.matmul(y, blk.out.0)?;
            let y = tape.add(y, blk.out.1)?;
            let y = tape.dropout(y, p, train, rng)?;
            x = tape.add(x, y)?;

            let hn = tape.layer_norm(x, blk.ln2.0, blk.ln2.1)?;
            let f = tape.matmul(hn, blk.fc.0)?;
            let f = tape.add(f, blk.fc.1)?;
            let f = match cfg.activation {
                Activation::Gelu => tape.gelu(f)?,
                Activation::Relu => tape.relu(f)?,
            };
            let f = tape.matmul(f, blk.proj.0)?;
            let f = tape.add(f, blk.proj.1)?;
            let f = tape.dropout(f, p, train, rng)?;
            x = tape.add(x, f)?;
        }
        let x = tape.layer_norm(x, bound.ln_f.0, bound.ln_f.1)?;
        let logits = tape.matmul_nt(x, bound.head)?;
        Ok(tape.reshape(logits, &[batch, seq, cfg.vocab_size])?)
    }

    /// Inference-mode logits `[batch×seq×V]`.
    pub fn logits(&self, ids: &[TokenId], batch: usize, seq: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, Some(&FreezeMask {
            embeddings: false,
            blocks: vec![false; self.config.n_layers],
            head: false,
        }))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward_on_tape(&mut tape, &bound, ids, batch, seq, false, &mut rng)?;
        Ok(tape.value(out).clone())
    }

    /// `Σₜ log P(ids[t] | ids[..t])` for `t ≥ 1`: the log of the sequence's
    /// chain-rule probability given its first token.
    pub fn sequence_logprob(&self, ids: &[TokenId]) -> Result<f64> {
        if ids.len() < 2 {
            return Err(Error::Length(format!(
                "need at least 2 ids to score a sequence, got {}",
                ids.len()
            )));
        }
        let seq = ids.len() - 1;
        let logits = self.logits(&ids[..seq], 1, seq)?;
        let v = self.config.vocab_size;
        Ok(logits
            .data()
            .chunks_exact(v)
            .zip(&ids[1..])
            .map(|(row, &next)| log_softmax_at(row, next as usize))
            .sum())
    }
}

/// `log softmax(row)[idx]`, accumulated in f64.
pub(crate) fn log_softmax_at(row: &[f32], idx: usize) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = row.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln() + max;
    row[idx] as f64 - lse
}
