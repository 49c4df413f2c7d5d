//! A deliberately small encoder: token embeddings are mean-pooled over
//! unmasked positions, passed through up to two dense layers, and scored by
//! a task head. Ranking batches score each option row and group the scores;
//! pairwise batches classify each candidate row into {implausible,
//! plausible}. Adversarial perturbations attach to the embedded input, so
//! the trunk is shared between clean and perturbed passes.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "advtrain-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Score N options per question; the label is the correct option index.
    RelevanceRanking,
    /// Classify each candidate as plausible or not; candidates that share a
    /// question share a group id.
    PairwiseClassification,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::RelevanceRanking => "ranking",
            TaskKind::PairwiseClassification => "pairwise",
        })
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ranking" | "relevance_ranking" => Ok(TaskKind::RelevanceRanking),
            "pairwise" | "pairwise_classification" => Ok(TaskKind::PairwiseClassification),
            other => Err(Error::Config(format!(
                "unknown task kind {other:?}; expected ranking or pairwise"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!(
                "unknown activation {other:?}; expected relu or tanh"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HiddenLayer {
    pub size: usize,
    pub activation: Activation,
}

/// Architecture description; the runtime weights live in [`ModelParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_emb: usize,
    /// Zero, one, or two dense layers between pooling and the heads.
    pub hidden: Vec<HiddenLayer>,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64,
            d_emb: 16,
            hidden: vec![HiddenLayer {
                size: 32,
                activation: Activation::Relu,
            }],
            dropout_rate: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config(format!(
                "vocab_size must be at least 2, got {}",
                self.vocab_size
            )));
        }
        if self.d_emb == 0 {
            return Err(Error::Config("d_emb must be positive".to_string()));
        }
        if self.hidden.len() > 2 {
            return Err(Error::Config(format!(
                "at most 2 hidden layers supported, got {}",
                self.hidden.len()
            )));
        }
        if self.hidden.iter().any(|h| h.size == 0) {
            return Err(Error::Config(
                "hidden layer sizes must be positive".to_string(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayer {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
    pub activation: Activation,
}

/// All trainable state. Both heads are always present; a batch's task kind
/// selects which one scores it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// `[vocab, d_emb]`
    pub embedding: Tensor,
    pub encoder_layers: Vec<EncoderLayer>,
    /// Ranking head: one score per row, `[h]`.
    pub head_rank: Tensor,
    /// Pairwise head: `[h, 2]` weights and `[2]` bias.
    pub head_pair_weight: Tensor,
    pub head_pair_bias: Tensor,
    pub dropout_rate: f64,
}

fn uniform(rng: &mut impl Rng, limit: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * limit)
        .collect()
}

impl ModelParams {
    /// Fresh weights: uniform fan-balanced dense layers, uniform embeddings
    /// in [-0.5, 0.5], zero biases. Draw order is fixed, so a given seed
    /// always produces the same weights.
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let embedding = Tensor::new(
            vec![cfg.vocab_size, cfg.d_emb],
            uniform(rng, 0.5, cfg.vocab_size * cfg.d_emb),
        )?;
        let mut encoder_layers = Vec::with_capacity(cfg.hidden.len());
        let mut width = cfg.d_emb;
        for h in &cfg.hidden {
            let limit = (6.0 / (width + h.size) as f64).sqrt();
            encoder_layers.push(EncoderLayer {
                weight: Tensor::new(vec![width, h.size], uniform(rng, limit, width * h.size))?,
                bias: Tensor::zeros(vec![h.size]),
                activation: h.activation,
            });
            width = h.size;
        }
        let rank_limit = (6.0 / (width + 1) as f64).sqrt();
        let head_rank = Tensor::new(vec![width], uniform(rng, rank_limit, width))?;
        let pair_limit = (6.0 / (width + 2) as f64).sqrt();
        let head_pair_weight = Tensor::new(vec![width, 2], uniform(rng, pair_limit, width * 2))?;
        let head_pair_bias = Tensor::zeros(vec![2]);
        Ok(ModelParams {
            embedding,
            encoder_layers,
            head_rank,
            head_pair_weight,
            head_pair_bias,
            dropout_rate: cfg.dropout_rate,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.shape()[0]
    }

    pub fn d_emb(&self) -> usize {
        self.embedding.shape()[1]
    }

    /// Width of the representation entering the heads.
    pub fn head_width(&self) -> usize {
        self.encoder_layers
            .last()
            .map(|l| l.weight.shape()[1])
            .unwrap_or_else(|| self.d_emb())
    }

    /// Architecture implied by the stored shapes.
    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size(),
            d_emb: self.d_emb(),
            hidden: self
                .encoder_layers
                .iter()
                .map(|l| HiddenLayer {
                    size: l.weight.shape()[1],
                    activation: l.activation,
                })
                .collect(),
            dropout_rate: self.dropout_rate,
        }
    }

    /// Canonical parameter order shared by the optimizer, checkpoints, and
    /// gradient collection.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embedding];
        for l in &self.encoder_layers {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.push(&self.head_rank);
        out.push(&self.head_pair_weight);
        out.push(&self.head_pair_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding];
        for l in &mut self.encoder_layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.head_rank);
        out.push(&mut self.head_pair_weight);
        out.push(&mut self.head_pair_bias);
        out
    }

    /// Checkpoint key per tensor, aligned with [`tensors`](Self::tensors).
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = vec!["embedding".to_string()];
        for i in 0..self.encoder_layers.len() {
            out.push(format!("encoder.{i}.weight"));
            out.push(format!("encoder.{i}.bias"));
        }
        out.push("head_rank".to_string());
        out.push("head_pair.weight".to_string());
        out.push("head_pair.bias".to_string());
        out
    }

    pub fn zero_grads(&mut self) {
        for t in self.tensors_mut() {
            t.zero_grad();
        }
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        self.config().validate()?;
        let mut width = self.d_emb();
        for (i, l) in self.encoder_layers.iter().enumerate() {
            if l.weight.shape().len() != 2 || l.weight.shape()[0] != width {
                return Err(Error::shape(
                    "ModelParams encoder weight",
                    [width],
                    l.weight.shape(),
                ));
            }
            let out = l.weight.shape()[1];
            if l.bias.shape() != [out] {
                return Err(Error::shape(
                    "ModelParams encoder bias",
                    [out],
                    l.bias.shape(),
                ));
            }
            width = out;
            let _ = i;
        }
        if self.head_rank.shape() != [width] {
            return Err(Error::shape(
                "ModelParams head_rank",
                [width],
                self.head_rank.shape(),
            ));
        }
        if self.head_pair_weight.shape() != [width, 2] {
            return Err(Error::shape(
                "ModelParams head_pair weight",
                [width, 2],
                self.head_pair_weight.shape(),
            ));
        }
        if self.head_pair_bias.shape() != [2] {
            return Err(Error::shape(
                "ModelParams head_pair bias",
                [2],
                self.head_pair_bias.shape(),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let doc = CheckpointDoc {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            architecture: self.config(),
            tensors: self
                .tensor_names()
                .into_iter()
                .zip(self.tensors())
                .map(|(name, t)| {
                    (
                        name,
                        TensorRecord {
                            shape: t.shape().to_vec(),
                            data: t.data().to_vec(),
                        },
                    )
                })
                .collect(),
        };
        let mut text = serde_json::to_string(&doc)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let doc: CheckpointDoc = serde_json::from_str(&text)?;
        if doc.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!(
                "unrecognized checkpoint format {:?}",
                doc.format
            )));
        }
        if doc.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint version {} (supported: {CHECKPOINT_VERSION})",
                doc.version
            )));
        }
        doc.architecture.validate()?;
        let take = |name: &str| -> Result<Tensor> {
            let rec = doc
                .tensors
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint missing tensor {name:?}")))?;
            Tensor::new(rec.shape.clone(), rec.data.clone())
        };
        let mut encoder_layers = Vec::new();
        for (i, h) in doc.architecture.hidden.iter().enumerate() {
            encoder_layers.push(EncoderLayer {
                weight: take(&format!("encoder.{i}.weight"))?,
                bias: take(&format!("encoder.{i}.bias"))?,
                activation: h.activation,
            });
        }
        let params = ModelParams {
            embedding: take("embedding")?,
            encoder_layers,
            head_rank: take("head_rank")?,
            head_pair_weight: take("head_pair.weight")?,
            head_pair_bias: take("head_pair.bias")?,
            dropout_rate: doc.architecture.dropout_rate,
        };
        params.validate()?;
        if params.config() != doc.architecture {
            return Err(Error::Config(
                "checkpoint tensor shapes disagree with its architecture".to_string(),
            ));
        }
        Ok(params)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    format: String,
    version: u32,
    architecture: ModelConfig,
    // BTreeMap keeps checkpoint bytes independent of insertion order.
    tensors: std::collections::BTreeMap<String, TensorRecord>,
}

/// A batch of tokenized rows. Ranking batches hold `groups * options` rows
/// (one per option); pairwise batches hold one row per candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    task_kind: TaskKind,
    /// Row-major `[rows, seq_len]`.
    tokens: Vec<usize>,
    rows: usize,
    seq_len: usize,
    /// Ranking only: options per group.
    options: usize,
    /// Ranking: correct option per group. Pairwise: 0/1 per candidate.
    labels: Vec<usize>,
    /// Pairwise only: candidates sharing a question share an id.
    group_ids: Option<Vec<usize>>,
    /// 0/1 per `(row, position)`; 1 marks a real token.
    pad_mask: Vec<f64>,
}

fn check_mask(mask: &[f64], rows: usize, seq_len: usize) -> Result<()> {
    if mask.len() != rows * seq_len {
        return Err(Error::shape(
            "TokenBatch pad_mask",
            rows * seq_len,
            mask.len(),
        ));
    }
    if let Some(&bad) = mask.iter().find(|&&m| m != 0.0 && m != 1.0) {
        return Err(Error::InvalidValue {
            what: "TokenBatch pad_mask entry",
            value: bad,
        });
    }
    for r in 0..rows {
        if mask[r * seq_len..(r + 1) * seq_len].iter().sum::<f64>() == 0.0 {
            return Err(Error::InvalidValue {
                what: "TokenBatch pad_mask row with no tokens",
                value: r as f64,
            });
        }
    }
    Ok(())
}

impl TokenBatch {
    pub fn ranking(
        groups: usize,
        options: usize,
        seq_len: usize,
        tokens: Vec<usize>,
        labels: Vec<usize>,
        pad_mask: Option<Vec<f64>>,
    ) -> Result<Self> {
        if groups == 0 || seq_len == 0 {
            return Err(Error::Config(
                "ranking batch needs at least one group and position".into(),
            ));
        }
        if options < 2 {
            return Err(Error::Config(format!(
                "ranking batch needs >= 2 options, got {options}"
            )));
        }
        let rows = groups * options;
        if tokens.len() != rows * seq_len {
            return Err(Error::shape(
                "TokenBatch::ranking tokens",
                rows * seq_len,
                tokens.len(),
            ));
        }
        if labels.len() != groups {
            return Err(Error::shape(
                "TokenBatch::ranking labels",
                groups,
                labels.len(),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= options) {
            return Err(Error::InvalidValue {
                what: "TokenBatch::ranking label out of range",
                value: bad as f64,
            });
        }
        let pad_mask = pad_mask.unwrap_or_else(|| vec![1.0; rows * seq_len]);
        check_mask(&pad_mask, rows, seq_len)?;
        Ok(TokenBatch {
            task_kind: TaskKind::RelevanceRanking,
            tokens,
            rows,
            seq_len,
            options,
            labels,
            group_ids: None,
            pad_mask,
        })
    }

    pub fn pairwise(
        seq_len: usize,
        tokens: Vec<usize>,
        labels: Vec<usize>,
        group_ids: Vec<usize>,
        pad_mask: Option<Vec<f64>>,
    ) -> Result<Self> {
        let rows = labels.len();
        if rows == 0 || seq_len == 0 {
            return Err(Error::Config(
                "pairwise batch needs at least one row and position".into(),
            ));
        }
        if tokens.len() != rows * seq_len {
            return Err(Error::shape(
                "TokenBatch::pairwise tokens",
                rows * seq_len,
                tokens.len(),
            ));
        }
        if group_ids.len() != rows {
            return Err(Error::shape(
                "TokenBatch::pairwise group_ids",
                rows,
                group_ids.len(),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::InvalidValue {
                what: "TokenBatch::pairwise label not in {0, 1}",
                value: bad as f64,
            });
        }
        let pad_mask = pad_mask.unwrap_or_else(|| vec![1.0; rows * seq_len]);
        check_mask(&pad_mask, rows, seq_len)?;
        Ok(TokenBatch {
            task_kind: TaskKind::PairwiseClassification,
            tokens,
            rows,
            seq_len,
            options: 2,
            labels,
            group_ids: Some(group_ids),
            pad_mask,
        })
    }

    pub fn task_kind(&self) -> TaskKind {
        self.task_kind
    }

    /// Number of token rows fed through the trunk.
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Columns of the logit matrix: options per group for ranking, 2 for
    /// pairwise.
    pub fn logit_cols(&self) -> usize {
        self.options
    }

    /// Rows of the logit matrix (and length of `labels`).
    pub fn logit_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn group_ids(&self) -> Option<&[usize]> {
        self.group_ids.as_deref()
    }

    pub fn pad_mask(&self) -> &[f64] {
        &self.pad_mask
    }

    /// Shape of a perturbation attached to this batch's embedded input.
    pub fn embedded_shape(&self, d_emb: usize) -> Vec<usize> {
        vec![self.rows, self.seq_len, d_emb]
    }
}

/// Token rows materialized as embedding vectors. The tensor never carries
/// gradients; perturbations and trainable lookups attach on the tape.
#[derive(Debug, Clone)]
pub struct EmbeddedBatch {
    /// `[rows, seq_len, d_emb]`
    pub embeddings: Tensor,
    pub batch: TokenBatch,
}

/// Looks up each token's embedding row. Fails on any id outside the table.
pub fn embed(params: &ModelParams, batch: &TokenBatch) -> Result<EmbeddedBatch> {
    let vocab = params.vocab_size();
    let d = params.d_emb();
    if let Some(&bad) = batch.tokens().iter().find(|&&t| t >= vocab) {
        return Err(Error::InvalidValue {
            what: "embed token id out of range",
            value: bad as f64,
        });
    }
    let mut data = Vec::with_capacity(batch.tokens().len() * d);
    for &t in batch.tokens() {
        data.extend_from_slice(&params.embedding.data()[t * d..(t + 1) * d]);
    }
    Ok(EmbeddedBatch {
        embeddings: Tensor::new(batch.embedded_shape(d), data)?,
        batch: batch.clone(),
    })
}

/// Tape handles for every parameter tensor, in canonical order.
#[derive(Debug, Clone)]
pub(crate) struct ParamVars {
    pub embedding: Var,
    pub layers: Vec<(Var, Var)>,
    pub head_rank: Var,
    pub head_pair_weight: Var,
    pub head_pair_bias: Var,
}

impl ParamVars {
    /// Canonical order, aligned with [`ModelParams::tensors`].
    pub fn in_order(&self) -> Vec<Var> {
        let mut out = vec![self.embedding];
        for &(w, b) in &self.layers {
            out.push(w);
            out.push(b);
        }
        out.push(self.head_rank);
        out.push(self.head_pair_weight);
        out.push(self.head_pair_bias);
        out
    }
}

pub(crate) fn register_params(tape: &mut Tape, params: &ModelParams, trainable: bool) -> ParamVars {
    ParamVars {
        embedding: tape.input(&params.embedding, trainable),
        layers: params
            .encoder_layers
            .iter()
            .map(|l| {
                (
                    tape.input(&l.weight, trainable),
                    tape.input(&l.bias, trainable),
                )
            })
            .collect(),
        head_rank: tape.input(&params.head_rank, trainable),
        head_pair_weight: tape.input(&params.head_pair_weight, trainable),
        head_pair_bias: tape.input(&params.head_pair_bias, trainable),
    }
}

/// Embedded input built by an on-tape lookup, so gradients reach the
/// embedding table. Values match [`embed`] exactly.
pub(crate) fn embedded_input(
    tape: &mut Tape,
    pvars: &ParamVars,
    batch: &TokenBatch,
) -> Result<Var> {
    let d = tape.shape_of(pvars.embedding)[1];
    let gathered = tape.gather(pvars.embedding, batch.tokens())?;
    tape.reshape(gathered, &batch.embedded_shape(d))
}

/// Trunk and head on an existing tape. `x` is the (possibly perturbed)
/// embedded input `[rows, seq, d]`; returns logits `[logit_rows,
/// logit_cols]`. Dropout fires only in train mode: once on the pooled
/// representation and once between encoder layers.
pub(crate) fn forward_on_tape<R: Rng>(
    tape: &mut Tape,
    pvars: &ParamVars,
    params: &ModelParams,
    batch: &TokenBatch,
    x: Var,
    train_mode: bool,
    rng: &mut R,
) -> Result<Var> {
    let expected = batch.embedded_shape(params.d_emb());
    if tape.shape_of(x) != expected {
        return Err(Error::shape(
            "forward embedded input",
            &expected,
            tape.shape_of(x),
        ));
    }
    let pooled = tape.masked_mean_pool(x, batch.pad_mask())?;
    let mut h = pooled;
    if train_mode {
        h = tape.dropout(h, params.dropout_rate, rng)?;
    }
    for (i, (layer, &(w, b))) in params.encoder_layers.iter().zip(&pvars.layers).enumerate() {
        if train_mode && i > 0 {
            h = tape.dropout(h, params.dropout_rate, rng)?;
        }
        let z = tape.matmul(h, w)?;
        let z = tape.add_row_bias(z, b)?;
        h = match layer.activation {
            Activation::Relu => tape.relu(z),
            Activation::Tanh => tape.tanh(z),
        };
    }
    match batch.task_kind() {
        TaskKind::RelevanceRanking => {
            let width = params.head_width();
            let w = tape.reshape(pvars.head_rank, &[width, 1])?;
            let scores = tape.matmul(h, w)?;
            tape.reshape(scores, &[batch.logit_rows(), batch.logit_cols()])
        }
        TaskKind::PairwiseClassification => {
            let z = tape.matmul(h, pvars.head_pair_weight)?;
            tape.add_row_bias(z, pvars.head_pair_bias)
        }
    }
}

fn extract(tape: &Tape, v: Var) -> Result<Tensor> {
    Tensor::new(tape.shape_of(v).to_vec(), tape.value(v).to_vec())
}

/// Evaluation-mode logits for a token batch (no dropout).
pub fn forward(params: &ModelParams, batch: &TokenBatch) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pvars = register_params(&mut tape, params, false);
    let x = embedded_input(&mut tape, &pvars, batch)?;
    let mut no_rng = NoDraws;
    let logits = forward_on_tape(&mut tape, &pvars, params, batch, x, false, &mut no_rng)?;
    extract(&tape, logits)
}

/// Train-mode logits: dropout active, consuming draws from `rng`.
pub fn forward_train<R: Rng>(
    params: &ModelParams,
    batch: &TokenBatch,
    rng: &mut R,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pvars = register_params(&mut tape, params, false);
    let x = embedded_input(&mut tape, &pvars, batch)?;
    let logits = forward_on_tape(&mut tape, &pvars, params, batch, x, true, rng)?;
    extract(&tape, logits)
}

/// Evaluation-mode logits computed from already-embedded rows, honoring the
/// given values rather than the current table, plus an optional additive
/// perturbation of the same shape.
pub fn forward_from_embeddings(
    params: &ModelParams,
    emb: &EmbeddedBatch,
    delta: Option<&Tensor>,
) -> Result<Tensor> {
    let expected = emb.batch.embedded_shape(params.d_emb());
    if emb.embeddings.shape() != expected {
        return Err(Error::shape(
            "forward_from_embeddings",
            &expected,
            emb.embeddings.shape(),
        ));
    }
    let mut tape = Tape::new();
    let pvars = register_params(&mut tape, params, false);
    let mut x = tape.input(&emb.embeddings, false);
    if let Some(d) = delta {
        if d.shape() != expected {
            return Err(Error::shape(
                "forward_from_embeddings delta",
                &expected,
                d.shape(),
            ));
        }
        let dv = tape.input(d, false);
        x = tape.add(x, dv)?;
    }
    let mut no_rng = NoDraws;
    let logits = forward_on_tape(&mut tape, &pvars, params, &emb.batch, x, false, &mut no_rng)?;
    extract(&tape, logits)
}

/// RNG stand-in for paths that must not draw; any use is a bug.
pub(crate) struct NoDraws;

impl rand::RngCore for NoDraws {
    fn next_u32(&mut self) -> u32 {
        unreachable!("evaluation-mode forward must not consume randomness")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("evaluation-mode forward must not consume randomness")
    }
    fn fill_bytes(&mut self, _dest: &mut [u8]) {
        unreachable!("evaluation-mode forward must not consume randomness")
    }
    fn try_fill_bytes(&mut self, _dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        unreachable!("evaluation-mode forward must not consume randomness")
    }
}
