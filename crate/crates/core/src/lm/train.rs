//! Next-token training loop (Adam, fixed batches, held-out tail split).

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::TransformerLm;
use super::tokenizer::{TokenId, Tokenizer, TokenizerKind, WordVocab};
use super::LmConfig;
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The full training recipe. Every field is recorded in the report so a
/// checkpoint can be reproduced from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub batch_size: usize,
    /// Training windows hold `seq_len` inputs; clamped to `max_context`.
    pub seq_len: usize,
    /// Fraction of tokens, taken from the end of the corpus, held out.
    pub holdout_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 3e-3,
            seed: 0,
            batch_size: 16,
            seq_len: 64,
            holdout_fraction: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub options: TrainOptions,
    pub train_tokens: usize,
    pub heldout_tokens: usize,
    /// Held-out cross-entropy (nats/token) before training.
    pub initial_loss: f64,
    /// Held-out cross-entropy after each epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(self.initial_loss)
    }
}

/// Reads a corpus file, or every `*.txt` file of a directory in name order.
pub fn read_corpus(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    if path.is_file() {
        return Ok(fs::read_to_string(path)?);
    }
    let mut files: Vec<_> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    let mut text = String::new();
    for f in files {
        text.push_str(&fs::read_to_string(f)?);
        text.push('\n');
    }
    Ok(text)
}

/// Trains a fresh model on the corpus at `corpus_path`. Word tokenizers
/// build their vocabulary from the same corpus.
pub fn train_lm(
    corpus_path: &Path,
    config: &LmConfig,
    options: &TrainOptions,
) -> Result<(TransformerLm<f32>, TrainReport)> {
    train_lm_on_text(&read_corpus(corpus_path)?, config, options)
}

pub fn train_lm_on_text(
    text: &str,
    config: &LmConfig,
    options: &TrainOptions,
) -> Result<(TransformerLm<f32>, TrainReport)> {
    let tokenizer = match config.tokenizer_kind {
        TokenizerKind::Byte => Tokenizer::Byte,
        TokenizerKind::Word => Tokenizer::Word(WordVocab::build(text)),
    };
    let tokens = tokenizer.encode(text);
    let mut lm = TransformerLm::init(config, tokenizer, options.seed)?;
    let report = train_tokens(&mut lm, &tokens, options)?;
    Ok((lm, report))
}

/// Continues training `lm` in place on an already tokenized corpus.
pub fn train_tokens<S: Scalar>(
    lm: &mut TransformerLm<S>,
    tokens: &[TokenId],
    options: &TrainOptions,
) -> Result<TrainReport> {
    if options.batch_size == 0 {
        return Err(Error::InvalidField { field: "batch_size", reason: "must be positive".into() });
    }
    if !(0.0..1.0).contains(&options.holdout_fraction) {
        return Err(Error::InvalidField { field: "holdout_fraction", reason: "must lie in [0, 1)".into() });
    }
    let seq_len = options.seq_len.min(lm.config().max_context).max(1);
    let heldout = ((tokens.len() as f64) * options.holdout_fraction).round() as usize;
    let split = tokens.len() - heldout;
    let (train, held) = tokens.split_at(split);
    if train.len() < 2 || (options.holdout_fraction > 0.0 && held.len() < 2) {
        return Err(Error::Data(format!("corpus of {} tokens is too small to train on", tokens.len())));
    }
    let train_windows = windows(train, seq_len);
    let held_windows = if held.len() >= 2 { windows(held, seq_len) } else { windows(train, seq_len) };

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ 0x7472_6169_6e00);
    let cfg = AdamConfig {
        lr: options.lr,
        beta1: options.beta1,
        beta2: options.beta2,
        eps: options.adam_eps,
        clip_norm: options.clip_norm,
    };
    let mut adam = Adam::new(cfg, lm.params().tensors().iter().map(|t| t.len()));
    let initial_loss = mean_loss(lm, &held_windows)?;
    let mut epoch_losses = Vec::with_capacity(options.epochs);
    for epoch in 0..options.epochs {
        let mut order: Vec<usize> = (0..train_windows.len()).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(options.batch_size) {
            let seqs: Vec<&[TokenId]> = batch.iter().map(|&i| train_windows[i]).collect();
            let grads = batch_gradients(lm, &seqs)?;
            let grad_slices: Vec<&[S]> = grads.iter().map(|g| g.data()).collect();
            let params = lm.params_mut().tensors_mut().into_iter().map(|p| Arc::make_mut(p).data_mut()).collect();
            adam.step(params, &grad_slices);
        }
        let loss = mean_loss(lm, &held_windows)?;
        log::info!("epoch {}/{}: held-out loss {loss:.4}", epoch + 1, options.epochs);
        epoch_losses.push(loss);
    }
    Ok(TrainReport {
        options: options.clone(),
        train_tokens: train.len(),
        heldout_tokens: held.len(),
        initial_loss,
        epoch_losses,
    })
}

/// Non-overlapping windows of `seq_len + 1` tokens (inputs plus shifted
/// targets); the tail window may be shorter but has at least 2 tokens.
fn windows(tokens: &[TokenId], seq_len: usize) -> Vec<&[TokenId]> {
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < tokens.len() {
        let end = (start + seq_len + 1).min(tokens.len());
        out.push(&tokens[start..end]);
        start += seq_len;
    }
    out
}

/// Token-weighted mean next-token cross-entropy over `windows`, in nats.
fn mean_loss<S: Scalar>(lm: &TransformerLm<S>, windows: &[&[TokenId]]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for w in windows {
        total -= lm.sequence_logprob(w)?;
        count += w.len() - 1;
    }
    Ok(total / count as f64)
}

/// Gradients of the mean per-token cross-entropy of a batch, in
/// parameter-manifest order.
fn batch_gradients<S: Scalar>(lm: &TransformerLm<S>, seqs: &[&[TokenId]]) -> Result<Vec<Tensor<S>>> {
    let mut g = Graph::new();
    let vars = lm.bind(&mut g, true);
    let v = lm.config().vocab_size;
    let n_targets: usize = seqs.iter().map(|s| s.len() - 1).sum();
    let mut total = None;
    for seq in seqs {
        let (o, _) = lm.forward(&mut g, &vars, super::model::StepInput::Tokens(&seq[..seq.len() - 1]), None)?;
        let logits = lm.logits(&mut g, &vars, o)?;
        let logp = g.log_softmax(logits)?;
        let ids: Vec<usize> = seq[1..].iter().enumerate().map(|(i, &t)| i * v + t).collect();
        let picked = g.sum_indices(logp, &ids)?;
        total = Some(match total {
            None => picked,
            Some(acc) => g.add(acc, picked)?,
        });
    }
    let total = total.ok_or_else(|| Error::Data("empty batch".into()))?;
    let loss = g.scale(total, -S::one() / S::lit(n_targets as f64))?;
    g.backward(loss)?;
    Ok(vars
        .ordered()
        .into_iter()
        .map(|p| g.grad(p).cloned().unwrap_or_else(|| Tensor::zeros(g.value(p).shape())))
        .collect())
}
