//! Teacher-forced training: padded batches, Adam with the warmup schedule,
//! checkpointing and a JSON-lines metrics log.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::PAD;
use crate::autograd::Graph;
use crate::config::EvalConfig;
use crate::dataset::Utterance;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::model::{decode_forward, encode_features, loss_sum, Model, ModelConfig, ParameterStore};
use crate::rng::substream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: usize,
    pub warmup_steps: usize,
    /// Multiplies the scheduled learning rate.
    pub lr_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip_norm: Option<f64>,
    pub checkpoint_every: usize,
    pub eval_every: usize,
    /// Validation utterances decoded at each evaluation; 0 means all.
    pub eval_utterances: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            max_steps: 5000,
            warmup_steps: 400,
            lr_factor: 1.0,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            grad_clip_norm: None,
            checkpoint_every: 1000,
            eval_every: 500,
            eval_utterances: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("max_steps", self.max_steps),
            ("warmup_steps", self.warmup_steps),
            ("checkpoint_every", self.checkpoint_every),
            ("eval_every", self.eval_every),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("train.{name} must be positive")));
            }
        }
        if !(self.lr_factor > 0.0) {
            return Err(Error::Config("train.lr_factor must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("train.beta1 and train.beta2 must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("train.adam_eps must be positive".into()));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("train.grad_clip_norm must be positive".into()));
            }
        }
        Ok(())
    }
}

/// `factor · d^-0.5 · min(step^-0.5, step · warmup^-1.5)` for `step ≥ 1`.
pub fn noam_lr(d_model: usize, warmup: usize, step: usize, factor: f64) -> f64 {
    let s = step.max(1) as f64;
    factor * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5))
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub d_model: usize,
    pub warmup: usize,
    pub lr_factor: f64,
}

impl OptimizerState {
    pub fn new(params: &ParameterStore, d_model: usize, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            d_model,
            warmup: cfg.warmup_steps,
            lr_factor: cfg.lr_factor,
        }
    }

    /// Learning rate the next step will use.
    pub fn next_lr(&self) -> f64 {
        noam_lr(self.d_model, self.warmup, self.step + 1, self.lr_factor)
    }
}

/// One bias-corrected Adam update; returns the learning rate used.
pub fn adam_step(params: &mut ParameterStore, grads: &[Tensor], state: &mut OptimizerState) -> Result<f64> {
    if grads.len() != params.len() {
        return Err(Error::Input(format!(
            "got {} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (name, g) in params.names().iter().zip(grads) {
        if let Some(pos) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient for parameter {name} at flat index {pos}"
            )));
        }
    }
    state.step += 1;
    let lr = noam_lr(state.d_model, state.warmup, state.step, state.lr_factor);
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (((p, g), m), v) in params
        .tensors_mut()
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + state.eps);
        }
    }
    Ok(lr)
}

/// Global L2 norm over every gradient tensor.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// One padded utterance of a batch.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub utterance: usize,
    /// Per-channel `(mag, pha)` padded with zero frames to the batch length.
    pub channels: Vec<(Tensor, Tensor)>,
    pub frames: usize,
    /// BOS + words, PAD-filled to the batch length.
    pub decoder_input: Vec<usize>,
    /// Words + EOS, PAD-filled; PAD positions carry no loss.
    pub targets: Vec<usize>,
    pub tokens: usize,
}

impl BatchItem {
    pub fn new(index: usize, utt: &Utterance, channels: usize, pad_frames: usize, pad_tokens: usize) -> Result<Self> {
        let frames = utt.num_frames();
        if utt.channels.len() < channels {
            return Err(Error::Input(format!(
                "utterance {} has {} channels, model needs {channels}",
                utt.id,
                utt.channels.len()
            )));
        }
        let extra = pad_frames.checked_sub(frames).ok_or_else(|| {
            Error::Input(format!("utterance {} is longer than the batch", utt.id))
        })?;
        let channels = utt.channels[..channels]
            .iter()
            .map(|f| Ok((f.mag.pad_rows(extra, 0.0)?, f.pha.pad_rows(extra, 0.0)?)))
            .collect::<Result<_>>()?;
        let pad = |s: &[usize]| {
            let mut v = s.to_vec();
            v.resize(pad_tokens, PAD);
            v
        };
        Ok(BatchItem {
            utterance: index,
            channels,
            frames,
            decoder_input: pad(utt.tokens.decoder_input()),
            targets: pad(utt.tokens.targets()),
            tokens: utt.tokens.len() - 1,
        })
    }

    /// Key mask over frames: `true` for real frames.
    pub fn frame_mask(&self) -> Vec<bool> {
        (0..self.channels[0].0.rows()).map(|t| t < self.frames).collect()
    }

    /// Loss mask over decoder positions: `true` where a real target exists.
    pub fn loss_mask(&self) -> Vec<bool> {
        self.targets.iter().map(|&t| t != PAD).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub items: Vec<BatchItem>,
    pub max_frames: usize,
    pub max_tokens: usize,
}

/// Batches for one epoch: shuffle, sort within pools of 32 batches by
/// length, cut into batches, shuffle the batch order.
pub fn epoch_order(lengths: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut rng = substream(seed, "batching", epoch);
    let mut idx: Vec<usize> = (0..lengths.len()).collect();
    idx.shuffle(&mut rng);
    let pool = batch_size * 32;
    let mut batches = Vec::new();
    for chunk in idx.chunks(pool) {
        let mut chunk = chunk.to_vec();
        chunk.sort_by_key(|&i| lengths[i]);
        batches.extend(chunk.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(&mut rng);
    batches
}

pub fn make_batch(utts: &[Utterance], indices: &[usize], channels: usize) -> Result<Batch> {
    let max_frames = indices.iter().map(|&i| utts[i].num_frames()).max().unwrap_or(0);
    let max_tokens = indices.iter().map(|&i| utts[i].tokens.len() - 1).max().unwrap_or(0);
    let items = indices
        .iter()
        .map(|&i| BatchItem::new(i, &utts[i], channels, max_frames, max_tokens))
        .collect::<Result<_>>()?;
    Ok(Batch {
        items,
        max_frames,
        max_tokens,
    })
}

/// Endless stream of padded batches; each epoch reshuffles deterministically.
pub struct BatchIter<'a> {
    utts: &'a [Utterance],
    lengths: Vec<usize>,
    batch_size: usize,
    channels: usize,
    seed: u64,
    epoch: u64,
    pending: std::vec::IntoIter<Vec<usize>>,
}

impl<'a> BatchIter<'a> {
    pub fn new(utts: &'a [Utterance], batch_size: usize, channels: usize, seed: u64) -> Result<Self> {
        if utts.is_empty() {
            return Err(Error::Input("no training utterances".into()));
        }
        Ok(BatchIter {
            lengths: utts.iter().map(Utterance::num_frames).collect(),
            utts,
            batch_size,
            channels,
            seed,
            epoch: 0,
            pending: Vec::new().into_iter(),
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        let indices = match self.pending.next() {
            Some(b) => b,
            None => {
                self.epoch += 1;
                self.pending = epoch_order(&self.lengths, self.batch_size, self.seed, self.epoch).into_iter();
                self.pending.next()?
            }
        };
        Some(make_batch(self.utts, &indices, self.channels))
    }
}

struct ItemResult {
    loss: f64,
    tokens: usize,
    /// Targets whose logit is the row maximum.
    correct: usize,
    grads: Vec<Option<Tensor>>,
}

/// Summed loss, token counts and (optionally) per-parameter gradients for one item.
fn item_loss(model: &Model, item: &BatchItem, dropout_seed: Option<u64>, grads: bool) -> Result<ItemResult> {
    let g = Graph::new();
    let mut p = model.bind(&g);
    if let Some(seed) = dropout_seed {
        p = p.with_dropout(seed);
    }
    let feats: Vec<_> = item.channels.iter().map(|(m, ph)| (m, ph)).collect();
    let enc = encode_features(&p, &feats, Some(item.frames))?;
    let logits = decode_forward(&p, &item.decoder_input, &enc, Some(item.frames), Some(item.tokens))?;
    let scores = logits.to_tensor();
    let correct = item
        .targets
        .iter()
        .enumerate()
        .filter(|&(r, &t)| {
            let row = scores.row(r);
            t != PAD && (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])) == Some(t)
        })
        .count();
    let (loss, tokens) = loss_sum(logits, &item.targets, model.config().label_smoothing)?;
    let mut out = ItemResult {
        loss: loss.scalar_value(),
        tokens,
        correct,
        grads: Vec::new(),
    };
    if grads {
        let gr = g.backward(loss)?;
        out.grads = vec![None; model.params().len()];
        for (id, var) in p.bound() {
            out.grads[id.0] = gr.get(var);
        }
    }
    Ok(out)
}

/// Mean per-token loss over a batch and the matching mean gradients.
///
/// Items are processed in parallel but reduced in batch order, so results do
/// not depend on the thread count.
pub fn batch_gradients(model: &Model, batch: &Batch, dropout_seed: Option<u64>) -> Result<(f64, Vec<Tensor>)> {
    let parts = batch
        .items
        .par_iter()
        .enumerate()
        .map(|(k, item)| item_loss(model, item, dropout_seed.map(|s| s.wrapping_add(k as u64)), true))
        .collect::<Result<Vec<_>>>()?;
    let mut grads: Vec<Tensor> = model.params().tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let (mut loss, mut count) = (0.0, 0);
    for part in parts {
        loss += part.loss;
        count += part.tokens;
        for (acc, g) in grads.iter_mut().zip(part.grads) {
            if let Some(g) = g {
                acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
            }
        }
    }
    if count == 0 {
        return Err(Error::Input("batch has no target tokens".into()));
    }
    let inv = 1.0 / count as f64;
    for g in &mut grads {
        g.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    Ok((loss * inv, grads))
}

/// Mean per-token loss and token accuracy (no dropout) over utterances, in
/// padded batches.
pub fn dataset_loss(model: &Model, utts: &[Utterance], batch_size: usize) -> Result<(f64, f64)> {
    let c = model.config().channels;
    let idx: Vec<usize> = (0..utts.len()).collect();
    let (mut total, mut count, mut correct) = (0.0, 0, 0);
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = make_batch(utts, chunk, c)?;
        let parts = batch
            .items
            .par_iter()
            .map(|item| item_loss(model, item, None, false))
            .collect::<Result<Vec<_>>>()?;
        for part in parts {
            total += part.loss;
            count += part.tokens;
            correct += part.correct;
        }
    }
    if count == 0 {
        return Err(Error::Input("no target tokens".into()));
    }
    Ok((total / count as f64, correct as f64 / count as f64))
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_token_acc: f64,
    pub valid_wer: f64,
    pub wall_ms: u64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation WER seen.
    pub best: Model,
    pub best_step: usize,
    pub best_valid_wer: f64,
    pub metrics: Vec<MetricsRecord>,
    /// Train loss after every step.
    pub losses: Vec<f64>,
}

/// Where a run writes its artefacts.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }

    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }

    pub fn last(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .and_then(|mut f| writeln!(f, "{line}"))
        .map_err(|e| Error::io(path, e))
}

/// Trains a fresh model with teacher forcing and keeps the best-validation copy.
///
/// Randomness comes from `seed` through the `init`, `batching` and `dropout`
/// sub-streams. When `out` is given, `metrics.jsonl`, `best.ckpt` and
/// `last.ckpt` are written there. A non-finite loss aborts the run; the
/// checkpoints already on disk are left untouched.
pub fn train_loop(
    model_cfg: &ModelConfig,
    train: &[Utterance],
    valid: &[Utterance],
    run: &TrainConfig,
    eval: &EvalConfig,
    seed: u64,
    out: Option<&RunPaths>,
) -> Result<TrainOutcome> {
    run.validate()?;
    let mut model = Model::with_rng(model_cfg.clone(), &mut substream(seed, "init", 0))?;
    let mut opt = OptimizerState::new(model.params(), model_cfg.d_model, run);
    if let Some(o) = out {
        std::fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
        let _ = std::fs::remove_file(o.metrics());
    }
    let valid_eval: &[Utterance] = match run.eval_utterances {
        0 => valid,
        n => &valid[..n.min(valid.len())],
    };
    let start = Instant::now();
    let mut batches = BatchIter::new(train, run.batch_size, model_cfg.channels, seed)?;
    let mut losses = Vec::with_capacity(run.max_steps);
    let mut metrics = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let dropout = model_cfg.dropout > 0.0;

    for step in 1..=run.max_steps {
        let batch = batches.next().expect("batch stream is endless")?;
        let dropout_seed = dropout.then(|| {
            use rand::Rng;
            substream(seed, "dropout", step as u64).random::<u64>()
        });
        let (loss, mut grads) = batch_gradients(&model, &batch, dropout_seed)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite training loss {loss} at step {step}")));
        }
        if let Some(c) = run.grad_clip_norm {
            clip_grad_norm(&mut grads, c);
        }
        let lr = adam_step(model.params_mut(), &grads, &mut opt)?;
        losses.push(loss);

        if step % run.eval_every == 0 || step == run.max_steps {
            let (valid_loss, valid_token_acc) = dataset_loss(&model, valid_eval, run.batch_size)?;
            let report = evaluate(&model, valid_eval, eval)?;
            let window = &losses[losses.len().saturating_sub(run.eval_every)..];
            let rec = MetricsRecord {
                step,
                lr,
                train_loss: window.iter().sum::<f64>() / window.len() as f64,
                valid_loss,
                valid_token_acc,
                valid_wer: report.wer,
                wall_ms: start.elapsed().as_millis() as u64,
            };
            log::info!(
                "step {step} lr {lr:.2e} train {:.4} valid {:.4} acc {:.4} wer {:.4}",
                rec.train_loss,
                rec.valid_loss,
                rec.valid_token_acc,
                rec.valid_wer
            );
            if let Some(o) = out {
                append_line(&o.metrics(), &serde_json::to_string(&rec).expect("record serialises"))?;
            }
            if best.as_ref().is_none_or(|(w, _, _)| report.wer < *w) {
                if let Some(o) = out {
                    model.save(&o.best())?;
                }
                best = Some((report.wer, step, model.clone()));
            }
            metrics.push(rec);
        }
        if let Some(o) = out {
            if step % run.checkpoint_every == 0 || step == run.max_steps {
                model.save(&o.last())?;
            }
        }
    }
    let (best_valid_wer, best_step, best) = best.expect("final step always evaluates");
    Ok(TrainOutcome {
        best,
        best_step,
        best_valid_wer,
        metrics,
        losses,
    })
}
