// SPDX-License-Identifier: MIT OR Apache-2.0

//! Answer-token training with Adam, greedy decoding and exact-match scoring.

use std::ops::Range;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forward::{Logits, Sequence};
use super::{save_checkpoint, CapturePlan, InterventionPlan, Model, Scalar};
use crate::error::{LabError, Result};
use crate::prompt::{PromptInstance, TokenId, NEWLINE};

/// A training sequence: prompt followed by its answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainExample {
    pub tokens: Vec<TokenId>,
    /// Supervised answer spans, in order and non-overlapping.
    pub answers: Vec<Range<usize>>,
}

impl TrainExample {
    /// One answer running from `answer_start` to the end.
    pub fn single(tokens: Vec<TokenId>, answer_start: usize) -> Self {
        let answers = vec![answer_start..tokens.len()];
        Self { tokens, answers }
    }

    fn check(&self) -> Result<()> {
        let mut prev = 1;
        for r in &self.answers {
            if r.start < prev || r.end <= r.start || r.end > self.tokens.len() {
                return Err(LabError::Shape(format!("bad answer span {r:?} in a sequence of {}", self.tokens.len())));
            }
            prev = r.end;
        }
        if self.answers.is_empty() {
            return Err(LabError::Shape("training example without answer tokens".into()));
        }
        Ok(())
    }

    fn in_answer(&self, t: usize) -> bool {
        self.answers.iter().any(|r| r.contains(&t))
    }
}

impl From<&PromptInstance> for TrainExample {
    fn from(p: &PromptInstance) -> Self {
        Self::single(p.token_ids.clone(), p.answer_position)
    }
}

/// A prompt and the answer it should decode to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalExample {
    pub prompt: Vec<TokenId>,
    pub answer: Vec<TokenId>,
}

impl From<&PromptInstance> for EvalExample {
    fn from(p: &PromptInstance) -> Self {
        Self {
            prompt: p.input().to_vec(),
            answer: p.answer_ids.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossMode {
    /// Cross-entropy on answer tokens only.
    Answer,
    /// Next-token loss on every position, answer tokens weighted by `answer_weight`.
    Full { answer_weight: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Final learning rate after cosine decay.
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Decoupled weight decay on matrices.
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub loss: LossMode,
    pub eval_interval: usize,
    /// Held-out prompts scored at each evaluation.
    pub eval_samples: usize,
    /// Stop once held-out EM reaches this value.
    pub target_em: Option<f64>,
    /// Wall-clock budget; stops at the next step boundary.
    pub max_seconds: Option<f64>,
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 3000,
            batch_size: 16,
            lr: 1e-3,
            lr_min: 1e-4,
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            loss: LossMode::Answer,
            eval_interval: 250,
            eval_samples: 200,
            target_em: None,
            max_seconds: None,
            checkpoint_dir: None,
            checkpoint_interval: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, r: &str| Err(LabError::config(f, r));
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.lr >= 0.0) || !(self.lr_min >= 0.0) {
            return bad("lr", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1", "Adam betas must lie in [0, 1)");
        }
        if self.eval_interval == 0 {
            return bad("eval_interval", "must be positive");
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let frac = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    /// Mean training loss since the previous report.
    pub loss: f64,
    pub heldout_em: f64,
    pub lr: f64,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps_run: usize,
    pub final_em: f64,
    pub history: Vec<StepMetrics>,
    pub stopped_by: String,
}

/// Loss and gradients over one packed batch.
pub(crate) fn loss_and_grads<T: Scalar>(model: &Model<T>, batch: &[&TrainExample], mode: LossMode) -> Result<(f64, Vec<Vec<T>>)> {
    let v = model.config.vocab_size;
    let inputs: Vec<&[TokenId]> = batch.iter().map(|e| &e.tokens[..e.tokens.len() - 1]).collect();
    for e in batch {
        e.check()?;
    }
    let packed = Sequence::pack(inputs.iter().copied());
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    for (s, e) in batch.iter().enumerate() {
        let base = packed.starts[s];
        for t in 0..e.tokens.len() - 1 {
            let w = match mode {
                LossMode::Answer if e.in_answer(t + 1) => 1.0,
                LossMode::Answer => continue,
                LossMode::Full { answer_weight } if e.in_answer(t + 1) => answer_weight,
                LossMode::Full { .. } => 1.0,
            };
            rows.push(base + t);
            targets.push(e.tokens[t + 1] as usize);
            weights.push(w);
        }
    }
    let cache = model.run(&packed, None, None, true)?;
    let mut logits = model.logits_rows(&cache.hf, &rows);
    let total: f64 = weights.iter().sum();
    let mut loss = 0.0;
    for (i, row) in logits.chunks_exact_mut(v).enumerate() {
        let mx = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.to_f64()));
        let mut sum = 0.0;
        for x in row.iter_mut() {
            let e = (x.to_f64() - mx).exp();
            sum += e;
            *x = T::from_f64(e);
        }
        let w = weights[i] / total;
        loss += w * -((row[targets[i]].to_f64() / sum).ln());
        for (j, x) in row.iter_mut().enumerate() {
            let p = x.to_f64() / sum;
            let g = if j == targets[i] { p - 1.0 } else { p };
            *x = T::from_f64(w * g);
        }
    }
    let grads = model.backward(&packed, &cache, &rows, &logits);
    Ok((loss, grads))
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

fn first_nonfinite(model: &Model<f32>) -> Option<&str> {
    model.params.iter().find(|p| p.data.iter().any(|x| !x.is_finite())).map(|p| p.name.as_str())
}

/// Trains `model` in place. `on_metrics` sees every evaluation report.
pub fn train(
    model: &mut Model<f32>,
    train_set: &[TrainExample],
    heldout: &[EvalExample],
    cfg: &TrainConfig,
    mut on_metrics: impl FnMut(&StepMetrics),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(LabError::config("train_set", "no training examples"));
    }
    let start = Instant::now();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut adam = Adam {
        m: model.params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        v: model.params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        t: 0,
    };
    let eval_set = &heldout[..heldout.len().min(cfg.eval_samples)];
    let mut history = Vec::new();
    let mut loss_acc = 0.0;
    let mut loss_n = 0usize;
    let mut stopped_by = "steps".to_string();
    let mut step = 0;
    let mut last_em = 0.0;
    // Duration of the last evaluation, so a time budget stops early enough
    // to fit the final one.
    let mut eval_s = 0.0;
    while step < cfg.steps {
        let step_start = Instant::now();
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&train_set[order[cursor]]);
            cursor += 1;
        }
        let (loss, mut grads) = loss_and_grads(model, &batch, cfg.loss)?;
        if !loss.is_finite() {
            return Err(LabError::Numerical(format!(
                "loss became {loss} at step {step} (lr {:.2e}); lower the learning rate or enable clipping",
                cfg.lr_at(step)
            )));
        }
        loss_acc += loss;
        loss_n += 1;
        if cfg.grad_clip > 0.0 {
            let norm: f64 = grads.iter().flatten().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
            if norm > cfg.grad_clip {
                let s = (cfg.grad_clip / norm) as f32;
                grads.iter_mut().flatten().for_each(|g| *g *= s);
            }
        }
        let lr = cfg.lr_at(step);
        adam.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(adam.t);
        let bc2 = 1.0 - cfg.beta2.powi(adam.t);
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let step_size = (lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let eps = cfg.adam_eps as f32;
        for (i, p) in model.params.iter_mut().enumerate() {
            let decay = if p.shape.len() == 2 { (lr * cfg.weight_decay) as f32 } else { 0.0 };
            let (m, v, g) = (&mut adam.m[i], &mut adam.v[i], &grads[i]);
            for j in 0..p.data.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let upd = step_size * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
                p.data[j] -= upd + decay * p.data[j];
            }
        }
        if let Some(name) = first_nonfinite(model) {
            return Err(LabError::Numerical(format!("parameter {name} became non-finite at step {step}")));
        }
        step += 1;
        let step_s = step_start.elapsed().as_secs_f64();

        let out_of_time = cfg.max_seconds.is_some_and(|s| start.elapsed().as_secs_f64() + step_s + eval_s >= s);
        if step % cfg.eval_interval == 0 || step == cfg.steps || out_of_time {
            let eval_start = Instant::now();
            last_em = if eval_set.is_empty() { 0.0 } else { em_eval(model, eval_set)? };
            eval_s = eval_start.elapsed().as_secs_f64();
            let m = StepMetrics {
                step,
                loss: loss_acc / loss_n.max(1) as f64,
                heldout_em: last_em,
                lr,
                elapsed_s: start.elapsed().as_secs_f64(),
            };
            log::info!("step {} loss {:.4} em {:.3} lr {:.2e} {:.0}s", m.step, m.loss, m.heldout_em, m.lr, m.elapsed_s);
            on_metrics(&m);
            history.push(m);
            loss_acc = 0.0;
            loss_n = 0;
            if cfg.target_em.is_some_and(|t| last_em >= t) {
                stopped_by = "target_em".into();
            } else if out_of_time {
                stopped_by = "time".into();
            }
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            if cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0 {
                save_checkpoint(model, &dir.join(format!("step_{step:06}.tbls")))?;
            }
        }
        if stopped_by != "steps" {
            break;
        }
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        save_checkpoint(model, &dir.join("final.tbls"))?;
    }
    Ok(TrainReport {
        steps_run: step,
        final_em: last_em,
        history,
        stopped_by,
    })
}

/// Greedy decoding of up to `max_tokens` tokens, stopping after a newline.
pub fn decode_answer<T: Scalar>(model: &Model<T>, prompt: &[TokenId], max_tokens: usize) -> Result<Vec<TokenId>> {
    decode_answer_with(model, prompt, max_tokens, None)
}

/// [`decode_answer`] with an intervention plan applied at every step. Edits
/// must not reference positions past the prompt.
pub fn decode_answer_with<T: Scalar>(
    model: &Model<T>,
    prompt: &[TokenId],
    max_tokens: usize,
    plan: Option<&InterventionPlan>,
) -> Result<Vec<TokenId>> {
    let mut seq = prompt.to_vec();
    let mut out = Vec::with_capacity(max_tokens);
    for _ in 0..max_tokens {
        if seq.len() >= model.config.max_seq_len {
            break;
        }
        let (logits, _) = model.forward(&seq, &CapturePlan::none(), plan)?;
        let logits = logits.data;
        let tok = Logits::argmax(&logits) as TokenId;
        out.push(tok);
        if tok == NEWLINE {
            break;
        }
        seq.push(tok);
    }
    Ok(out)
}

/// Exact-match accuracy: the decoded sequence must equal the answer.
pub fn em_eval<T: Scalar>(model: &Model<T>, examples: &[EvalExample]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let hits: Vec<bool> = examples
        .par_iter()
        .map(|e| decode_answer(model, &e.prompt, e.answer.len()).map(|d| d == e.answer))
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / examples.len() as f64)
}
