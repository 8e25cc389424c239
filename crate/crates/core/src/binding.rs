// SPDX-License-Identifier: MIT OR Apache-2.0

//! Query-to-header binding: header similarity, alignment heads, head
//! ablation and the error taxonomy.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::{decode_answer_with, CapturePlan, Edit, HookPoint, InterventionPlan, Model, ModelConfig, Scalar};
use crate::prompt::{assemble_prompt, PromptContext, PromptInstance, SpanRole, TokenId, COMMA};
use crate::tablegen::{QuerySpec, Sample, Table};

/// A question over a table, with everything needed to decode and grade it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaItem {
    pub id: u64,
    pub prompt: PromptInstance,
    pub query: QuerySpec,
    /// `cells[i][j]` as token ids.
    pub cells: Vec<Vec<TokenId>>,
    pub col_headers: Vec<TokenId>,
}

impl QaItem {
    pub fn new(ctx: &PromptContext, id: u64, table: &Table, query: &QuerySpec) -> Result<Self> {
        let prompt = assemble_prompt(ctx, table, query, None, None)?;
        Self::from_prompt(ctx, id, table, query, prompt)
    }

    /// Wraps an already assembled prompt (e.g. one with noise).
    pub fn from_prompt(ctx: &PromptContext, id: u64, table: &Table, query: &QuerySpec, prompt: PromptInstance) -> Result<Self> {
        let cells = table
            .cells
            .iter()
            .map(|row| row.iter().map(|w| ctx.vocab.id(w)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let col_headers = table.col_headers.iter().map(|w| ctx.vocab.id(w)).collect::<Result<Vec<_>>>()?;
        Ok(Self { id, prompt, query: query.clone(), cells, col_headers })
    }

    pub fn from_samples(ctx: &PromptContext, samples: &[Sample]) -> Result<Vec<Self>> {
        samples.iter().map(|s| Self::new(ctx, s.id, &s.table, &s.query)).collect()
    }

    pub fn answer(&self) -> &[TokenId] {
        &self.prompt.answer_ids
    }
}

/// Output categories, in classification precedence order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCategory {
    Exact,
    RowHeader,
    ColumnHeader,
    WrongRow,
    WrongColumn,
    WrongRowAndColumn,
    NotInTable,
}

impl ErrorCategory {
    pub const ALL: [ErrorCategory; 7] = [
        ErrorCategory::Exact,
        ErrorCategory::RowHeader,
        ErrorCategory::ColumnHeader,
        ErrorCategory::WrongRow,
        ErrorCategory::WrongColumn,
        ErrorCategory::WrongRowAndColumn,
        ErrorCategory::NotInTable,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ErrorCategory::Exact => "exact",
            ErrorCategory::RowHeader => "row_header",
            ErrorCategory::ColumnHeader => "column_header",
            ErrorCategory::WrongRow => "wrong_row",
            ErrorCategory::WrongColumn => "wrong_column",
            ErrorCategory::WrongRowAndColumn => "wrong_row_and_column",
            ErrorCategory::NotInTable => "not_in_table",
        }
    }
}

/// Classifies one predicted answer for target `(r, c)`. `pred` is the
/// decoded token sequence for that target.
pub fn categorize_output(pred: &[TokenId], item: &QaItem, r: usize, c: usize) -> ErrorCategory {
    let [tok] = pred else {
        return ErrorCategory::NotInTable;
    };
    let tok = *tok;
    if tok == item.cells[r][c] {
        return ErrorCategory::Exact;
    }
    if tok == item.cells[r][0] {
        return ErrorCategory::RowHeader;
    }
    if tok == item.col_headers[c] {
        return ErrorCategory::ColumnHeader;
    }
    for (i, row) in item.cells.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v == tok {
                return match (i == r, j == c) {
                    (false, true) => ErrorCategory::WrongRow,
                    (true, false) => ErrorCategory::WrongColumn,
                    _ => ErrorCategory::WrongRowAndColumn,
                };
            }
        }
    }
    ErrorCategory::NotInTable
}

/// Splits a decoded list answer into per-target pieces at commas.
pub fn split_answer(pred: &[TokenId]) -> Vec<&[TokenId]> {
    pred.split(|&t| t == COMMA).collect()
}

/// Category counts. `total` always equals the sum of `counts`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub counts: BTreeMap<ErrorCategory, usize>,
    pub total: usize,
}

impl ErrorBreakdown {
    pub fn add(&mut self, c: ErrorCategory) {
        *self.counts.entry(c).or_default() += 1;
        self.total += 1;
    }

    pub fn merge(&mut self, other: &ErrorBreakdown) {
        for (&c, &n) in &other.counts {
            *self.counts.entry(c).or_default() += n;
        }
        self.total += other.total;
    }

    pub fn count(&self, c: ErrorCategory) -> usize {
        self.counts.get(&c).copied().unwrap_or(0)
    }

    pub fn share(&self, c: ErrorCategory) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.count(c) as f64 / self.total as f64
        }
    }

    pub fn exact(&self) -> f64 {
        self.share(ErrorCategory::Exact)
    }

    pub fn to_csv_row(&self, label: &str) -> String {
        let cells: Vec<String> = ErrorCategory::ALL.iter().map(|&c| self.count(c).to_string()).collect();
        format!("{label},{},{}\n", cells.join(","), self.total)
    }

    pub fn csv_header() -> String {
        let names: Vec<&str> = ErrorCategory::ALL.iter().map(|c| c.name()).collect();
        format!("condition,{},total\n", names.join(","))
    }
}

/// Plan zeroing every head in `heads`.
pub fn zero_plan(heads: &[(usize, usize)]) -> InterventionPlan {
    InterventionPlan::new(heads.iter().map(|&(layer, head)| Edit::HeadZero { layer, head }).collect())
}

/// Decoded answer for one item under `plan`.
pub fn decode_item<T: Scalar>(model: &Model<T>, item: &QaItem, plan: Option<&InterventionPlan>) -> Result<Vec<TokenId>> {
    decode_answer_with(model, item.prompt.input(), item.answer().len(), plan)
}

/// Greedy decode with `heads` zeroed, graded for atomic items. Multi-target
/// items count as exact only on a full match and are otherwise graded on
/// their first target.
pub fn zero_ablate_eval<T: Scalar>(model: &Model<T>, items: &[QaItem], heads: &[(usize, usize)]) -> Result<ErrorBreakdown> {
    let plan = zero_plan(heads);
    let cats: Vec<ErrorCategory> = items
        .par_iter()
        .map(|it| -> Result<_> {
            let pred = decode_item(model, it, (!plan.is_empty()).then_some(&plan))?;
            if pred == it.answer() {
                return Ok(ErrorCategory::Exact);
            }
            let (r, c) = it.query.targets()[0];
            let first = split_answer(&pred)[0];
            Ok(match categorize_output(first, it, r, c) {
                ErrorCategory::Exact => ErrorCategory::NotInTable,
                other => other,
            })
        })
        .collect::<Result<_>>()?;
    let mut b = ErrorBreakdown::default();
    cats.into_iter().for_each(|c| b.add(c));
    Ok(b)
}

/// `n` distinct heads drawn uniformly from those not in `exclude`.
pub fn random_heads(cfg: &ModelConfig, exclude: &[(usize, usize)], n: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let mut pool: Vec<(usize, usize)> = (0..cfg.n_layers)
        .flat_map(|l| (0..cfg.n_heads).map(move |a| (l, a)))
        .filter(|h| !exclude.contains(h))
        .collect();
    if pool.len() < n {
        return Err(LabError::config("top_k", format!("cannot draw {n} control heads from {} remaining", pool.len())));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    pool.truncate(n);
    pool.sort();
    Ok(pool)
}

/// Ablation of a head set next to unablated and random-head controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationStudy {
    pub heads: Vec<(usize, usize)>,
    pub baseline: ErrorBreakdown,
    pub ablated: ErrorBreakdown,
    /// Summed over all control draws.
    pub random: ErrorBreakdown,
    pub random_heads: Vec<Vec<(usize, usize)>>,
}

impl AblationStudy {
    pub fn drop_ablated(&self) -> f64 {
        self.baseline.exact() - self.ablated.exact()
    }

    pub fn drop_random(&self) -> f64 {
        self.baseline.exact() - self.random.exact()
    }
}

/// Runs `heads` and `draws` size-matched random sets drawn with seeds
/// `seed, seed + 1, ...`, excluding `heads`.
pub fn ablation_study<T: Scalar>(model: &Model<T>, items: &[QaItem], heads: &[(usize, usize)], draws: usize, seed: u64) -> Result<AblationStudy> {
    let baseline = zero_ablate_eval(model, items, &[])?;
    let ablated = zero_ablate_eval(model, items, heads)?;
    let mut random = ErrorBreakdown::default();
    let mut random_sets = Vec::new();
    for k in 0..draws as u64 {
        let set = random_heads(&model.config, heads, heads.len(), seed + k)?;
        random.merge(&zero_ablate_eval(model, items, &set)?);
        random_sets.push(set);
    }
    Ok(AblationStudy { heads: heads.to_vec(), baseline, ablated, random, random_heads: random_sets })
}

/// Which constraint a binding analysis follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BindAxis {
    Row,
    Column,
}

/// Constraint span, gold candidate index and candidate header positions.
fn candidates(p: &PromptInstance, axis: BindAxis) -> Result<(std::ops::Range<usize>, usize, Vec<usize>)> {
    match axis {
        BindAxis::Column => {
            let q = p.expect_span(SpanRole::QueryCol, 0)?;
            let t = p.expect_span(SpanRole::TableCol, 0)?.start;
            let gold = p.header_pos.iter().position(|&h| h == t).expect("target header is a header");
            Ok((q, gold, p.header_pos.clone()))
        }
        BindAxis::Row => {
            let q = p.expect_span(SpanRole::QueryRow, 0)?;
            let t = p.expect_span(SpanRole::TableRow, 0)?.start;
            let heads: Vec<usize> = p.cell_pos.iter().map(|r| r[0]).collect();
            let gold = heads.iter().position(|&h| h == t).expect("target row header is a row header");
            Ok((q, gold, heads))
        }
    }
}

fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    (na > 0.0 && nb > 0.0).then(|| dot / (na * nb))
}

/// Per-layer top-1 accuracy of the gold header under cosine similarity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityCurve {
    pub axis: BindAxis,
    /// Index `l` is `resid.l`.
    pub accuracy: Vec<f64>,
    pub n_used: Vec<usize>,
    pub n_excluded: Vec<usize>,
}

/// Cosine similarity between the constraint's residual and each candidate
/// header's residual at every layer; ties go to the earliest header.
pub fn header_similarity_accuracy<T: Scalar>(model: &Model<T>, prompts: &[PromptInstance], axis: BindAxis) -> Result<SimilarityCurve> {
    let n_points = model.config.n_layers + 1;
    let capture = CapturePlan::residuals(&model.config);
    let per: Vec<Vec<Option<bool>>> = prompts
        .par_iter()
        .map(|p| -> Result<_> {
            let (_, tr) = model.forward(p.input(), &capture, None)?;
            let (q, gold, heads) = candidates(p, axis)?;
            let mut out = Vec::with_capacity(n_points);
            for l in 0..n_points {
                let point = HookPoint::Residual(l);
                let qv = span_mean(tr.get(point)?, tr.d_model, q.clone());
                let mut best: Option<(usize, f64)> = None;
                let mut bad = false;
                for (i, &h) in heads.iter().enumerate() {
                    match cosine(&qv, tr.row(point, h)?) {
                        Some(s) => {
                            if best.map_or(true, |(_, b)| s > b) {
                                best = Some((i, s));
                            }
                        }
                        None => bad = true,
                    }
                }
                out.push(if bad { None } else { best.map(|(i, _)| i == gold) });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut accuracy = vec![0.0; n_points];
    let mut n_used = vec![0; n_points];
    let mut n_excluded = vec![0; n_points];
    for l in 0..n_points {
        let vals: Vec<bool> = per.iter().filter_map(|v| v[l]).collect();
        n_used[l] = vals.len();
        n_excluded[l] = per.len() - vals.len();
        accuracy[l] = if vals.is_empty() { f64::NAN } else { vals.iter().filter(|&&b| b).count() as f64 / vals.len() as f64 };
    }
    Ok(SimilarityCurve { axis, accuracy, n_used, n_excluded })
}

fn span_mean(data: &[f32], d: usize, span: std::ops::Range<usize>) -> Vec<f32> {
    let n = span.len() as f32;
    let mut out = vec![0.0; d];
    for t in span {
        for j in 0..d {
            out[j] += data[t * d + j] / n;
        }
    }
    out
}

/// Mean Alignment Score per head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadScoreTable {
    pub axis: BindAxis,
    /// `scores[l][a]`.
    pub scores: Vec<Vec<f64>>,
    pub n_samples: usize,
    pub n_excluded: usize,
}

impl HeadScoreTable {
    /// The `k` highest-scoring heads, best first; ties by (layer, head).
    pub fn top(&self, k: usize) -> Vec<(usize, usize)> {
        let mut all: Vec<((usize, usize), f64)> = self
            .scores
            .iter()
            .enumerate()
            .flat_map(|(l, row)| row.iter().enumerate().map(move |(a, &s)| ((l, a), s)))
            .collect();
        all.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        all.into_iter().take(k).map(|(h, _)| h).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,head,score\n");
        for (l, row) in self.scores.iter().enumerate() {
            for (a, v) in row.iter().enumerate() {
                s.push_str(&format!("{l},{a},{v:.6}\n"));
            }
        }
        s
    }
}

/// Alignment Score of one attention pattern: for each constraint position,
/// attention on the target header minus the mean attention on the other
/// headers, averaged over constraint positions.
pub fn alignment_score(attn: &[f32], seq_len: usize, constraint: std::ops::Range<usize>, gold: usize, heads: &[usize]) -> Option<f64> {
    if heads.len() < 2 {
        return None;
    }
    let n = constraint.len() as f64;
    let mut total = 0.0;
    for q in constraint {
        let row = &attn[q * seq_len..(q + 1) * seq_len];
        let tgt = row[heads[gold]] as f64;
        let dist: f64 = heads.iter().enumerate().filter(|(i, _)| *i != gold).map(|(_, &h)| row[h] as f64).sum::<f64>() / (heads.len() - 1) as f64;
        total += tgt - dist;
    }
    Some(total / n)
}

pub fn alignment_heads<T: Scalar>(model: &Model<T>, prompts: &[PromptInstance], axis: BindAxis) -> Result<HeadScoreTable> {
    let cfg = &model.config;
    let capture = CapturePlan::all_heads(cfg, HookPoint::Attention);
    let per: Vec<Option<Vec<f64>>> = prompts
        .par_iter()
        .map(|p| -> Result<_> {
            let (q, gold, heads) = candidates(p, axis)?;
            if heads.len() < 2 {
                return Ok(None);
            }
            let (_, tr) = model.forward(p.input(), &capture, None)?;
            let mut v = Vec::with_capacity(cfg.n_layers * cfg.n_heads);
            for l in 0..cfg.n_layers {
                for a in 0..cfg.n_heads {
                    let attn = tr.get(HookPoint::Attention(l, a))?;
                    v.push(alignment_score(attn, tr.seq_len, q.clone(), gold, &heads).expect("two candidates"));
                }
            }
            Ok(Some(v))
        })
        .collect::<Result<_>>()?;
    let used: Vec<&Vec<f64>> = per.iter().flatten().collect();
    let mut scores = vec![vec![0.0; cfg.n_heads]; cfg.n_layers];
    for l in 0..cfg.n_layers {
        for a in 0..cfg.n_heads {
            let k = l * cfg.n_heads + a;
            scores[l][a] = if used.is_empty() { f64::NAN } else { used.iter().map(|v| v[k]).sum::<f64>() / used.len() as f64 };
        }
    }
    Ok(HeadScoreTable { axis, scores, n_samples: used.len(), n_excluded: per.len() - used.len() })
}

/// Source-category to category transitions between two runs over the same
/// items, for flow diagrams.
pub fn error_flow(before: &[ErrorCategory], after: &[ErrorCategory]) -> HashMap<(ErrorCategory, ErrorCategory), usize> {
    let mut m = HashMap::new();
    for (&b, &a) in before.iter().zip(after) {
        *m.entry((b, a)).or_default() += 1;
    }
    m
}
