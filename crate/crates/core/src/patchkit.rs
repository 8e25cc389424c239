// SPDX-License-Identifier: MIT OR Apache-2.0

//! Logit differences, Effect Scores and activation-patching sweeps.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::{CapturePlan, Edit, HookPoint, InterventionPlan, Model, Scalar};
use crate::plot;
use crate::prompt::{assemble_prompt, segment_regions, PromptContext, PromptInstance, SpanRole, TokenId, REGION_COUNT};
use crate::tablegen::{Corruption, QuerySpec, Sample, Table};

/// `logit[y] - logit[y_foil]`.
pub fn logit_diff(logits: &[f32], y: TokenId, y_foil: TokenId) -> f64 {
    logits[y as usize] as f64 - logits[y_foil as usize] as f64
}

/// `(ld_patch - ld_corrupt) / (ld_clean - ld_corrupt)`, or `None` when the
/// denominator is within `delta` of zero.
pub fn effect_score(ld_patch: f64, ld_clean: f64, ld_corrupt: f64, delta: f64) -> Option<f64> {
    let den = ld_clean - ld_corrupt;
    (den.abs() > delta).then(|| (ld_patch - ld_corrupt) / den)
}

/// Which run receives the patched activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Clean activations into the corrupt run.
    #[default]
    Restoration,
    /// Corrupt activations into the clean run; scored as the fraction of the
    /// clean margin destroyed.
    Noising,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchOptions {
    pub direction: Direction,
    /// Samples with `|LD_clean - LD_corrupt|` at or below this are excluded.
    pub delta_denom: f64,
}

impl Default for PatchOptions {
    fn default() -> Self {
        Self { direction: Direction::Restoration, delta_denom: 1e-3 }
    }
}

/// Clean and corrupt prompts over the same table, position-aligned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchPair {
    pub id: u64,
    /// Clean prompt, carrying the counterfactual spans.
    pub clean: PromptInstance,
    pub corrupt: PromptInstance,
    pub gold: TokenId,
    pub foil: TokenId,
}

impl PatchPair {
    pub fn new(ctx: &PromptContext, id: u64, table: &Table, query: &QuerySpec, corruption: &Corruption) -> Result<Self> {
        let clean = assemble_prompt(ctx, table, query, Some(corruption), None)?;
        let corrupt = assemble_prompt(ctx, table, &corruption.corrupt_query, None, None)?;
        if clean.answer_position != corrupt.answer_position {
            return Err(LabError::Prompt(format!(
                "pair {id}: clean and corrupt prompts are not aligned ({} vs {} input tokens)",
                clean.answer_position, corrupt.answer_position
            )));
        }
        let differ = clean.input().iter().zip(corrupt.input()).enumerate().filter(|(_, (a, b))| a != b).map(|(i, _)| i);
        for i in differ {
            if !clean.query_range.contains(&i) {
                return Err(LabError::Prompt(format!("pair {id}: prompts differ outside the question at {i}")));
            }
        }
        Ok(Self {
            id,
            gold: clean.answer_ids[0],
            foil: clean.foil_ids.as_ref().expect("corruption sets foil")[0],
            clean,
            corrupt,
        })
    }

    /// Pairs for every sample that carries a corruption.
    pub fn from_samples(ctx: &PromptContext, samples: &[Sample]) -> Result<Vec<Self>> {
        samples
            .iter()
            .filter_map(|s| s.corruption.as_ref().map(|c| Self::new(ctx, s.id, &s.table, &s.query, c)))
            .collect()
    }
}

/// Mean Effect Score per cell, with exclusion accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectMatrix {
    pub title: String,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
    pub included: Vec<Vec<usize>>,
    pub excluded: Vec<Vec<usize>>,
    pub n_samples: usize,
    pub options: PatchOptions,
}

impl EffectMatrix {
    /// Aggregates per-sample grids; `None` entries are excluded.
    pub fn aggregate(
        title: &str,
        row_labels: Vec<String>,
        col_labels: Vec<String>,
        per_sample: &[Vec<Vec<Option<f64>>>],
        options: PatchOptions,
    ) -> Self {
        let (nr, nc) = (row_labels.len(), col_labels.len());
        let mut mean = vec![vec![f64::NAN; nc]; nr];
        let mut std = vec![vec![f64::NAN; nc]; nr];
        let mut included = vec![vec![0; nc]; nr];
        let mut excluded = vec![vec![0; nc]; nr];
        for i in 0..nr {
            for j in 0..nc {
                let vals: Vec<f64> = per_sample.iter().filter_map(|g| g[i][j]).collect();
                included[i][j] = vals.len();
                excluded[i][j] = per_sample.len() - vals.len();
                if !vals.is_empty() {
                    let m = vals.iter().sum::<f64>() / vals.len() as f64;
                    mean[i][j] = m;
                    std[i][j] = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
                }
            }
        }
        Self { title: title.into(), row_labels, col_labels, mean, std, included, excluded, n_samples: per_sample.len(), options }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.mean[row][col]
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("layer,{}\n", self.col_labels.join(","));
        for (label, row) in self.row_labels.iter().zip(&self.mean) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            s.push_str(&format!("{label},{}\n", cells.join(",")));
        }
        s
    }

    pub fn to_svg(&self) -> String {
        plot::heatmap(&self.title, &self.row_labels, &self.col_labels, &self.mean)
    }

    /// Writes `<stem>.csv`, `<stem>.svg` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let files = [
            (dir.join(format!("{stem}.csv")), self.to_csv()),
            (dir.join(format!("{stem}.svg")), self.to_svg()),
            (dir.join(format!("{stem}.json")), serde_json::to_string_pretty(self)?),
        ];
        for (p, body) in &files {
            fs::write(p, body)?;
        }
        Ok(files.into_iter().map(|(p, _)| p).collect())
    }
}

/// Baseline quantities shared by every patch of one pair.
struct Baseline {
    ld_source: f64,
    ld_dest: f64,
    source: crate::model::ActivationTrace,
    dest_tokens: Vec<TokenId>,
}

fn baseline<T: Scalar>(model: &Model<T>, pair: &PatchPair, capture: &CapturePlan, dir: Direction) -> Result<Baseline> {
    let (src, dst) = match dir {
        Direction::Restoration => (&pair.clean, &pair.corrupt),
        Direction::Noising => (&pair.corrupt, &pair.clean),
    };
    let (ls, source) = model.forward(src.input(), capture, None)?;
    let (ld, _) = model.forward(dst.input(), &CapturePlan::none(), None)?;
    Ok(Baseline {
        ld_source: logit_diff(ls.last(), pair.gold, pair.foil),
        ld_dest: logit_diff(ld.last(), pair.gold, pair.foil),
        source,
        dest_tokens: dst.input().to_vec(),
    })
}

/// Runs the destination prompt with `plan` and scores it.
fn patched_effect<T: Scalar>(model: &Model<T>, pair: &PatchPair, b: &Baseline, plan: &InterventionPlan, delta: f64) -> Result<Option<f64>> {
    if (b.ld_source - b.ld_dest).abs() <= delta {
        return Ok(None);
    }
    let (l, _) = model.forward(&b.dest_tokens, &CapturePlan::none(), Some(plan))?;
    Ok(effect_score(logit_diff(l.last(), pair.gold, pair.foil), b.ld_source, b.ld_dest, delta))
}

fn residual_source(trace: &crate::model::ActivationTrace, layer: usize, positions: &[usize]) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(positions.len() * trace.d_model);
    for &p in positions {
        out.extend_from_slice(trace.row(HookPoint::Residual(layer), p)?);
    }
    Ok(out)
}

/// Layer x region sweep: for `resid.l`, `l = 0..=L`, and each of the 15
/// regions, replace the region's residuals in the destination run.
pub fn run_layer_patch<T: Scalar>(model: &Model<T>, pairs: &[PatchPair], opts: PatchOptions) -> Result<EffectMatrix> {
    let n_layers = model.config.n_layers;
    let capture = CapturePlan::residuals(&model.config);
    let per_sample: Vec<Vec<Vec<Option<f64>>>> = pairs
        .par_iter()
        .map(|pair| -> Result<_> {
            let regions = segment_regions(&pair.clean)?;
            let b = baseline(model, pair, &capture, opts.direction)?;
            let mut grid = vec![vec![None; REGION_COUNT]; n_layers + 1];
            for (l, row) in grid.iter_mut().enumerate() {
                for (g, cell) in row.iter_mut().enumerate() {
                    let positions = regions.positions(g as u8 + 1);
                    if positions.is_empty() {
                        continue;
                    }
                    let source = residual_source(&b.source, l, &positions)?;
                    let plan = InterventionPlan::new(vec![Edit::ResidualReplace { layer: l, positions, source }]);
                    *cell = patched_effect(model, pair, &b, &plan, opts.delta_denom)?;
                }
            }
            Ok(grid)
        })
        .collect::<Result<_>>()?;
    Ok(EffectMatrix::aggregate(
        "Effect of patching the residual stream by region",
        (0..=n_layers).map(|l| format!("resid.{l}")).collect(),
        (1..=REGION_COUNT).map(|g| g.to_string()).collect(),
        &per_sample,
        opts,
    ))
}

/// Layer x head sweep at the final input position.
pub fn run_head_patch_last<T: Scalar>(model: &Model<T>, pairs: &[PatchPair], opts: PatchOptions) -> Result<EffectMatrix> {
    let cfg = &model.config;
    let capture = CapturePlan::all_heads(cfg, HookPoint::HeadOutput);
    let per_sample: Vec<Vec<Vec<Option<f64>>>> = pairs
        .par_iter()
        .map(|pair| -> Result<_> {
            let b = baseline(model, pair, &capture, opts.direction)?;
            let last = b.dest_tokens.len() - 1;
            let mut grid = vec![vec![None; cfg.n_heads]; cfg.n_layers];
            for (l, row) in grid.iter_mut().enumerate() {
                for (a, cell) in row.iter_mut().enumerate() {
                    let source = b.source.row(HookPoint::HeadOutput(l, a), last)?.to_vec();
                    let plan = InterventionPlan::new(vec![Edit::HeadOutputReplace { layer: l, head: a, positions: vec![last], source }]);
                    *cell = patched_effect(model, pair, &b, &plan, opts.delta_denom)?;
                }
            }
            Ok(grid)
        })
        .collect::<Result<_>>()?;
    Ok(EffectMatrix::aggregate(
        "Effect of patching each head at the final position",
        (0..cfg.n_layers).map(|l| format!("L{l}")).collect(),
        (0..cfg.n_heads).map(|a| format!("H{a}")).collect(),
        &per_sample,
        opts,
    ))
}

/// Effect of patching several heads at once at the final position.
pub fn head_set_patch_last<T: Scalar>(model: &Model<T>, pairs: &[PatchPair], heads: &[(usize, usize)], opts: PatchOptions) -> Result<(f64, usize)> {
    let mut capture = CapturePlan::none();
    for &(l, a) in heads {
        capture = capture.with(HookPoint::HeadOutput(l, a));
    }
    let scores: Vec<Option<f64>> = pairs
        .par_iter()
        .map(|pair| -> Result<_> {
            let b = baseline(model, pair, &capture, opts.direction)?;
            let last = b.dest_tokens.len() - 1;
            let mut plan = InterventionPlan::default();
            for &(l, a) in heads {
                let source = b.source.row(HookPoint::HeadOutput(l, a), last)?.to_vec();
                plan.push(Edit::HeadOutputReplace { layer: l, head: a, positions: vec![last], source });
            }
            patched_effect(model, pair, &b, &plan, opts.delta_denom)
        })
        .collect::<Result<_>>()?;
    let vals: Vec<f64> = scores.into_iter().flatten().collect();
    let mean = if vals.is_empty() { f64::NAN } else { vals.iter().sum::<f64>() / vals.len() as f64 };
    Ok((mean, vals.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoverHead {
    pub layer: usize,
    pub head: usize,
    pub effect: f64,
    /// Fraction of samples whose final-position attention on the target cell
    /// exceeds the threshold.
    pub fraction_attending: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoverHeadReport {
    pub attn_threshold: f64,
    pub sample_fraction: f64,
    pub heads: Vec<MoverHead>,
    pub n_samples: usize,
}

/// Heads with positive Effect whose final-position attention on the target
/// cell exceeds `attn_threshold` in at least `sample_fraction` of the clean
/// prompts.
pub fn find_mover_heads<T: Scalar>(
    model: &Model<T>,
    pairs: &[PatchPair],
    effects: &EffectMatrix,
    attn_threshold: f64,
    sample_fraction: f64,
) -> Result<MoverHeadReport> {
    let cfg = &model.config;
    let capture = CapturePlan::all_heads(cfg, HookPoint::Attention);
    let hits: Vec<Vec<bool>> = pairs
        .par_iter()
        .map(|pair| -> Result<_> {
            let (_, tr) = model.forward(pair.clean.input(), &capture, None)?;
            let last = pair.clean.last_position();
            let target = pair.clean.expect_span(SpanRole::TargetCell, 0)?;
            let mut v = Vec::with_capacity(cfg.n_layers * cfg.n_heads);
            for l in 0..cfg.n_layers {
                for a in 0..cfg.n_heads {
                    let row = tr.row(HookPoint::Attention(l, a), last)?;
                    let mass: f64 = target.clone().map(|p| row[p] as f64).sum();
                    v.push(mass > attn_threshold);
                }
            }
            Ok(v)
        })
        .collect::<Result<_>>()?;
    let mut heads = Vec::new();
    for l in 0..cfg.n_layers {
        for a in 0..cfg.n_heads {
            let k = l * cfg.n_heads + a;
            let frac = if hits.is_empty() { 0.0 } else { hits.iter().filter(|h| h[k]).count() as f64 / hits.len() as f64 };
            let effect = effects.get(l, a);
            if effect > 0.0 && frac >= sample_fraction {
                heads.push(MoverHead { layer: l, head: a, effect, fraction_attending: frac });
            }
        }
    }
    Ok(MoverHeadReport { attn_threshold, sample_fraction, heads, n_samples: pairs.len() })
}
