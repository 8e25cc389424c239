// SPDX-License-Identifier: MIT OR Apache-2.0

//! Column shift vectors: extraction, steering and composition.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::{CapturePlan, Edit, HookPoint, InterventionPlan, Logits, Model, Scalar};
use crate::patchkit::effect_score;
use crate::prompt::{assemble_prompt, PromptContext, PromptInstance, TokenId};
use crate::tablegen::{QuerySpec, Sample};

/// Mean residual difference between column headers `k` apart, one vector per
/// layer of the window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftVector {
    pub k: i32,
    /// Residual-stream indices (`resid.l`) the vectors belong to.
    pub layers: Vec<usize>,
    pub vectors: Vec<Vec<f64>>,
    pub n_samples: usize,
    pub n_pairs: usize,
}

impl ShiftVector {
    /// Every layer vector scaled to unit length.
    pub fn unit(&self) -> ShiftVector {
        let vectors = self
            .vectors
            .iter()
            .map(|v| {
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 0.0 {
                    v.iter().map(|x| x / n).collect()
                } else {
                    v.clone()
                }
            })
            .collect();
        ShiftVector { vectors, ..self.clone() }
    }

    /// One vector per window averaged over the window, applied at every
    /// layer of it.
    pub fn global_average(&self) -> ShiftVector {
        let d = self.vectors[0].len();
        let mut avg = vec![0.0; d];
        for v in &self.vectors {
            for (a, x) in avg.iter_mut().zip(v) {
                *a += x / self.vectors.len() as f64;
            }
        }
        ShiftVector { vectors: vec![avg; self.layers.len()], ..self.clone() }
    }

    /// Elementwise sum over a shared window.
    pub fn add(&self, other: &ShiftVector) -> Result<ShiftVector> {
        if self.layers != other.layers {
            return Err(LabError::config("window", "shift vectors cover different layers"));
        }
        let vectors = self.vectors.iter().zip(&other.vectors).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect();
        Ok(ShiftVector { k: self.k + other.k, layers: self.layers.clone(), vectors, n_samples: self.n_samples.min(other.n_samples), n_pairs: self.n_pairs.min(other.n_pairs) })
    }

    pub fn norm(&self) -> f64 {
        self.vectors.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Middle third of `n_layers` residual points, never empty.
pub fn middle_window(n_layers: usize) -> Vec<usize> {
    let lo = n_layers / 3;
    let hi = (2 * n_layers).div_ceil(3).max(lo + 1);
    (lo..hi).collect()
}

/// Mean residual over positions `t - 1` and `t`.
fn site_mean(trace: &crate::model::ActivationTrace, layer: usize, t: usize) -> Result<Vec<f64>> {
    let a = trace.row(HookPoint::Residual(layer), t - 1)?;
    let b = trace.row(HookPoint::Residual(layer), t)?;
    Ok(a.iter().zip(b).map(|(x, y)| (*x as f64 + *y as f64) / 2.0).collect())
}

/// Averages `h(c + k) - h(c)` over header pairs within each prompt, then
/// over prompts. Only attribute columns take part.
pub fn extract_shift_vector<T: Scalar>(model: &Model<T>, prompts: &[PromptInstance], k: i32, window: &[usize]) -> Result<ShiftVector> {
    if k == 0 {
        return Err(LabError::config("k", "a zero shift has no header pairs"));
    }
    if window.is_empty() || window.iter().any(|&l| l > model.config.n_layers) {
        return Err(LabError::config("window", "must be a non-empty set of residual indices"));
    }
    let mut capture = CapturePlan::none();
    for &l in window {
        capture = capture.with(HookPoint::Residual(l));
    }
    let d = model.config.d_model;
    let per: Vec<Option<(Vec<Vec<f64>>, usize)>> = prompts
        .par_iter()
        .map(|p| -> Result<_> {
            let nc = p.n_cols() as i32;
            let pairs: Vec<(usize, usize)> = (1..nc).filter(|&c| (1..nc).contains(&(c + k))).map(|c| (c as usize, (c + k) as usize)).collect();
            if pairs.is_empty() {
                return Ok(None);
            }
            let (_, tr) = model.forward(p.input(), &capture, None)?;
            let mut out = Vec::with_capacity(window.len());
            for &l in window {
                let mut acc = vec![0.0; d];
                for &(c, c2) in &pairs {
                    let a = site_mean(&tr, l, p.header_pos[c])?;
                    let b = site_mean(&tr, l, p.header_pos[c2])?;
                    for j in 0..d {
                        acc[j] += (b[j] - a[j]) / pairs.len() as f64;
                    }
                }
                out.push(acc);
            }
            Ok(Some((out, pairs.len())))
        })
        .collect::<Result<_>>()?;
    let used: Vec<&(Vec<Vec<f64>>, usize)> = per.iter().flatten().collect();
    if used.is_empty() {
        return Err(LabError::config("k", format!("no table has two attribute columns {k} apart")));
    }
    let mut vectors = vec![vec![0.0; d]; window.len()];
    for (v, _) in &used {
        for (acc, x) in vectors.iter_mut().zip(v) {
            for j in 0..d {
                acc[j] += x[j] / used.len() as f64;
            }
        }
    }
    Ok(ShiftVector { k, layers: window.to_vec(), vectors, n_samples: used.len(), n_pairs: used.iter().map(|u| u.1).sum() })
}

/// Plan adding `scale * v` at positions `[t - 1, t]` in every window layer.
pub fn steer_plan(shift: &ShiftVector, t: usize, scale: f64) -> InterventionPlan {
    let mut plan = InterventionPlan::default();
    if scale == 0.0 {
        return plan;
    }
    for (&layer, v) in shift.layers.iter().zip(&shift.vectors) {
        let vector: Vec<f32> = v.iter().map(|x| (x * scale) as f32).collect();
        plan.push(Edit::ResidualAdd { layer, positions: vec![t - 1, t], vector });
    }
    plan
}

/// Forward pass with `k_multiplier * alpha * v` added at the target column
/// header of the table.
pub fn steer_forward<T: Scalar>(model: &Model<T>, prompt: &PromptInstance, shift: &ShiftVector, k_multiplier: f64, alpha: f64) -> Result<Logits> {
    let t = prompt.header_pos[query_col(prompt)?];
    let plan = steer_plan(shift, t, k_multiplier * alpha);
    let plan = (!plan.is_empty()).then_some(&plan);
    Ok(model.forward(prompt.input(), &CapturePlan::none(), plan)?.0)
}

fn query_col(p: &PromptInstance) -> Result<usize> {
    let t = p.expect_span(crate::prompt::SpanRole::TableCol, 0)?.start;
    Ok(p.header_pos.iter().position(|&h| h == t).expect("target header is a header"))
}

/// A sample prepared for steering: the clean prompt plus reference prompts
/// asking for other columns of the same row.
#[derive(Debug, Clone)]
pub struct SteerItem {
    pub prompt: PromptInstance,
    pub row: usize,
    pub col: usize,
    /// Value token per column of the target row.
    pub row_values: Vec<TokenId>,
    sample: Sample,
}

impl SteerItem {
    pub fn new(ctx: &PromptContext, sample: &Sample) -> Result<Self> {
        let prompt = assemble_prompt(ctx, &sample.table, &sample.query, None, None)?;
        let (row, col) = (sample.query.row(), sample.query.col());
        let row_values = sample.table.cells[row].iter().map(|w| ctx.vocab.id(w)).collect::<Result<_>>()?;
        Ok(Self { prompt, row, col, row_values, sample: sample.clone() })
    }

    /// Column `col + k` if it is an attribute column.
    pub fn shifted(&self, k: i32) -> Option<usize> {
        let c = self.col as i32 + k;
        (c >= 1 && (c as usize) < self.row_values.len()).then_some(c as usize)
    }

    fn reference(&self, ctx: &PromptContext, c: usize) -> Result<PromptInstance> {
        let q = QuerySpec::atomic(self.row, c, self.sample.query.template_id);
        assemble_prompt(ctx, &self.sample.table, &q, None, None)
    }

    /// `logit(v[r, c + k]) - logit(v[r, c])` at the answer position.
    pub fn ld(&self, logits: &Logits, k: i32) -> Option<f64> {
        let c2 = self.shifted(k)?;
        let last = logits.last();
        Some(last[self.row_values[c2] as usize] as f64 - last[self.row_values[self.col] as usize] as f64)
    }
}

/// Steering outcome for one sample and shift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteerOutcome {
    pub ld_base: f64,
    pub ld_steered: f64,
    pub ld_ref: f64,
    pub effect: Option<f64>,
}

/// Effect of steering one item by `scale * shift` toward column `col + k`,
/// normalized by a clean run that asks for that column.
pub fn steering_effect<T: Scalar>(model: &Model<T>, ctx: &PromptContext, item: &SteerItem, shift: &ShiftVector, k: i32, scale: f64, delta: f64) -> Result<Option<SteerOutcome>> {
    let Some(c2) = item.shifted(k) else { return Ok(None) };
    let t = item.prompt.header_pos[item.col];
    let base = model.forward(item.prompt.input(), &CapturePlan::none(), None)?.0;
    let plan = steer_plan(shift, t, scale);
    let steered = model.forward(item.prompt.input(), &CapturePlan::none(), (!plan.is_empty()).then_some(&plan))?.0;
    let reference = model.forward(item.reference(ctx, c2)?.input(), &CapturePlan::none(), None)?.0;
    let (ld_base, ld_steered, ld_ref) = (item.ld(&base, k).unwrap(), item.ld(&steered, k).unwrap(), item.ld(&reference, k).unwrap());
    Ok(Some(SteerOutcome { ld_base, ld_steered, ld_ref, effect: effect_score(ld_steered, ld_ref, ld_base, delta) }))
}

/// Mean effect and sign-test fraction over items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerSummary {
    pub k: i32,
    pub mean_effect: f64,
    /// Share of in-bounds items whose LD rose under steering.
    pub raised: f64,
    pub included: usize,
    pub excluded: usize,
}

pub fn steer_summary<T: Scalar>(model: &Model<T>, ctx: &PromptContext, items: &[SteerItem], shift: &ShiftVector, k: i32, scale: f64, delta: f64) -> Result<SteerSummary> {
    let outs: Vec<Option<SteerOutcome>> = items.par_iter().map(|it| steering_effect(model, ctx, it, shift, k, scale, delta)).collect::<Result<_>>()?;
    let inb: Vec<&SteerOutcome> = outs.iter().flatten().collect();
    let effects: Vec<f64> = inb.iter().filter_map(|o| o.effect).collect();
    Ok(SteerSummary {
        k,
        mean_effect: mean(&effects),
        raised: inb.iter().filter(|o| o.ld_steered > o.ld_base).count() as f64 / inb.len().max(1) as f64,
        included: effects.len(),
        excluded: items.len() - effects.len(),
    })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositionKind {
    Baseline,
    Composite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionRow {
    pub k: i32,
    pub a: i32,
    pub b: i32,
    pub effect: f64,
    pub included: usize,
    pub kind: CompositionKind,
}

/// Baseline `v_k` against every composite `v_a + v_b` with `a + b = k`,
/// `a, b != 0` and `|a|, |b| <= max_offset`. Vectors that cannot be
/// extracted are skipped.
pub fn composition_experiment<T: Scalar>(
    model: &Model<T>,
    ctx: &PromptContext,
    extract_from: &[PromptInstance],
    items: &[SteerItem],
    ks: &[i32],
    max_offset: i32,
    window: &[usize],
    alpha: f64,
    delta: f64,
) -> Result<Vec<CompositionRow>> {
    let mut cache = std::collections::BTreeMap::new();
    let mut vec_for = |k: i32| -> Result<Option<ShiftVector>> {
        if let Some(v) = cache.get(&k) {
            return Ok(Some(ShiftVector::clone(v)));
        }
        match extract_shift_vector(model, extract_from, k, window) {
            Ok(v) => {
                cache.insert(k, v.clone());
                Ok(Some(v))
            }
            Err(LabError::Config { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let mut rows = Vec::new();
    for &k in ks {
        if k == 0 {
            continue;
        }
        if let Some(v) = vec_for(k)? {
            let s = steer_summary(model, ctx, items, &v, k, alpha, delta)?;
            rows.push(CompositionRow { k, a: k, b: 0, effect: s.mean_effect, included: s.included, kind: CompositionKind::Baseline });
        }
        for a in -max_offset..=max_offset {
            let b = k - a;
            if a == 0 || b == 0 || b.abs() > max_offset || a > b {
                continue;
            }
            let (Some(va), Some(vb)) = (vec_for(a)?, vec_for(b)?) else { continue };
            let s = steer_summary(model, ctx, items, &va.add(&vb)?, k, alpha, delta)?;
            rows.push(CompositionRow { k, a, b, effect: s.mean_effect, included: s.included, kind: CompositionKind::Composite });
        }
    }
    Ok(rows)
}

/// Spearman correlation across `k` between the baseline effect and the
/// mean composite effect, over the `k` that have both.
pub fn composition_rank_correlation(rows: &[CompositionRow]) -> Option<f64> {
    let mut base = Vec::new();
    let mut comp = Vec::new();
    let mut ks: Vec<i32> = rows.iter().map(|r| r.k).collect();
    ks.dedup();
    for k in ks {
        let b = rows.iter().find(|r| r.k == k && r.kind == CompositionKind::Baseline && r.effect.is_finite());
        let cs: Vec<f64> = rows.iter().filter(|r| r.k == k && r.kind == CompositionKind::Composite && r.effect.is_finite()).map(|r| r.effect).collect();
        if let (Some(b), false) = (b, cs.is_empty()) {
            base.push(b.effect);
            comp.push(mean(&cs));
        }
    }
    (base.len() >= 3).then(|| crate::coords::spearman(&base, &comp))
}

pub fn composition_csv(rows: &[CompositionRow]) -> String {
    let mut s = String::from("k,a,b,effect,kind\n");
    for r in rows {
        let kind = match r.kind {
            CompositionKind::Baseline => "baseline",
            CompositionKind::Composite => "composite",
        };
        s.push_str(&format!("{},{},{},{:.6},{kind}\n", r.k, r.a, r.b, r.effect));
    }
    s
}

/// Stars for baselines, dots for composites.
pub fn composition_svg(rows: &[CompositionRow]) -> String {
    use crate::plot::{xy_plot, Series};
    let pick = |kind| rows.iter().filter(|r| r.kind == kind && r.effect.is_finite()).map(|r| (r.k as f64, r.effect)).collect();
    xy_plot(
        "Steering effect by target shift",
        "k",
        "effect",
        &[
            Series { name: "composite".into(), points: pick(CompositionKind::Composite), style: "dot".into() },
            Series { name: "baseline".into(), points: pick(CompositionKind::Baseline), style: "star".into() },
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::prompt::{Layout, Vocab};
    use crate::tablegen::*;

    fn setup() -> (PromptContext, Vec<Sample>, Model<f64>) {
        let pool = build_entity_pool(4, 24, 16).unwrap();
        let demo = Demo::build(&pool, 4).unwrap();
        let ctx = PromptContext { vocab: Vocab::build(&pool).unwrap(), demo, layout: Layout::default(), max_len: 512 };
        let cfg = DatasetConfig { n_categories: 24, n_train: 0, n_heldout: 8, ..Default::default() };
        let samples: Vec<Sample> = (0..8).map(|i| draw_sample(&pool, &ctx.demo, &cfg, 4, 1_000_000 + i, Split::Heldout).unwrap()).collect();
        let mut mc = ModelConfig::tiny();
        mc.vocab_size = ctx.vocab.len();
        mc.max_seq_len = 512;
        (ctx, samples, Model::init(mc, 2).unwrap())
    }

    #[test]
    fn extraction_is_antisymmetric() {
        let (ctx, samples, m) = setup();
        let ps: Vec<PromptInstance> = samples.iter().map(|s| assemble_prompt(&ctx, &s.table, &s.query, None, None).unwrap()).collect();
        let a = extract_shift_vector(&m, &ps, 1, &[1]).unwrap();
        let b = extract_shift_vector(&m, &ps, -1, &[1]).unwrap();
        assert_eq!(a.vectors.len(), 1);
        for (x, y) in a.vectors[0].iter().zip(&b.vectors[0]) {
            assert!((x + y).abs() < 1e-6);
        }
        assert!(a.norm() > 0.0);
        assert!(extract_shift_vector(&m, &ps, 0, &[1]).is_err());
    }

    #[test]
    fn zero_steer_is_identity() {
        let (ctx, samples, m) = setup();
        let p = assemble_prompt(&ctx, &samples[0].table, &samples[0].query, None, None).unwrap();
        let v = extract_shift_vector(&m, std::slice::from_ref(&p), 1, &[0, 1]).unwrap();
        let plain = m.forward(p.input(), &CapturePlan::none(), None).unwrap().0;
        assert_eq!(steer_forward(&m, &p, &v, 0.0, 8.0).unwrap().data, plain.data);
        assert_eq!(steer_forward(&m, &p, &v, 1.0, 0.0).unwrap().data, plain.data);
    }

    #[test]
    fn composite_is_elementwise_sum_and_steers_additively() {
        let (ctx, samples, m) = setup();
        let ps: Vec<PromptInstance> = samples.iter().map(|s| assemble_prompt(&ctx, &s.table, &s.query, None, None).unwrap()).collect();
        let a = extract_shift_vector(&m, &ps, 1, &[1]).unwrap();
        let b = extract_shift_vector(&m, &ps, 2, &[1]).unwrap();
        let c = a.add(&b).unwrap();
        for j in 0..c.vectors[0].len() {
            assert_eq!(c.vectors[0][j], a.vectors[0][j] + b.vectors[0][j]);
        }
        let t = ps[0].header_pos[query_col(&ps[0]).unwrap()];
        let mut two = steer_plan(&a, t, 1.0);
        for e in steer_plan(&b, t, 1.0).edits {
            two.push(e);
        }
        let one = steer_plan(&c, t, 1.0);
        let x = m.forward(ps[0].input(), &CapturePlan::none(), Some(&two)).unwrap().0;
        let y = m.forward(ps[0].input(), &CapturePlan::none(), Some(&one)).unwrap().0;
        for (p, q) in x.data.iter().zip(&y.data) {
            assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn effect_endpoints_and_exclusions() {
        let (ctx, samples, m) = setup();
        let items: Vec<SteerItem> = samples.iter().map(|s| SteerItem::new(&ctx, s).unwrap()).collect();
        let ps: Vec<PromptInstance> = items.iter().map(|i| i.prompt.clone()).collect();
        let v = extract_shift_vector(&m, &ps, 1, &[1]).unwrap();
        let s = steer_summary(&m, &ctx, &items, &v, 1, 0.0, 1e-3).unwrap();
        assert!(s.mean_effect.abs() < 1e-12 || s.included == 0);
        assert_eq!(s.included + s.excluded, items.len());
        let far = steer_summary(&m, &ctx, &items, &v, 10, 1.0, 1e-3).unwrap();
        assert_eq!(far.included, 0);
        assert_eq!(far.excluded, items.len());
    }

    #[test]
    fn middle_window_is_a_third() {
        assert_eq!(middle_window(6), vec![2, 3]);
        assert_eq!(middle_window(2), vec![0, 1]);
        assert_eq!(middle_window(1), vec![0]);
    }
}
