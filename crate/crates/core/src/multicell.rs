// SPDX-License-Identifier: MIT OR Apache-2.0

//! Multi-row and multi-column questions: evaluation, ablation with heads
//! found on atomic questions, and interaction heatmaps over several targets.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binding::{categorize_output, decode_item, split_answer, zero_plan, ErrorBreakdown, ErrorCategory, QaItem};
use crate::coords::{rope_interaction, InteractionReport, QuerySites};
use crate::error::Result;
use crate::model::{Model, Scalar};
use crate::prompt::PromptInstance;
use crate::tablegen::QueryKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiCellReport {
    pub kind: QueryKind,
    pub em: f64,
    /// Accuracy of answer position `k` over items with at least `k + 1`
    /// targets.
    pub position_accuracy: Vec<f64>,
    /// One category per (item, position).
    pub breakdown: ErrorBreakdown,
    pub heads: Vec<(usize, usize)>,
    pub n_items: usize,
    /// Per item, the category of each position, for flow diagrams.
    pub categories: Vec<Vec<ErrorCategory>>,
}

/// Greedy list decoding with `heads` zeroed. Missing positions count as
/// `not_in_table`.
pub fn multicell_ablation<T: Scalar>(model: &Model<T>, kind: QueryKind, items: &[QaItem], heads: &[(usize, usize)]) -> Result<MultiCellReport> {
    let plan = zero_plan(heads);
    let plan = (!plan.is_empty()).then_some(&plan);
    let per: Vec<(bool, Vec<ErrorCategory>)> = items
        .par_iter()
        .map(|it| -> Result<_> {
            let pred = decode_item(model, it, plan)?;
            let pieces = split_answer(&pred);
            let cats = it
                .query
                .targets()
                .into_iter()
                .enumerate()
                .map(|(k, (r, c))| pieces.get(k).map_or(ErrorCategory::NotInTable, |p| categorize_output(p, it, r, c)))
                .collect();
            Ok((pred == it.answer(), cats))
        })
        .collect::<Result<_>>()?;
    let width = per.iter().map(|p| p.1.len()).max().unwrap_or(0);
    let mut hits = vec![0usize; width];
    let mut seen = vec![0usize; width];
    let mut breakdown = ErrorBreakdown::default();
    for (_, cats) in &per {
        for (k, &c) in cats.iter().enumerate() {
            seen[k] += 1;
            hits[k] += usize::from(c == ErrorCategory::Exact);
            breakdown.add(c);
        }
    }
    Ok(MultiCellReport {
        kind,
        em: per.iter().filter(|p| p.0).count() as f64 / items.len().max(1) as f64,
        position_accuracy: hits.iter().zip(&seen).map(|(&h, &s)| h as f64 / s.max(1) as f64).collect(),
        breakdown,
        heads: heads.to_vec(),
        n_items: items.len(),
        categories: per.into_iter().map(|p| p.1).collect(),
    })
}

pub fn multicell_eval<T: Scalar>(model: &Model<T>, kind: QueryKind, items: &[QaItem]) -> Result<MultiCellReport> {
    multicell_ablation(model, kind, items, &[])
}

/// Item-by-position category transitions between two reports.
pub fn flow(before: &MultiCellReport, after: &MultiCellReport) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for (b, a) in before.categories.iter().zip(&after.categories) {
        for (x, y) in b.iter().zip(a) {
            *m.entry(format!("{}->{}", x.name(), y.name())).or_default() += 1;
        }
    }
    m
}

/// Interaction matrices of `heads`, with every column constraint of a
/// question feeding its column's query mean; one report per number of
/// queried columns.
pub fn multicell_rope_heatmap<T: Scalar>(model: &Model<T>, prompts: &[PromptInstance], heads: &[(usize, usize)]) -> Result<BTreeMap<usize, InteractionReport>> {
    let mut groups: BTreeMap<usize, Vec<PromptInstance>> = BTreeMap::new();
    for p in prompts {
        let n = p.spans.keys().filter(|k| k.role == crate::prompt::SpanRole::QueryCol).count();
        groups.entry(n).or_default().push(p.clone());
    }
    groups.into_iter().map(|(n, ps)| Ok((n, rope_interaction(model, &ps, Some(heads), QuerySites::All)?))).collect()
}
