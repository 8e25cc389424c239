// SPDX-License-Identifier: MIT OR Apache-2.0

//! Prompt assembly and token bookkeeping.
//!
//! A prompt is `[BOS, demonstration, table, query, answer]`. Every entity is
//! one token, so each header, constraint and cell occupies exactly one
//! position and clean/counterfactual prompts line up token for token.
//!
//! Three views are derived from a [`PromptInstance`]:
//!
//! - named spans ([`SpanKey`]) for the query constraints, their table
//!   headers, the target cell and the counterfactual header/cell;
//! - a 15-way [`RegionMap`] used by the patching sweeps;
//! - per-token [`TokenCoords`], computed by scanning delimiters the same way
//!   a counting mechanism would.

mod coords;
mod regions;
mod serialize;
mod vocab;

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use coords::{token_coords, TokenClass, TokenCoord, TokenCoords};
pub use regions::{segment_regions, RegionMap, REGION_COUNT};
pub use serialize::{serialize, Format, Layout, SerializedTable};
pub use vocab::*;

use crate::error::{LabError, Result};
use crate::tablegen::{Axis, Corruption, Demo, NoisePlan, QueryKind, QuerySpec, Table};

/// Role of a named span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanRole {
    /// Row constraint in the question.
    QueryRow,
    /// Column constraint in the question.
    QueryCol,
    /// Row header of a target row in the table.
    TableRow,
    /// Column header of a target column in the table.
    TableCol,
    /// A target cell.
    TargetCell,
    /// Header swapped in by the corruption (column header or row header).
    FoilHeader,
    /// Cell the corrupt query points at.
    FoilCell,
}

/// Span name: role plus position within a list (0 for atomic queries).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SpanKey {
    pub role: SpanRole,
    pub index: usize,
}

impl SpanKey {
    pub const fn new(role: SpanRole, index: usize) -> Self {
        Self { role, index }
    }
}

impl fmt::Display for SpanKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.role {
            SpanRole::QueryRow => "q_row",
            SpanRole::QueryCol => "q_col",
            SpanRole::TableRow => "t_row",
            SpanRole::TableCol => "t_col",
            SpanRole::TargetCell => "t_cell",
            SpanRole::FoilHeader => "t_foil_header",
            SpanRole::FoilCell => "t_foil_cell",
        };
        write!(f, "{name}[{}]", self.index)
    }
}

/// Prompt-wide options.
#[derive(Debug, Clone)]
pub struct PromptContext {
    pub vocab: Vocab,
    pub demo: Demo,
    pub layout: Layout,
    /// Prompts longer than this are rejected, never truncated.
    pub max_len: usize,
}

/// A tokenized prompt plus its bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptInstance {
    /// Full sequence including the answer tokens.
    pub token_ids: Vec<TokenId>,
    pub layout: Layout,
    pub spans: BTreeMap<SpanKey, Range<usize>>,
    pub answer_ids: Vec<TokenId>,
    pub foil_ids: Option<Vec<TokenId>>,
    /// Index of the first answer token; the model input is `token_ids[..answer_position]`.
    pub answer_position: usize,
    pub table_range: Range<usize>,
    pub query_range: Range<usize>,
    /// Absolute position of every column header.
    pub header_pos: Vec<usize>,
    /// Absolute position of every cell, `[row][col]`.
    pub cell_pos: Vec<Vec<usize>>,
}

impl PromptInstance {
    /// Tokens fed to the model when predicting the answer.
    pub fn input(&self) -> &[TokenId] {
        &self.token_ids[..self.answer_position]
    }

    /// Position whose logits predict the first answer token.
    pub fn last_position(&self) -> usize {
        self.answer_position - 1
    }

    pub fn span(&self, role: SpanRole, index: usize) -> Option<Range<usize>> {
        self.spans.get(&SpanKey::new(role, index)).cloned()
    }

    /// Span that must exist; a missing one is a bookkeeping bug.
    pub fn expect_span(&self, role: SpanRole, index: usize) -> Result<Range<usize>> {
        self.span(role, index).ok_or_else(|| {
            LabError::Prompt(format!("span {} missing", SpanKey::new(role, index)))
        })
    }

    pub fn n_rows(&self) -> usize {
        self.cell_pos.len()
    }

    pub fn n_cols(&self) -> usize {
        self.header_pos.len()
    }

    /// Debug dump: token strings, spans, regions (when defined) and coordinates.
    pub fn dump(&self, vocab: &Vocab) -> serde_json::Value {
        let tokens: Vec<&str> = self.token_ids.iter().map(|&t| vocab.word(t)).collect();
        let spans: Vec<_> = self
            .spans
            .iter()
            .map(|(k, r)| serde_json::json!({"name": k.to_string(), "start": r.start, "end": r.end}))
            .collect();
        let regions = segment_regions(self).ok().map(|m| m.regions);
        let coords = token_coords(self);
        serde_json::json!({
            "tokens": tokens,
            "answer_position": self.answer_position,
            "spans": spans,
            "regions": regions,
            "coords": coords.coords,
        })
    }
}

enum Piece {
    Word(&'static str),
    Row(usize),
    Col(usize),
}

fn question(query: &QuerySpec) -> Vec<Piece> {
    use Piece::*;
    let cols = || {
        let mut v = Vec::new();
        for (k, _) in query.col_targets.iter().enumerate() {
            if k > 0 {
                v.push(Word(","));
            }
            v.push(Col(k));
        }
        v
    };
    let rows = || {
        let mut v = Vec::new();
        for (k, _) in query.row_targets.iter().enumerate() {
            if k > 0 {
                v.push(Word(","));
            }
            v.push(Row(k));
        }
        v
    };
    let mut out = Vec::new();
    match query.template_id {
        0 => {
            out.extend([Word("what"), Word("is"), Word("the")]);
            out.extend(cols());
            out.push(Word("for"));
            out.extend(rows());
            out.push(Word("?"));
        }
        1 => {
            out.extend(
                ["according", "to", "the", "table", ",", "what", "is", "the", "value", "of"]
                    .map(Word),
            );
            out.extend(cols());
            out.push(Word("for"));
            out.extend(rows());
            out.push(Word("?"));
        }
        _ => {
            out.extend([Word("find"), Word("the")]);
            out.extend(cols());
            out.push(Word("of"));
            out.extend(rows());
            out.push(Word("."));
        }
    }
    out
}

/// Writes `Q: <question> A:` and returns (span entries, position after `A:`).
fn push_query(
    vocab: &Vocab,
    ids: &mut Vec<TokenId>,
    table: &Table,
    query: &QuerySpec,
    spans: Option<&mut BTreeMap<SpanKey, Range<usize>>>,
) -> Result<()> {
    let mut local = BTreeMap::new();
    ids.push(vocab.id("Q:")?);
    for piece in question(query) {
        let at = ids.len();
        match piece {
            Piece::Word(w) => ids.push(vocab.id(w)?),
            Piece::Row(k) => {
                ids.push(vocab.id(&table.row_headers[query.row_targets[k]])?);
                local.insert(SpanKey::new(SpanRole::QueryRow, k), at..at + 1);
            }
            Piece::Col(k) => {
                ids.push(vocab.id(&table.col_headers[query.col_targets[k]])?);
                local.insert(SpanKey::new(SpanRole::QueryCol, k), at..at + 1);
            }
        }
    }
    ids.push(vocab.id("A:")?);
    if let Some(spans) = spans {
        spans.extend(local);
    }
    Ok(())
}

/// Answer tokens: target values in order, separated by commas.
pub fn answer_ids(vocab: &Vocab, table: &Table, query: &QuerySpec) -> Result<Vec<TokenId>> {
    let mut out = Vec::new();
    for (k, (r, c)) in query.targets().into_iter().enumerate() {
        if k > 0 {
            out.push(COMMA);
        }
        out.push(vocab.id(table.value(r, c))?);
    }
    Ok(out)
}

/// Builds the prompt for `query` over `table`. `corruption` adds the foil
/// spans and foil answer; `noise` perturbs the target row.
pub fn assemble_prompt(
    ctx: &PromptContext,
    table: &Table,
    query: &QuerySpec,
    corruption: Option<&Corruption>,
    noise: Option<&NoisePlan>,
) -> Result<PromptInstance> {
    query.check(table)?;
    let vocab = &ctx.vocab;
    let single = query.targets().len() == 1;
    let demo_query = ctx
        .demo
        .query(if single { QueryKind::Atomic } else { query.kind });

    let mut ids = vec![BOS];
    let demo_tab = serialize(vocab, &ctx.demo.table, ctx.layout, None)?;
    ids.extend(&demo_tab.ids);
    push_query(vocab, &mut ids, &ctx.demo.table, demo_query, None)?;
    ids.extend(answer_ids(vocab, &ctx.demo.table, demo_query)?);
    ids.push(NEWLINE);

    let table_start = ids.len();
    let ser = serialize(vocab, table, ctx.layout, noise)?;
    ids.extend(&ser.ids);
    let table_range = table_start..ids.len();
    let header_pos: Vec<usize> = ser.header_pos.iter().map(|p| p + table_start).collect();
    let cell_pos: Vec<Vec<usize>> = ser
        .cell_pos
        .iter()
        .map(|row| row.iter().map(|p| p + table_start).collect())
        .collect();

    let mut spans = BTreeMap::new();
    let query_start = ids.len();
    push_query(vocab, &mut ids, table, query, Some(&mut spans))?;
    let answer_position = ids.len();
    let query_range = query_start..answer_position;

    let one = |p: usize| p..p + 1;
    for (k, &r) in query.row_targets.iter().enumerate() {
        spans.insert(SpanKey::new(SpanRole::TableRow, k), one(cell_pos[r][0]));
    }
    for (k, &c) in query.col_targets.iter().enumerate() {
        spans.insert(SpanKey::new(SpanRole::TableCol, k), one(header_pos[c]));
    }
    for (k, (r, c)) in query.targets().into_iter().enumerate() {
        spans.insert(SpanKey::new(SpanRole::TargetCell, k), one(cell_pos[r][c]));
    }

    let mut foil_ids = None;
    if let Some(cor) = corruption {
        let (r, c) = (query.row(), query.col());
        let (r2, c2) = (cor.corrupt_query.row(), cor.corrupt_query.col());
        match cor.axis {
            Axis::Column => {
                spans.insert(SpanKey::new(SpanRole::FoilHeader, 0), one(header_pos[c2]));
            }
            Axis::Row => {
                spans.insert(SpanKey::new(SpanRole::FoilHeader, 0), one(cell_pos[r2][0]));
            }
            Axis::Both => {}
        }
        if (r2, c2) == (r, c) {
            return Err(LabError::Prompt("corruption does not move the target".into()));
        }
        spans.insert(SpanKey::new(SpanRole::FoilCell, 0), one(cell_pos[r2][c2]));
        foil_ids = Some(vec![vocab.id(&cor.foil)?]);
    }

    let answer = answer_ids(vocab, table, query)?;
    ids.extend(&answer);
    if ids.len() > ctx.max_len {
        return Err(LabError::Prompt(format!(
            "prompt of {} tokens exceeds the context of {}",
            ids.len(),
            ctx.max_len
        )));
    }
    Ok(PromptInstance {
        token_ids: ids,
        layout: ctx.layout,
        spans,
        answer_ids: answer,
        foil_ids,
        answer_position,
        table_range,
        query_range,
        header_pos,
        cell_pos,
    })
}

/// Several questions about one table: the prompt [`assemble_prompt`] builds
/// for the first query, followed by `NEWLINE, query, answer` for each further
/// query. Returns the tokens and the answer spans.
pub fn assemble_multi_query(
    ctx: &PromptContext,
    table: &Table,
    queries: &[QuerySpec],
) -> Result<(Vec<TokenId>, Vec<Range<usize>>)> {
    let (first, rest) = queries
        .split_first()
        .ok_or_else(|| LabError::Prompt("no queries".into()))?;
    let p = assemble_prompt(ctx, table, first, None, None)?;
    let mut spans = vec![p.answer_position..p.token_ids.len()];
    let mut ids = p.token_ids;
    for q in rest {
        q.check(table)?;
        ids.push(NEWLINE);
        push_query(&ctx.vocab, &mut ids, table, q, None)?;
        let at = ids.len();
        ids.extend(answer_ids(&ctx.vocab, table, q)?);
        spans.push(at..ids.len());
    }
    if ids.len() > ctx.max_len {
        return Err(LabError::Prompt(format!(
            "prompt of {} tokens exceeds the context of {}",
            ids.len(),
            ctx.max_len
        )));
    }
    Ok((ids, spans))
}

#[cfg(test)]
mod tests;
