// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::vocab::*;
use crate::error::Result;
use crate::tablegen::{NoiseKind, NoisePlan, Placement, Table};

/// Table linearization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Markdown,
    Csv,
    Html,
}

impl Format {
    pub const ALL: [Format; 3] = [Format::Markdown, Format::Csv, Format::Html];
}

/// Layout switches that change the token stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub format: Format,
    /// Markdown only: emit the `| --- |` row under the header.
    pub separator_row: bool,
}

impl Default for Layout {
    fn default() -> Self {
        Self {
            format: Format::Markdown,
            separator_row: true,
        }
    }
}

/// A serialized table with the token offset of every header and cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SerializedTable {
    pub ids: Vec<TokenId>,
    /// Offset of each column header.
    pub header_pos: Vec<usize>,
    /// `cell_pos[i][j]`: offset of `cells[i][j]`.
    pub cell_pos: Vec<Vec<usize>>,
}

impl SerializedTable {
    pub fn text(&self, vocab: &Vocab) -> String {
        vocab.detokenize(&self.ids)
    }
}

struct Writer<'v> {
    vocab: &'v Vocab,
    ids: Vec<TokenId>,
}

impl Writer<'_> {
    fn push(&mut self, id: TokenId) {
        self.ids.push(id);
    }

    fn word(&mut self, w: &str) -> Result<usize> {
        let at = self.ids.len();
        self.ids.push(self.vocab.id(w)?);
        Ok(at)
    }
}

/// Noise tokens for one insertion point: `amount` structural units, or the
/// same number of tokens of filler.
fn noise_tokens(format: Format, plan: &NoisePlan) -> Vec<TokenId> {
    let unit: &[TokenId] = match format {
        Format::Markdown => &[PIPE],
        Format::Csv => &[COMMA],
        Format::Html => &[TD_OPEN, TD_CLOSE],
    };
    let n = plan.spec.amount * unit.len();
    match plan.spec.kind {
        NoiseKind::StructuralPipes => unit.iter().copied().cycle().take(n).collect(),
        NoiseKind::LengthFiller => vec![FILLER; n],
    }
}

/// Linearizes `table`. Noise, when given, is inserted inside the target row
/// right before the target cell's content or right after its closing
/// delimiter.
pub fn serialize(
    vocab: &Vocab,
    table: &Table,
    layout: Layout,
    noise: Option<&NoisePlan>,
) -> Result<SerializedTable> {
    let mut w = Writer {
        vocab,
        ids: Vec::new(),
    };
    let (n_rows, n_cols) = (table.n_rows(), table.n_cols());
    let mut header_pos = Vec::with_capacity(n_cols);
    let mut cell_pos = vec![vec![0; n_cols]; n_rows];
    let noise_at = |row: usize, col: usize, placement: Placement| {
        noise.filter(|p| p.row == row && p.col == col && p.spec.placement == placement && p.spec.amount > 0)
    };
    match layout.format {
        Format::Markdown => {
            w.push(PIPE);
            for h in &table.col_headers {
                header_pos.push(w.word(h)?);
                w.push(PIPE);
            }
            w.push(NEWLINE);
            if layout.separator_row {
                w.push(PIPE);
                for _ in 0..n_cols {
                    w.push(DASH_RUN);
                    w.push(PIPE);
                }
                w.push(NEWLINE);
            }
            for (i, row) in table.cells.iter().enumerate() {
                w.push(PIPE);
                for (j, v) in row.iter().enumerate() {
                    if let Some(p) = noise_at(i, j, Placement::BeforeTarget) {
                        w.ids.extend(noise_tokens(layout.format, p));
                    }
                    cell_pos[i][j] = w.word(v)?;
                    w.push(PIPE);
                    if let Some(p) = noise_at(i, j, Placement::AfterTarget) {
                        w.ids.extend(noise_tokens(layout.format, p));
                    }
                }
                w.push(NEWLINE);
            }
        }
        Format::Csv => {
            for (j, h) in table.col_headers.iter().enumerate() {
                if j > 0 {
                    w.push(COMMA);
                }
                header_pos.push(w.word(h)?);
            }
            w.push(NEWLINE);
            for (i, row) in table.cells.iter().enumerate() {
                // After-target noise follows the comma that closes the target.
                let mut pending = None;
                for (j, v) in row.iter().enumerate() {
                    if j > 0 {
                        w.push(COMMA);
                        if let Some(p) = pending.take() {
                            w.ids.extend(noise_tokens(layout.format, p));
                        }
                    }
                    if let Some(p) = noise_at(i, j, Placement::BeforeTarget) {
                        w.ids.extend(noise_tokens(layout.format, p));
                    }
                    cell_pos[i][j] = w.word(v)?;
                    pending = noise_at(i, j, Placement::AfterTarget).or(pending);
                }
                if let Some(p) = pending {
                    w.push(COMMA);
                    w.ids.extend(noise_tokens(layout.format, p));
                }
                w.push(NEWLINE);
            }
        }
        Format::Html => {
            w.push(TR_OPEN);
            for h in &table.col_headers {
                w.push(TH_OPEN);
                header_pos.push(w.word(h)?);
                w.push(TH_CLOSE);
            }
            w.push(TR_CLOSE);
            w.push(NEWLINE);
            for (i, row) in table.cells.iter().enumerate() {
                w.push(TR_OPEN);
                for (j, v) in row.iter().enumerate() {
                    w.push(TD_OPEN);
                    if let Some(p) = noise_at(i, j, Placement::BeforeTarget) {
                        // Empty cells go before the target's own <td>.
                        w.ids.pop();
                        w.ids.extend(noise_tokens(layout.format, p));
                        w.push(TD_OPEN);
                    }
                    cell_pos[i][j] = w.word(v)?;
                    w.push(TD_CLOSE);
                    if let Some(p) = noise_at(i, j, Placement::AfterTarget) {
                        w.ids.extend(noise_tokens(layout.format, p));
                    }
                }
                w.push(TR_CLOSE);
                w.push(NEWLINE);
            }
        }
    }
    Ok(SerializedTable {
        ids: w.ids,
        header_pos,
        cell_pos,
    })
}
