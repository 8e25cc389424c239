// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::vocab::*;
use super::{Format, PromptInstance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenClass {
    /// Data cell, key column included.
    Cell,
    /// Closing cell delimiter: `|` after a cell, `,` after a cell, `</td>`.
    Delimiter,
    /// Column header in the header row.
    Header,
    Other,
}

/// Grid coordinates of one token; `-1` outside the grid. Header-row tokens
/// have `r_idx == -1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenCoord {
    pub r_idx: i32,
    pub c_idx: i32,
    pub class: TokenClass,
}

impl TokenCoord {
    const OUTSIDE: TokenCoord = TokenCoord {
        r_idx: -1,
        c_idx: -1,
        class: TokenClass::Other,
    };

    fn new(r_idx: i32, c_idx: i32, class: TokenClass) -> Self {
        Self { r_idx, c_idx, class }
    }
}

/// Coordinates of every input token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCoords {
    pub coords: Vec<TokenCoord>,
}

impl TokenCoords {
    /// Positions of a class whose row and column are both known.
    pub fn gridded(&self, class: TokenClass) -> impl Iterator<Item = (usize, TokenCoord)> + '_ {
        self.coords
            .iter()
            .copied()
            .enumerate()
            .filter(move |(_, c)| c.class == class && c.r_idx >= 0 && c.c_idx >= 0)
    }
}

/// Left-to-right scan of the table tokens. Column indices come from counting
/// cell delimiters since the last row boundary, row indices from counting row
/// boundaries; nothing is read from the source table, so inserted delimiters
/// shift the coordinates exactly as they would shift a counter.
pub fn token_coords(prompt: &PromptInstance) -> TokenCoords {
    let mut coords = vec![TokenCoord::OUTSIDE; prompt.answer_position];
    let table = &prompt.token_ids[prompt.table_range.clone()];
    let sep_lines = usize::from(prompt.layout.format == Format::Markdown && prompt.layout.separator_row);
    let row_of = |line: usize| -> i32 {
        if line == 0 || line <= sep_lines {
            -1
        } else {
            (line - 1 - sep_lines) as i32
        }
    };
    let mut line = 0usize;
    let mut count = 0i32;
    for (k, &tok) in table.iter().enumerate() {
        let r = row_of(line);
        let is_sep_line = line >= 1 && line <= sep_lines;
        let content_class = if line == 0 {
            TokenClass::Header
        } else {
            TokenClass::Cell
        };
        let coord = match (prompt.layout.format, tok) {
            (_, NEWLINE) => {
                line += 1;
                count = 0;
                TokenCoord::new(r, -1, TokenClass::Other)
            }
            (Format::Markdown, PIPE) => {
                count += 1;
                if is_sep_line {
                    TokenCoord::OUTSIDE
                } else if count < 2 {
                    TokenCoord::new(r, -1, TokenClass::Other)
                } else {
                    TokenCoord::new(r, count - 2, TokenClass::Delimiter)
                }
            }
            (Format::Markdown, DASH_RUN) => TokenCoord::OUTSIDE,
            (Format::Markdown, FILLER) => TokenCoord::new(r, count - 1, TokenClass::Other),
            (Format::Markdown, _) => TokenCoord::new(r, count - 1, content_class),
            (Format::Csv, COMMA) => {
                count += 1;
                TokenCoord::new(r, count - 1, TokenClass::Delimiter)
            }
            (Format::Csv, FILLER) => TokenCoord::new(r, count, TokenClass::Other),
            (Format::Csv, _) => TokenCoord::new(r, count, content_class),
            (Format::Html, TD_CLOSE | TH_CLOSE) => {
                count += 1;
                TokenCoord::new(r, count - 1, TokenClass::Delimiter)
            }
            (Format::Html, TR_OPEN | TR_CLOSE) => TokenCoord::new(r, -1, TokenClass::Other),
            (Format::Html, TD_OPEN | TH_OPEN | FILLER) => TokenCoord::new(r, count, TokenClass::Other),
            (Format::Html, _) => TokenCoord::new(r, count, content_class),
        };
        coords[prompt.table_range.start + k] = coord;
    }
    TokenCoords { coords }
}
