// SPDX-License-Identifier: MIT OR Apache-2.0

//! Fifteen-region segmentation of a counterfactual prompt.
//!
//! Even ids are focal spans:
//!
//! | id | span |
//! |----|------|
//! | 2  | counterfactual header (column `c'` or row `r'`) |
//! | 4  | target column header |
//! | 6  | target row header |
//! | 8  | counterfactual cell |
//! | 10 | target cell |
//! | 12 | column constraint in the question |
//! | 14 | row constraint in the question |
//!
//! Odd ids are the gaps between consecutive focal spans in sequence order,
//! numbered 1, 3, ..., 15. For a column corruption this reproduces the usual
//! layout: 1 is everything before the first header, 3 sits between the two
//! headers, 5 runs up to the target row header, 7 is the row-header delimiter
//! plus any cells before the first focal cell, 9 sits between the two cells,
//! 11 is the rest of the table and the question preamble, 13 bridges the two
//! constraints and 15 is the question suffix and answer prefix. Row
//! corruptions use the same gap rule.

use serde::{Deserialize, Serialize};

use super::{PromptInstance, SpanRole};
use crate::error::{LabError, Result};

pub const REGION_COUNT: usize = 15;

/// Region id (1..=15) for every input token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionMap {
    pub regions: Vec<u8>,
}

impl RegionMap {
    /// Positions in region `id`.
    pub fn positions(&self, id: u8) -> Vec<usize> {
        self.regions
            .iter()
            .enumerate()
            .filter(|(_, &r)| r == id)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn sizes(&self) -> [usize; REGION_COUNT] {
        let mut out = [0; REGION_COUNT];
        for &r in &self.regions {
            out[r as usize - 1] += 1;
        }
        out
    }
}

/// Segments `prompt.input()`. Needs the counterfactual spans, i.e. a prompt
/// assembled with a row or column corruption.
pub fn segment_regions(prompt: &PromptInstance) -> Result<RegionMap> {
    let focal = [
        (SpanRole::FoilHeader, 2u8),
        (SpanRole::TableCol, 4),
        (SpanRole::TableRow, 6),
        (SpanRole::FoilCell, 8),
        (SpanRole::TargetCell, 10),
        (SpanRole::QueryCol, 12),
        (SpanRole::QueryRow, 14),
    ];
    let mut spans = Vec::with_capacity(focal.len());
    for (role, id) in focal {
        let range = prompt.span(role, 0).ok_or_else(|| {
            LabError::Prompt(format!("region map needs span {role:?}; build the prompt from a row/column corruption"))
        })?;
        spans.push((range, id));
    }
    spans.sort_by_key(|(r, _)| r.start);
    let n = prompt.answer_position;
    let mut regions = vec![0u8; n];
    let mut cursor = 0;
    for (gap, (range, id)) in spans.iter().enumerate() {
        if range.start < cursor || range.end > n {
            return Err(LabError::Prompt("overlapping focal spans".into()));
        }
        regions[cursor..range.start].fill(2 * gap as u8 + 1);
        regions[range.clone()].fill(*id);
        cursor = range.end;
    }
    regions[cursor..n].fill(15);
    Ok(RegionMap { regions })
}
