// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-stage `summary.json` records. Acceptance checks and the report read
//! these rather than recomputing anything.

use serde::{Deserialize, Serialize};

use crate::binding::ErrorBreakdown;
use crate::coords::NoiseRow;
use crate::geometry::SteerSummary;

pub type Head = (usize, usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSummary {
    pub n_train: usize,
    pub n_heldout: usize,
    pub vocab_size: usize,
    pub mean_prompt_len: f64,
    pub max_prompt_len: usize,
    /// sha256 of the two sample files.
    pub train_sha256: String,
    pub heldout_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps_run: usize,
    pub stopped_by: String,
    pub final_em: f64,
    pub n_params: usize,
    pub n_sequences: usize,
    pub mean_answers_per_sequence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub atomic_em: f64,
    pub multi_row_em: f64,
    pub multi_col_em: f64,
    pub n_items: usize,
    pub atomic: ErrorBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSummary {
    pub n_pairs: usize,
    /// Mean effect on the target-cell region per residual index.
    pub target_cell_curve: Vec<f64>,
    /// Residual indices counted as early layers.
    pub early: (usize, usize),
    pub early_mean: f64,
    /// Best contiguous middle band and its mean.
    pub band: (usize, usize),
    pub band_mean: f64,
    pub top_heads: Vec<(usize, usize, f64)>,
}

impl PatchSummary {
    pub fn band_gain(&self) -> f64 {
        self.band_mean - self.early_mean
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Summary {
    pub row_heads: Vec<Head>,
    pub col_heads: Vec<Head>,
    pub row_similarity: Vec<f64>,
    pub col_similarity: Vec<f64>,
    pub baseline_em: f64,
    pub ablated_em: f64,
    pub random_em: f64,
    pub drop_ablated: f64,
    pub drop_random: f64,
    pub wrong_row_ablated: f64,
    pub wrong_row_random: f64,
    pub random_heads: Vec<Vec<Head>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Summary {
    pub mover_heads: Vec<(usize, usize, f64, f64)>,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage3Summary {
    pub row_cell: Vec<f64>,
    pub col_cell: Vec<f64>,
    pub row_delimiter: Vec<f64>,
    pub col_delimiter: Vec<f64>,
    /// Residual indices treated as the first third of the network.
    pub early: (usize, usize),
    pub sawtooth_layer: usize,
    pub sawtooth_score: f64,
    pub sawtooth_p: f64,
    pub coordinate_heads: Vec<Head>,
    pub delimiter_heads: Vec<Head>,
    pub cell_heads: Vec<Head>,
    /// Head-output patching effect, `[target][site]` with target in
    /// (row, col) and site in (cell, delimiter).
    pub head_patch: [[f64; 2]; 2],
    pub head_patch_n: [[usize; 2]; 2],
}

fn mean_range(v: &[f64], (lo, hi): (usize, usize)) -> f64 {
    let s = &v[lo..=hi.min(v.len() - 1)];
    s.iter().sum::<f64>() / s.len() as f64
}

impl Stage3Summary {
    pub fn early_col_delimiter(&self) -> f64 {
        mean_range(&self.col_delimiter, self.early)
    }

    pub fn early_col_cell(&self) -> f64 {
        mean_range(&self.col_cell, self.early)
    }

    pub fn peak_col(&self) -> f64 {
        self.col_cell.iter().chain(&self.col_delimiter).cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn peak_row(&self) -> f64 {
        self.row_cell.iter().chain(&self.row_delimiter).cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerStageSummary {
    pub window: Vec<usize>,
    pub alpha: f64,
    pub shift_norms: Vec<(i32, f64)>,
    pub rows: Vec<SteerSummary>,
}

impl SteerStageSummary {
    pub fn get(&self, k: i32) -> Option<&SteerSummary> {
        self.rows.iter().find(|r| r.k == k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposeSummary {
    pub rank_correlation: Option<f64>,
    pub n_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSummary {
    pub rows: Vec<NoiseRow>,
}

impl NoiseSummary {
    pub fn em(&self, condition: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.condition == condition).map(|r| r.em)
    }

    /// EM lost relative to the baseline, in points.
    pub fn drop_points(&self, condition: &str) -> Option<f64> {
        Some(100.0 * (self.em("baseline")? - self.em(condition)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MulticellSummary {
    pub multi_row_em: f64,
    pub multi_col_em: f64,
    pub row_heads: Vec<Head>,
    pub multi_row_ablated_em: f64,
    /// Multi-row EM with size-matched random heads, one per seed.
    pub multi_row_random_em: Vec<f64>,
    pub random_seeds: Vec<u64>,
    pub n_items: usize,
    pub heatmap_cardinalities: Vec<usize>,
}
