// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};
use crate::model::{ModelConfig, Precision, TrainConfig};
use crate::prompt::{Format, Layout};
use crate::tablegen::{DatasetConfig, DimsRange};

/// Transformer shape; the vocabulary size comes from the generated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub rope_theta: f64,
    pub max_seq_len: usize,
    /// Start the unembedding at the transposed embedding divided by
    /// `d_model` instead of an independent random draw.
    pub aligned_unembed: bool,
}

impl Default for ModelShape {
    fn default() -> Self {
        let d = ModelConfig::desk(0);
        Self {
            n_layers: d.n_layers,
            n_heads: d.n_heads,
            d_model: d.d_model,
            d_head: d.d_head,
            d_mlp: d.d_mlp,
            rope_theta: d.rope_theta,
            max_seq_len: d.max_seq_len,
            aligned_unembed: false,
        }
    }
}

impl ModelShape {
    pub fn config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_head: self.d_head,
            d_mlp: self.d_mlp,
            vocab_size,
            rope_theta: self.rope_theta,
            max_seq_len: self.max_seq_len,
            norm_eps: 1e-5,
            precision: Precision::F32,
        }
    }
}

/// How training sequences are built from training samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainData {
    /// Atomic samples are extended with further questions about other cells
    /// of the same table, up to this many questions per sequence.
    pub queries_per_table: usize,
}

impl Default for TrainData {
    fn default() -> Self {
        Self { queries_per_table: 1 }
    }
}

/// Knobs of the analysis stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Held-out samples used for evaluation and ablation.
    pub n_eval: usize,
    /// Counterfactual pairs used for patching sweeps.
    pub n_patch: usize,
    /// Prompts used for probes, similarity and interaction scores.
    pub n_probe: usize,
    pub top_k_alignment: usize,
    pub top_k_coordinate: usize,
    pub top_k_probe_heads: usize,
    pub ridge_lambda: f64,
    /// Random head sets drawn for every ablation control.
    pub control_draws: usize,
    pub permutations: usize,
    /// Residual indices used for steering; the middle third when absent.
    pub steer_window: Option<Vec<usize>>,
    /// Collapse the steering window to one averaged vector.
    pub global_average: bool,
    pub alpha: f64,
    /// Scale applied to raw (not unit) vectors in the composition test.
    pub compose_alpha: f64,
    pub compose_ks: Vec<i32>,
    pub max_offset: i32,
    pub n_steer: usize,
    pub noise_amount: usize,
    pub multicell_subset: usize,
    pub attn_threshold: f64,
    pub mover_fraction: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            n_eval: 300,
            n_patch: 100,
            n_probe: 200,
            top_k_alignment: 3,
            top_k_coordinate: 4,
            top_k_probe_heads: 4,
            ridge_lambda: 1.0,
            control_draws: 3,
            permutations: 999,
            steer_window: None,
            global_average: false,
            alpha: 8.0,
            compose_alpha: 1.0,
            compose_ks: vec![-3, -2, -1, 1, 2, 3],
            max_offset: 4,
            n_steer: 100,
            noise_amount: 2,
            multicell_subset: 2,
            attn_threshold: 0.3,
            mover_fraction: 0.5,
        }
    }
}

/// Everything a run needs; embedded verbatim in the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub format: Format,
    pub separator_row: bool,
    pub dataset: DatasetConfig,
    pub model: ModelShape,
    pub train: TrainConfig,
    pub train_data: TrainData,
    pub analysis: AnalysisConfig,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// The desk model: 6 layers, 4 heads, width 128, tables up to 6x6.
    pub fn desk() -> Self {
        Self {
            seed: 1,
            format: Format::Markdown,
            separator_row: true,
            dataset: DatasetConfig { n_categories: 24, n_train: 20_000, n_heldout: 500, ..Default::default() },
            model: ModelShape::default(),
            train: TrainConfig { steps: 5000, batch_size: 8, lr: 1e-3, max_seconds: Some(1800.0), eval_interval: 500, ..Default::default() },
            train_data: TrainData { queries_per_table: 16 },
            analysis: AnalysisConfig::default(),
            threads: 0,
        }
    }

    /// Two layers, 4x4 tables, 50 samples; finishes in a few minutes.
    pub fn smoke() -> Self {
        let mut c = Self::desk();
        c.dataset = DatasetConfig {
            n_categories: 12,
            values_per_category: 8,
            dims: DimsRange::square(4, 4),
            n_train: 50,
            n_heldout: 50,
            ..Default::default()
        };
        c.model = ModelShape { n_layers: 2, n_heads: 2, d_model: 32, d_head: 16, d_mlp: 64, ..ModelShape::default() };
        c.train = TrainConfig { steps: 30, batch_size: 4, eval_interval: 30, eval_samples: 20, max_seconds: None, ..Default::default() };
        c.train_data = TrainData { queries_per_table: 4 };
        c.analysis = AnalysisConfig {
            n_eval: 20,
            n_patch: 10,
            n_probe: 20,
            top_k_alignment: 1,
            top_k_coordinate: 2,
            top_k_probe_heads: 1,
            control_draws: 2,
            permutations: 99,
            n_steer: 10,
            compose_ks: vec![-2, -1, 1, 2],
            max_offset: 2,
            ..AnalysisConfig::default()
        };
        c
    }

    pub fn layout(&self) -> Layout {
        Layout { format: self.format, separator_row: self.separator_row }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate().map_err(|e| prefix(e, "dataset"))?;
        self.train.validate().map_err(|e| prefix(e, "train"))?;
        self.model.config(64).validate().map_err(|e| prefix(e, "model"))?;
        if self.train_data.queries_per_table == 0 {
            return Err(LabError::config("train_data.queries_per_table", "must be at least 1"));
        }
        let a = &self.analysis;
        if a.n_eval == 0 || a.n_patch == 0 || a.n_probe < 5 || a.n_steer == 0 {
            return Err(LabError::config("analysis", "sample counts must be positive (n_probe at least 5)"));
        }
        if a.top_k_alignment == 0 || a.top_k_coordinate == 0 || a.top_k_probe_heads == 0 {
            return Err(LabError::config("analysis.top_k_alignment", "head counts must be positive"));
        }
        let heads = self.model.n_layers * self.model.n_heads;
        if a.top_k_alignment * 2 > heads {
            return Err(LabError::config("analysis.top_k_alignment", format!("needs at most half of the {heads} heads so a disjoint random control exists")));
        }
        if let Some(w) = &a.steer_window {
            if w.is_empty() || w.iter().any(|&l| l > self.model.n_layers) {
                return Err(LabError::config("analysis.steer_window", "must list residual indices in 0..=n_layers"));
            }
        }
        if a.compose_ks.contains(&0) || a.max_offset < 1 {
            return Err(LabError::config("analysis.compose_ks", "offsets must be non-zero and max_offset positive"));
        }
        if self.dataset.n_heldout < a.n_eval.max(a.n_patch).max(a.n_probe).max(a.n_steer) {
            return Err(LabError::config("dataset.n_heldout", "must cover every analysis sample count"));
        }
        Ok(())
    }

    /// Reads a JSON config; unknown fields are rejected with their path.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| LabError::config(format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

fn prefix(e: LabError, section: &str) -> LabError {
    match e {
        LabError::Config { field, reason } => LabError::Config { field: format!("{section}.{field}"), reason },
        other => other,
    }
}
