// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only rotary transformer with hooks, training and evaluation.
//!
//! Blocks are pre-norm: `x += attn(rms(x))`, `x += mlp(rms(x))`, with a
//! SiLU-gated MLP, no biases and an untied unembedding. All parameters live
//! in one flat list of named tensors so the optimizer, the checkpoint writer
//! and the gradient checker treat them uniformly.

mod checkpoint;
mod forward;
mod gradcheck;
mod hooks;
mod rope;
mod scalar;
mod train;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_container, save_checkpoint, write_container, Record};
pub use forward::{Logits, Sequence};
pub use gradcheck::{grad_check, rel_err, GradCheckReport, GradCoord};
pub use hooks::{ActivationTrace, CapturePlan, Edit, HookPoint, InterventionPlan, LogitRows};
pub use rope::{rope_angle, rope_apply};
pub use scalar::{gemm, matmul, Mat, MatMut, Scalar};
pub use train::{
    decode_answer, decode_answer_with, em_eval, train, EvalExample, LossMode, StepMetrics, TrainConfig, TrainExample, TrainReport,
};

use crate::error::{LabError, Result};
use rope::RopeTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub rope_theta: f64,
    pub max_seq_len: usize,
    pub norm_eps: f64,
    pub precision: Precision,
}

impl ModelConfig {
    /// The desk model: 6 layers, 4 heads, width 128.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            n_layers: 6,
            n_heads: 4,
            d_model: 128,
            d_head: 32,
            d_mlp: 256,
            vocab_size,
            rope_theta: 10000.0,
            max_seq_len: 512,
            norm_eps: 1e-5,
            precision: Precision::F32,
        }
    }

    /// Two layers, two heads, width 16, vocabulary of 24.
    pub fn tiny() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_head: 8,
            d_mlp: 32,
            vocab_size: 24,
            rope_theta: 10000.0,
            max_seq_len: 64,
            norm_eps: 1e-5,
            precision: Precision::F64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| Err(LabError::config(field, reason));
        if self.n_heads == 0 || self.d_model != self.n_heads * self.d_head {
            return bad("d_model", format!("must equal n_heads x d_head ({} x {})", self.n_heads, self.d_head));
        }
        if self.d_head % 2 != 0 {
            return bad("d_head", "must be even for rotary pairs".into());
        }
        if self.n_layers == 0 || self.d_mlp == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return bad("n_layers", "layers, d_mlp, vocab_size and max_seq_len must be positive".into());
        }
        if !(self.rope_theta > 1.0) || !(self.norm_eps > 0.0) {
            return bad("rope_theta", "rope_theta must exceed 1 and norm_eps must be positive".into());
        }
        Ok(())
    }

    /// `V d + L (2d + 4d^2 + 3 d d_mlp) + d + d V`.
    pub fn param_count(&self) -> usize {
        let (v, d, l, m) = (self.vocab_size, self.d_model, self.n_layers, self.d_mlp);
        v * d + l * (2 * d + 4 * d * d + 3 * d * m) + d + d * v
    }
}

/// Slot of each tensor inside a layer's parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Slot {
    AttnNorm = 0,
    Wq,
    Wk,
    Wv,
    Wo,
    MlpNorm,
    WGate,
    WUp,
    WDown,
}

pub(crate) const SLOTS: usize = 9;
const SLOT_NAMES: [&str; SLOTS] = ["attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_gate", "w_up", "w_down"];

/// One named parameter tensor, row-major. Linear maps are stored `[in, out]`
/// and applied as `x @ W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    /// `embed`, then 9 tensors per layer, then `final_norm`, `unembed`.
    pub params: Vec<Param<T>>,
    pub(crate) rope: RopeTable<T>,
}

impl<T: Scalar> Model<T> {
    pub(crate) fn idx(&self, layer: usize, slot: Slot) -> usize {
        1 + layer * SLOTS + slot as usize
    }

    pub(crate) fn w(&self, layer: usize, slot: Slot) -> &[T] {
        &self.params[self.idx(layer, slot)].data
    }

    pub(crate) fn embed(&self) -> &[T] {
        &self.params[0].data
    }

    pub(crate) fn final_norm(&self) -> &[T] {
        &self.params[self.params.len() - 2].data
    }

    pub(crate) fn unembed(&self) -> &[T] {
        &self.params[self.params.len() - 1].data
    }

    /// Parameter shapes in storage order.
    pub fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (v, d, m) = (cfg.vocab_size, cfg.d_model, cfg.d_mlp);
        let mut out = vec![("embed".to_string(), vec![v, d])];
        for l in 0..cfg.n_layers {
            let shapes = [vec![d], vec![d, d], vec![d, d], vec![d, d], vec![d, d], vec![d], vec![d, m], vec![d, m], vec![m, d]];
            for (name, shape) in SLOT_NAMES.iter().zip(shapes) {
                out.push((format!("layers.{l}.{name}"), shape));
            }
        }
        out.push(("final_norm".into(), vec![d]));
        out.push(("unembed".into(), vec![d, v]));
        out
    }

    /// Builds a model from raw tensors in [`Model::layout`] order.
    pub fn from_params(config: ModelConfig, params: Vec<Param<T>>) -> Result<Self> {
        config.validate()?;
        let layout = Self::layout(&config);
        if layout.len() != params.len() {
            return Err(LabError::Shape(format!("expected {} tensors, got {}", layout.len(), params.len())));
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            if *name != p.name || *shape != p.shape || p.data.len() != shape.iter().product::<usize>() {
                return Err(LabError::Shape(format!("tensor {} has shape {:?}, expected {name} {:?}", p.name, p.shape, shape)));
            }
        }
        let rope = RopeTable::new(config.max_seq_len, config.d_head, config.rope_theta);
        Ok(Self { config, params, rope })
    }

    /// Deterministic scaled-normal initialization: embeddings `N(0, 1)`, a
    /// linear map with fan-in `n` gets `N(0, 1/n)`, the two maps writing
    /// into the residual stream are further divided by `sqrt(2L)`, and norm
    /// scales start at one. Draws follow [`Model::layout`] order from one
    /// ChaCha8 stream.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let depth = (2.0 * config.n_layers as f64).sqrt();
        let params = Self::layout(&config)
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if shape.len() == 1 {
                    vec![T::ONE; n]
                } else {
                    let mut std = if name == "embed" { 1.0 } else { 1.0 / (shape[0] as f64).sqrt() };
                    if name.ends_with(".wo") || name.ends_with(".w_down") {
                        std /= depth;
                    }
                    let dist = Normal::new(0.0, std).expect("finite std");
                    (0..n).map(|_| T::from_f64(dist.sample(&mut rng))).collect()
                };
                Param { name, shape, data }
            })
            .collect();
        Self::from_params(config, params)
    }

    /// Sets the unembedding to `scale` times the transposed embedding. The
    /// two matrices stay separate parameters.
    pub fn align_unembed(&mut self, scale: f64) {
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        let emb = self.params[0].data.clone();
        let last = self.params.len() - 1;
        let un = &mut self.params[last].data;
        for t in 0..v {
            for j in 0..d {
                un[j * v + t] = T::from_f64(emb[t * d + j].to_f64() * scale);
            }
        }
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.data.iter().all(|x| x.is_finite()))
    }

    /// Same weights in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let params = self
            .params
            .iter()
            .map(|p| Param {
                name: p.name.clone(),
                shape: p.shape.clone(),
                data: p.data.iter().map(|x| U::from_f64(x.to_f64())).collect(),
            })
            .collect();
        Model::from_params(self.config.clone(), params).expect("layout unchanged")
    }
}
