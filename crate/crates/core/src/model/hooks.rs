// SPDX-License-Identifier: MIT OR Apache-2.0

//! Named capture points, activation traces and intervention plans.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{LabError, Result};

/// A named point in the forward pass.
///
/// String forms: `resid.{l}`, `head_out.{l}.{a}`, `attn.{l}.{a}`,
/// `q_pre.{l}.{a}`, `k_pre.{l}.{a}`, `logits`. `resid.{l}` is the residual
/// stream entering block `l`; `resid.{L}` is the stream after the last block,
/// before the final norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum HookPoint {
    Residual(usize),
    HeadOutput(usize, usize),
    Attention(usize, usize),
    QueryPreRope(usize, usize),
    KeyPreRope(usize, usize),
    Logits,
}

impl fmt::Display for HookPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            HookPoint::Residual(l) => write!(f, "resid.{l}"),
            HookPoint::HeadOutput(l, a) => write!(f, "head_out.{l}.{a}"),
            HookPoint::Attention(l, a) => write!(f, "attn.{l}.{a}"),
            HookPoint::QueryPreRope(l, a) => write!(f, "q_pre.{l}.{a}"),
            HookPoint::KeyPreRope(l, a) => write!(f, "k_pre.{l}.{a}"),
            HookPoint::Logits => write!(f, "logits"),
        }
    }
}

impl FromStr for HookPoint {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || LabError::Intervention(format!("unknown hook point `{s}`"));
        let parts: Vec<&str> = s.split('.').collect();
        let num = |i: usize| parts.get(i).and_then(|p| p.parse::<usize>().ok()).ok_or_else(bad);
        match (parts[0], parts.len()) {
            ("logits", 1) => Ok(HookPoint::Logits),
            ("resid", 2) => Ok(HookPoint::Residual(num(1)?)),
            ("head_out", 3) => Ok(HookPoint::HeadOutput(num(1)?, num(2)?)),
            ("attn", 3) => Ok(HookPoint::Attention(num(1)?, num(2)?)),
            ("q_pre", 3) => Ok(HookPoint::QueryPreRope(num(1)?, num(2)?)),
            ("k_pre", 3) => Ok(HookPoint::KeyPreRope(num(1)?, num(2)?)),
            _ => Err(bad()),
        }
    }
}

impl From<HookPoint> for String {
    fn from(h: HookPoint) -> String {
        h.to_string()
    }
}

impl TryFrom<String> for HookPoint {
    type Error = LabError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl HookPoint {
    pub(crate) fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let (l, a, max_l) = match *self {
            HookPoint::Residual(l) => (l, 0, cfg.n_layers),
            HookPoint::HeadOutput(l, a)
            | HookPoint::Attention(l, a)
            | HookPoint::QueryPreRope(l, a)
            | HookPoint::KeyPreRope(l, a) => (l, a, cfg.n_layers - 1),
            HookPoint::Logits => return Ok(()),
        };
        if l > max_l || a >= cfg.n_heads {
            return Err(LabError::Intervention(format!("hook point {self} outside a model with {} layers and {} heads", cfg.n_layers, cfg.n_heads)));
        }
        Ok(())
    }
}

/// Which logit rows a forward pass returns.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitRows {
    /// Only the final position.
    #[default]
    Last,
    All,
    At(Vec<usize>),
}

/// Points to record during a forward pass.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapturePlan {
    pub points: BTreeSet<HookPoint>,
    pub logits: LogitRows,
}

impl CapturePlan {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn with(mut self, p: HookPoint) -> Self {
        self.points.insert(p);
        self
    }

    pub fn logits(mut self, rows: LogitRows) -> Self {
        self.logits = rows;
        self
    }

    /// Every residual point `0..=L`.
    pub fn residuals(cfg: &ModelConfig) -> Self {
        (0..=cfg.n_layers).fold(Self::none(), |p, l| p.with(HookPoint::Residual(l)))
    }

    /// Every point of one kind for all layers and heads.
    pub fn all_heads(cfg: &ModelConfig, make: fn(usize, usize) -> HookPoint) -> Self {
        let mut p = Self::none();
        for l in 0..cfg.n_layers {
            for a in 0..cfg.n_heads {
                p.points.insert(make(l, a));
            }
        }
        p
    }

    pub fn merge(mut self, other: CapturePlan) -> Self {
        self.points.extend(other.points);
        self
    }

    pub fn contains(&self, p: HookPoint) -> bool {
        self.points.contains(&p)
    }
}

/// Recorded tensors, all `f32` and row-major: residual and head outputs are
/// `[T, d]`, attention `[T, T]` (row = query position), q/k `[T, d_head]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActivationTrace {
    pub seq_len: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub tensors: BTreeMap<HookPoint, Vec<f32>>,
}

impl ActivationTrace {
    pub fn get(&self, p: HookPoint) -> Result<&[f32]> {
        self.tensors
            .get(&p)
            .map(Vec::as_slice)
            .ok_or_else(|| LabError::Intervention(format!("{p} was not captured")))
    }

    /// Row `t` of a `[T, width]` capture.
    pub fn row(&self, p: HookPoint, t: usize) -> Result<&[f32]> {
        let width = match p {
            HookPoint::Residual(_) | HookPoint::HeadOutput(..) => self.d_model,
            HookPoint::Attention(..) => self.seq_len,
            HookPoint::QueryPreRope(..) | HookPoint::KeyPreRope(..) => self.d_head,
            HookPoint::Logits => return Err(LabError::Intervention("logits are returned separately".into())),
        };
        let data = self.get(p)?;
        data.get(t * width..(t + 1) * width)
            .ok_or_else(|| LabError::Intervention(format!("position {t} outside {p}")))
    }
}

/// One edit applied during a forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Edit {
    /// Overwrite `resid.{layer}` at `positions` with rows of `source`
    /// (`[positions.len(), d]`).
    ResidualReplace { layer: usize, positions: Vec<usize>, source: Vec<f32> },
    /// Add `vector` (`[d]`) to `resid.{layer}` at each of `positions`.
    ResidualAdd { layer: usize, positions: Vec<usize>, vector: Vec<f32> },
    /// Make head `(layer, head)` contribute rows of `source` at `positions`.
    HeadOutputReplace { layer: usize, head: usize, positions: Vec<usize>, source: Vec<f32> },
    /// Zero the head's contribution everywhere.
    HeadZero { layer: usize, head: usize },
}

/// Ordered edits. Replacements at a point are applied before additions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InterventionPlan {
    pub edits: Vec<Edit>,
}

impl InterventionPlan {
    pub fn new(edits: Vec<Edit>) -> Self {
        Self { edits }
    }

    pub fn push(&mut self, e: Edit) -> &mut Self {
        self.edits.push(e);
        self
    }

    pub fn is_empty(&self) -> bool {
        self.edits.is_empty()
    }

    /// Checks bounds, vector sizes and that no (point, position) is replaced twice.
    pub fn validate(&self, cfg: &ModelConfig, seq_len: usize) -> Result<()> {
        let d = cfg.d_model;
        let mut replaced = BTreeSet::new();
        let err = |m: String| Err(LabError::Intervention(m));
        for e in &self.edits {
            let (point, positions, rows, width) = match e {
                Edit::ResidualReplace { layer, positions, source } => (HookPoint::Residual(*layer), positions, Some(source.len()), positions.len() * d),
                Edit::ResidualAdd { layer, positions, vector } => (HookPoint::Residual(*layer), positions, Some(vector.len()), d),
                Edit::HeadOutputReplace { layer, head, positions, source } => {
                    (HookPoint::HeadOutput(*layer, *head), positions, Some(source.len()), positions.len() * d)
                }
                Edit::HeadZero { layer, head } => (HookPoint::HeadOutput(*layer, *head), &Vec::new(), None, 0),
            };
            point.check(cfg)?;
            if let Some(len) = rows {
                if len != width {
                    return err(format!("edit at {point}: payload has {len} values, expected {width}"));
                }
            }
            for &p in positions {
                if p >= seq_len {
                    return err(format!("edit at {point}: position {p} outside sequence of {seq_len}"));
                }
                let is_replace = matches!(e, Edit::ResidualReplace { .. } | Edit::HeadOutputReplace { .. });
                if is_replace && !replaced.insert((point, p)) {
                    return err(format!("{point} replaced twice at position {p}"));
                }
            }
        }
        Ok(())
    }

    pub(crate) fn residual_edits(&self, layer: usize) -> impl Iterator<Item = &Edit> {
        let replaces = self.edits.iter().filter(move |e| matches!(e, Edit::ResidualReplace { layer: l, .. } if *l == layer));
        let adds = self.edits.iter().filter(move |e| matches!(e, Edit::ResidualAdd { layer: l, .. } if *l == layer));
        replaces.chain(adds)
    }

    pub(crate) fn head_edits(&self, layer: usize) -> impl Iterator<Item = &Edit> {
        self.edits.iter().filter(move |e| match e {
            Edit::HeadOutputReplace { layer: l, .. } | Edit::HeadZero { layer: l, .. } => *l == layer,
            _ => false,
        })
    }
}
