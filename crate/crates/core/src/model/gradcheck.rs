// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::train::{loss_and_grads, LossMode, TrainExample};
use super::Model;
use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCoord {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub max_rel_err: f64,
    pub coords: Vec<GradCoord>,
}

/// Relative error with a floor so that two tiny numbers compare as equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

/// Compares analytic gradients with central differences on `n_coords`
/// coordinates spread round-robin over every parameter tensor. Embedding
/// coordinates are drawn from rows of tokens present in the batch.
pub fn grad_check(model: &Model<f64>, batch: &[TrainExample], epsilon: f64, n_coords: usize, loss: LossMode, seed: u64) -> Result<GradCheckReport> {
    if batch.is_empty() || !(epsilon > 0.0) {
        return Err(LabError::config("grad_check", "needs a batch and a positive epsilon"));
    }
    let refs: Vec<&TrainExample> = batch.iter().collect();
    let (_, grads) = loss_and_grads(model, &refs, loss)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let d = model.config.d_model;
    let tokens: Vec<usize> = batch.iter().flat_map(|e| e.tokens.iter().map(|&t| t as usize)).collect();
    let mut probe = model.clone();
    let mut coords = Vec::with_capacity(n_coords);
    for k in 0..n_coords {
        let pi = k % model.params.len();
        let len = model.params[pi].data.len();
        let index = if pi == 0 {
            tokens[rng.gen_range(0..tokens.len())] * d + rng.gen_range(0..d)
        } else {
            rng.gen_range(0..len)
        };
        let orig = probe.params[pi].data[index];
        probe.params[pi].data[index] = orig + epsilon;
        let (up, _) = loss_and_grads(&probe, &refs, loss)?;
        probe.params[pi].data[index] = orig - epsilon;
        let (down, _) = loss_and_grads(&probe, &refs, loss)?;
        probe.params[pi].data[index] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let analytic = grads[pi][index];
        coords.push(GradCoord {
            param: model.params[pi].name.clone(),
            index,
            analytic,
            numeric,
            rel_err: rel_err(analytic, numeric),
        });
    }
    let max_rel_err = coords.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { epsilon, max_rel_err, coords })
}
