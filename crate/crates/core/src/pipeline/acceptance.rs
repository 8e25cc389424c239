// SPDX-License-Identifier: MIT OR Apache-2.0

//! Directional checks on a finished run, read from the stage summaries.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::rundir::{RunDir, RunManifest};
use super::stages::Stage;
use super::summary::*;

/// Held-out atomic EM the trained model must reach.
pub const GATE_EM: f64 = 0.85;
/// CPU training budget in seconds.
pub const GATE_SECONDS: f64 = 1800.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub id: String,
    pub pass: bool,
    /// False when the criterion is reported but cannot fail the run.
    pub gating: bool,
    pub detail: String,
}

impl Verdict {
    pub fn line(&self) -> String {
        let status = if self.pass { "PASS" } else if self.gating { "FAIL" } else { "FAIL (non-gating)" };
        format!("{} {status}: {}", self.id, self.detail)
    }
}

fn load<T: DeserializeOwned>(dir: &RunDir, stage: Stage) -> Option<T> {
    dir.read_json(&stage.summary_path(), stage.name()).ok()
}

fn missing(id: &str, stage: Stage, gating: bool) -> Verdict {
    Verdict { id: id.into(), pass: false, gating, detail: format!("no `{stage}` summary in the run directory") }
}

/// Verdicts B1..B8 for a run directory.
pub fn evaluate(dir: &RunDir) -> Vec<Verdict> {
    let manifest = RunManifest::load(dir).ok().flatten();
    let train_s = manifest.as_ref().and_then(|m| m.timings.get("train").copied());
    let eval: Option<EvalSummary> = load(dir, Stage::Eval);
    let mut out = Vec::new();

    let gate = match (&eval, train_s) {
        (Some(e), Some(t)) => {
            let pass = e.atomic_em >= GATE_EM && t <= GATE_SECONDS;
            out.push(Verdict {
                id: "B1".into(),
                pass,
                gating: true,
                detail: format!("held-out atomic EM {:.3} (need {GATE_EM}) after {:.0}s of training (budget {GATE_SECONDS:.0}s)", e.atomic_em, t),
            });
            pass
        }
        _ => {
            out.push(missing("B1", Stage::Eval, true));
            false
        }
    };
    let v = |id: &str, pass: bool, detail: String| Verdict { id: id.into(), pass, gating: gate, detail };

    out.push(match load::<PatchSummary>(dir, Stage::PatchMap) {
        Some(p) => v(
            "B2",
            p.band_gain() >= 0.3,
            format!(
                "target-cell effect: resid {}..={} mean {:.3} vs early resid {}..={} mean {:.3} (gain {:.3}, need 0.3)",
                p.band.0,
                p.band.1,
                p.band_mean,
                p.early.0,
                p.early.1,
                p.early_mean,
                p.band_gain()
            ),
        ),
        None => missing("B2", Stage::PatchMap, gate),
    });

    out.push(match load::<Stage1Summary>(dir, Stage::Stage1) {
        Some(s) => v(
            "B3",
            s.drop_ablated >= 3.0 * s.drop_random && s.drop_ablated > 0.0 && s.wrong_row_ablated > s.wrong_row_random,
            format!(
                "row-head ablation drop {:.3} vs random {:.3} (need 3x); wrong_row share {:.3} vs {:.3}",
                s.drop_ablated, s.drop_random, s.wrong_row_ablated, s.wrong_row_random
            ),
        ),
        None => missing("B3", Stage::Stage1, gate),
    });

    let s3: Option<Stage3Summary> = load(dir, Stage::Stage3);
    out.push(match &s3 {
        Some(s) => v(
            "B4",
            s.early_col_delimiter() >= s.early_col_cell() && s.peak_col() >= s.peak_row() && s.sawtooth_p < 0.01,
            format!(
                "early column R2 delimiter {:.3} vs cell {:.3}; peak column {:.3} vs row {:.3}; sawtooth {:.3} p={:.4}",
                s.early_col_delimiter(),
                s.early_col_cell(),
                s.peak_col(),
                s.peak_row(),
                s.sawtooth_score,
                s.sawtooth_p
            ),
        ),
        None => missing("B4", Stage::Stage3, gate),
    });
    out.push(match &s3 {
        Some(s) => {
            let (d, c) = (s.head_patch[1][1], s.head_patch[1][0]);
            v("B5", d - c >= 0.2, format!("column effect of delimiter heads {d:.3} vs cell heads {c:.3} (need +0.2)"))
        }
        None => missing("B5", Stage::Stage3, gate),
    });

    out.push(match load::<NoiseSummary>(dir, Stage::Noise) {
        Some(n) => {
            let sb = n.drop_points("structural_before").unwrap_or(f64::NAN);
            let fb = n.drop_points("filler_before").unwrap_or(f64::NAN);
            let sa = n.drop_points("structural_after").unwrap_or(f64::NAN);
            v("B6", sb - fb >= 10.0 && sa <= 5.0, format!("EM drop structural-before {sb:.1} vs filler-before {fb:.1} points; structural-after {sa:.1}"))
        }
        None => missing("B6", Stage::Noise, gate),
    });

    let steer: Option<SteerStageSummary> = load(dir, Stage::Steer);
    let comp: Option<ComposeSummary> = load(dir, Stage::Compose);
    out.push(match (&steer, &comp) {
        (Some(s), Some(c)) => {
            let raised = s.get(1).map(|r| r.raised).unwrap_or(f64::NAN);
            let rho = c.rank_correlation.unwrap_or(f64::NAN);
            v("B7", raised > 0.6 && rho >= 0.7, format!("k=+1 raised the shifted-target LD in {:.1}% of samples; composition rank correlation {rho:.3}", 100.0 * raised))
        }
        (None, _) => missing("B7", Stage::Steer, gate),
        (_, None) => missing("B7", Stage::Compose, gate),
    });

    out.push(match load::<MulticellSummary>(dir, Stage::Multicell) {
        Some(m) => {
            let row_drop = m.multi_row_em - m.multi_row_ablated_em;
            let rand_drops: Vec<f64> = m.multi_row_random_em.iter().map(|r| m.multi_row_em - r).collect();
            let pass = !rand_drops.is_empty() && rand_drops.iter().all(|&d| row_drop > d);
            let rd: Vec<String> = rand_drops.iter().map(|d| format!("{d:.3}")).collect();
            Verdict {
                id: "B8".into(),
                pass,
                gating: true,
                detail: format!("multi-row EM {:.3}: row-head drop {row_drop:.3} vs random drops [{}]", m.multi_row_em, rd.join(", ")),
            }
        }
        None => missing("B8", Stage::Multicell, true),
    });
    out
}
