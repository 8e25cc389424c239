// SPDX-License-Identifier: MIT OR Apache-2.0

//! Coordinate probes, interaction scores, delimiter-head patching and noise
//! evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binding::QaItem;
use crate::error::{LabError, Result};
use crate::model::{decode_answer_with, rope_apply, CapturePlan, Edit, HookPoint, InterventionPlan, Model, Scalar};
use crate::patchkit::{effect_score, logit_diff};
use crate::prompt::{assemble_prompt, token_coords, PromptContext, PromptInstance, SpanRole, TokenClass};
use crate::tablegen::{inject_noise, swap_columns, swap_rows, NoiseKind, NoiseSpec, Placement, QuerySpec, Sample, Table};

/// Which index a probe predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTarget {
    Row,
    Col,
}

/// Token positions a probe reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSite {
    Cell,
    Delimiter,
}

impl ProbeSite {
    fn class(self) -> TokenClass {
        match self {
            ProbeSite::Cell => TokenClass::Cell,
            ProbeSite::Delimiter => TokenClass::Delimiter,
        }
    }
}

/// A fitted ridge regression `z = w.x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ridge {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub lambda: f64,
}

impl Ridge {
    pub fn predict<S: Copy + Into<f64>>(&self, x: &[S]) -> f64 {
        self.bias + self.weights.iter().zip(x).map(|(w, v)| w * (*v).into()).sum::<f64>()
    }
}

/// `1 - SS_res / SS_tot`; zero when the targets are constant.
pub fn r_squared(pred: &[f64], z: &[f64]) -> f64 {
    let n = z.len() as f64;
    let mean = z.iter().sum::<f64>() / n;
    let ss_tot: f64 = z.iter().map(|v| (v - mean).powi(2)).sum();
    if ss_tot <= 1e-12 * n.max(1.0) {
        return 0.0;
    }
    let ss_res: f64 = pred.iter().zip(z).map(|(p, v)| (p - v).powi(2)).sum();
    1.0 - ss_res / ss_tot
}

/// Ridge regression on row-major `x` (`n` rows of length `d`). The bias is
/// not penalized: features and targets are centered before solving
/// `(Xc'Xc + lambda I) w = Xc'zc`.
pub fn fit_ridge(x: &[f64], d: usize, z: &[f64], lambda: f64) -> Result<Ridge> {
    let n = z.len();
    if n < 2 || x.len() != n * d {
        return Err(LabError::Shape(format!("ridge needs n >= 2 rows of {d} features, got {} values for {n} targets", x.len())));
    }
    if lambda < 0.0 {
        return Err(LabError::config("lambda", "must be non-negative"));
    }
    let mut mx = vec![0.0; d];
    for row in x.chunks_exact(d) {
        for (m, v) in mx.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let mz = z.iter().sum::<f64>() / n as f64;
    let mut a = vec![0.0; d * d];
    let mut rhs = vec![0.0; d];
    let mut xc = vec![0.0; d];
    for (row, &zi) in x.chunks_exact(d).zip(z) {
        for j in 0..d {
            xc[j] = row[j] - mx[j];
        }
        for i in 0..d {
            rhs[i] += xc[i] * (zi - mz);
            let xi = xc[i];
            for j in 0..=i {
                a[i * d + j] += xi * xc[j];
            }
        }
    }
    for i in 0..d {
        a[i * d + i] += lambda;
    }
    let w = cholesky_solve(&mut a, d, &rhs).ok_or_else(|| {
        LabError::Numerical("ridge normal equations are singular; use lambda > 0".into())
    })?;
    let bias = mz - w.iter().zip(&mx).map(|(a, b)| a * b).sum::<f64>();
    Ok(Ridge { weights: w, bias, lambda })
}

/// Solves `A x = b` for symmetric positive definite `A` given by its lower
/// triangle. `A` is overwritten by its factor.
fn cholesky_solve(a: &mut [f64], d: usize, b: &[f64]) -> Option<Vec<f64>> {
    let scale = (0..d).map(|i| a[i * d + i].abs()).fold(0.0, f64::max).max(1e-300);
    for j in 0..d {
        let mut s = a[j * d + j];
        for k in 0..j {
            s -= a[j * d + k] * a[j * d + k];
        }
        if s <= 1e-12 * scale {
            return None;
        }
        let l = s.sqrt();
        a[j * d + j] = l;
        for i in j + 1..d {
            let mut t = a[i * d + j];
            for k in 0..j {
                t -= a[i * d + k] * a[j * d + k];
            }
            a[i * d + j] = t / l;
        }
    }
    let mut y = b.to_vec();
    for i in 0..d {
        for k in 0..i {
            y[i] -= a[i * d + k] * y[k];
        }
        y[i] /= a[i * d + i];
    }
    for i in (0..d).rev() {
        for k in i + 1..d {
            y[i] -= a[k * d + i] * y[k];
        }
        y[i] /= a[i * d + i];
    }
    Some(y)
}

/// A ridge probe over one layer's residual stream (or one head's output).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub ridge: Ridge,
    pub target: ProbeTarget,
    pub site: ProbeSite,
    pub layer: usize,
    pub r2_train: f64,
    pub r2_eval: f64,
}

/// Index normalized to `[0, 1]` over the table's extent.
pub fn normalize_index(idx: usize, extent: usize) -> Option<f64> {
    (extent >= 2).then(|| idx as f64 / (extent - 1) as f64)
}

/// Probe sites of one prompt: positions with row and column targets.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteRows {
    pub positions: Vec<usize>,
    pub row: Vec<f64>,
    pub col: Vec<f64>,
    pub r_idx: Vec<usize>,
    pub c_idx: Vec<usize>,
}

pub fn probe_sites(p: &PromptInstance, site: ProbeSite) -> SiteRows {
    let coords = token_coords(p);
    let (nr, nc) = (p.n_rows(), p.n_cols());
    let mut s = SiteRows { positions: vec![], row: vec![], col: vec![], r_idx: vec![], c_idx: vec![] };
    for (pos, c) in coords.gridded(site.class()) {
        let (r, k) = (c.r_idx as usize, c.c_idx as usize);
        if r >= nr || k >= nc {
            continue;
        }
        if let (Some(zr), Some(zc)) = (normalize_index(r, nr), normalize_index(k, nc)) {
            s.positions.push(pos);
            s.row.push(zr);
            s.col.push(zc);
            s.r_idx.push(r);
            s.c_idx.push(k);
        }
    }
    s
}

/// Features gathered for probing: one matrix per capture point, rows
/// grouped by prompt.
#[derive(Debug, Clone)]
pub struct ProbeData {
    pub site: ProbeSite,
    pub dim: usize,
    /// Feature rows per hook point, concatenated over prompts.
    pub features: BTreeMap<HookPoint, Vec<f64>>,
    pub row: Vec<f64>,
    pub col: Vec<f64>,
    /// Prompt index of every feature row.
    pub group: Vec<usize>,
}

impl ProbeData {
    pub fn collect<T: Scalar>(model: &Model<T>, prompts: &[PromptInstance], site: ProbeSite, points: &[HookPoint]) -> Result<Self> {
        let mut capture = CapturePlan::none();
        for &p in points {
            capture = capture.with(p);
        }
        let parts: Vec<(SiteRows, BTreeMap<HookPoint, Vec<f64>>)> = prompts
            .par_iter()
            .map(|p| -> Result<_> {
                let rows = probe_sites(p, site);
                let (_, tr) = model.forward(p.input(), &capture, None)?;
                let mut feats = BTreeMap::new();
                for &hp in points {
                    let mut v = Vec::with_capacity(rows.positions.len() * tr.d_model);
                    for &pos in &rows.positions {
                        v.extend(tr.row(hp, pos)?.iter().map(|&x| x as f64));
                    }
                    feats.insert(hp, v);
                }
                Ok((rows, feats))
            })
            .collect::<Result<_>>()?;
        let mut out = ProbeData { site, dim: model.config.d_model, features: BTreeMap::new(), row: vec![], col: vec![], group: vec![] };
        for (g, (rows, feats)) in parts.into_iter().enumerate() {
            out.group.extend(std::iter::repeat(g).take(rows.positions.len()));
            out.row.extend(rows.row);
            out.col.extend(rows.col);
            for (hp, v) in feats {
                out.features.entry(hp).or_default().extend(v);
            }
        }
        Ok(out)
    }

    pub fn targets(&self, t: ProbeTarget) -> &[f64] {
        match t {
            ProbeTarget::Row => &self.row,
            ProbeTarget::Col => &self.col,
        }
    }

    /// Fits a probe on the rows whose prompt is in `train_groups` and
    /// evaluates on the rest.
    pub fn fit(&self, point: HookPoint, target: ProbeTarget, lambda: f64, is_train: &[bool]) -> Result<LinearProbe> {
        let x = self.features.get(&point).ok_or_else(|| LabError::Shape(format!("no features for {point}")))?;
        let z = self.targets(target);
        let d = self.dim;
        let (mut xt, mut zt, mut xe, mut ze) = (vec![], vec![], vec![], vec![]);
        for (i, &g) in self.group.iter().enumerate() {
            let row = &x[i * d..(i + 1) * d];
            if is_train[g] {
                xt.extend_from_slice(row);
                zt.push(z[i]);
            } else {
                xe.extend_from_slice(row);
                ze.push(z[i]);
            }
        }
        let ridge = fit_ridge(&xt, d, &zt, lambda)?;
        let pt: Vec<f64> = xt.chunks_exact(d).map(|r| ridge.predict(r)).collect();
        let pe: Vec<f64> = xe.chunks_exact(d).map(|r| ridge.predict(r)).collect();
        let layer = match point {
            HookPoint::Residual(l) | HookPoint::HeadOutput(l, _) => l,
            _ => 0,
        };
        Ok(LinearProbe {
            r2_train: r_squared(&pt, &zt),
            r2_eval: if ze.len() >= 2 { r_squared(&pe, &ze) } else { f64::NAN },
            ridge,
            target,
            site: self.site,
            layer,
        })
    }
}

/// 80/20 split of `n` prompts by a seeded shuffle.
pub fn train_mask(n: usize, seed: u64) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (n * 4).div_ceil(5).min(n.saturating_sub(1)).max(1);
    let mut mask = vec![false; n];
    for &i in &idx[..n_train] {
        mask[i] = true;
    }
    mask
}

/// Per-layer probes (index `l` reads `resid.l`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeCurve {
    pub target: ProbeTarget,
    pub site: ProbeSite,
    pub probes: Vec<LinearProbe>,
}

impl ProbeCurve {
    pub fn r2_eval(&self) -> Vec<f64> {
        self.probes.iter().map(|p| p.r2_eval).collect()
    }

    pub fn peak(&self) -> (usize, f64) {
        self.probes
            .iter()
            .map(|p| (p.layer, p.r2_eval))
            .fold((0, f64::NEG_INFINITY), |b, x| if x.1 > b.1 { x } else { b })
    }
}

pub fn probe_sweep_data(data: &ProbeData, n_layers: usize, target: ProbeTarget, lambda: f64, mask: &[bool]) -> Result<ProbeCurve> {
    let probes = (0..=n_layers)
        .into_par_iter()
        .map(|l| data.fit(HookPoint::Residual(l), target, lambda, mask))
        .collect::<Result<_>>()?;
    Ok(ProbeCurve { target, site: data.site, probes })
}

/// Residual-stream probes for every layer.
pub fn probe_sweep<T: Scalar>(model: &Model<T>, prompts: &[PromptInstance], target: ProbeTarget, site: ProbeSite, lambda: f64, seed: u64) -> Result<ProbeCurve> {
    let points: Vec<HookPoint> = (0..=model.config.n_layers).map(HookPoint::Residual).collect();
    let data = ProbeData::collect(model, prompts, site, &points)?;
    probe_sweep_data(&data, model.config.n_layers, target, lambda, &train_mask(prompts.len(), seed))
}

/// Probe predictions over one table, in index units, with ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictTrace {
    pub positions: Vec<usize>,
    pub predicted: Vec<f64>,
    pub r_idx: Vec<usize>,
    pub c_idx: Vec<usize>,
}

/// Applies `probe` to every site token of `prompt`. `features` holds the
/// probe layer's rows for the whole sequence.
pub fn predict_trace(probe: &LinearProbe, prompt: &PromptInstance, features: &[f32], d: usize) -> PredictTrace {
    let rows = probe_sites(prompt, probe.site);
    let extent = match probe.target {
        ProbeTarget::Row => prompt.n_rows(),
        ProbeTarget::Col => prompt.n_cols(),
    };
    let predicted = rows
        .positions
        .iter()
        .map(|&p| probe.ridge.predict(&features[p * d..(p + 1) * d]) * (extent - 1) as f64)
        .collect();
    PredictTrace { positions: rows.positions, predicted, r_idx: rows.r_idx, c_idx: rows.c_idx }
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0;
        for k in i..=j {
            out[idx[k]] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; zero when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va <= 0.0 || vb <= 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

fn by_row(t: &PredictTrace) -> BTreeMap<usize, Vec<usize>> {
    let mut m: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &r) in t.r_idx.iter().enumerate() {
        m.entry(r).or_default().push(i);
    }
    m
}

/// Mean over rows of the Spearman correlation between predictions and the
/// true column index.
pub fn sawtooth_score(t: &PredictTrace) -> f64 {
    let rows: Vec<f64> = by_row(t)
        .values()
        .filter(|ix| ix.len() >= 2)
        .map(|ix| {
            let p: Vec<f64> = ix.iter().map(|&i| t.predicted[i]).collect();
            let c: Vec<f64> = ix.iter().map(|&i| t.c_idx[i] as f64).collect();
            spearman(&p, &c)
        })
        .collect();
    if rows.is_empty() {
        0.0
    } else {
        rows.iter().sum::<f64>() / rows.len() as f64
    }
}

/// Fraction of consecutive row pairs whose mean prediction increases.
pub fn step_score(t: &PredictTrace) -> f64 {
    let means: Vec<f64> = by_row(t).values().map(|ix| ix.iter().map(|&i| t.predicted[i]).sum::<f64>() / ix.len() as f64).collect();
    if means.len() < 2 {
        return 0.0;
    }
    means.windows(2).filter(|w| w[1] > w[0]).count() as f64 / (means.len() - 1) as f64
}

/// Mean sawtooth score over `traces` and its permutation p-value: predictions
/// are shuffled within each row `n_perm` times.
pub fn sawtooth_permutation_test(traces: &[PredictTrace], n_perm: usize, seed: u64) -> (f64, f64) {
    let mean = |ts: &[PredictTrace]| ts.iter().map(sawtooth_score).sum::<f64>() / ts.len().max(1) as f64;
    let observed = mean(traces);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut at_least = 0;
    let mut shuffled = traces.to_vec();
    for _ in 0..n_perm {
        for (s, t) in shuffled.iter_mut().zip(traces) {
            for ix in by_row(t).values() {
                let mut vals: Vec<f64> = ix.iter().map(|&i| t.predicted[i]).collect();
                vals.shuffle(&mut rng);
                for (&i, v) in ix.iter().zip(vals) {
                    s.predicted[i] = v;
                }
            }
        }
        if mean(&shuffled) >= observed {
            at_least += 1;
        }
    }
    (observed, (at_least + 1) as f64 / (n_perm + 1) as f64)
}

/// `S[j][l] = rope(q[j], pos[j]) . rope(k[l], pos[l])`.
pub fn interaction_matrix(qbar: &[Vec<f64>], kbar: &[Vec<f64>], positions: &[usize], theta: f64) -> Vec<Vec<f64>> {
    let rq: Vec<Vec<f64>> = qbar.iter().zip(positions).map(|(q, &p)| rope_apply(q, p as f64, theta)).collect();
    let rk: Vec<Vec<f64>> = kbar.iter().zip(positions).map(|(k, &p)| rope_apply(k, p as f64, theta)).collect();
    rq.iter().map(|q| rk.iter().map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum()).collect()).collect()
}

/// Mean diagonal minus mean off-diagonal.
pub fn diagonal_contrast(s: &[Vec<f64>]) -> f64 {
    let n = s.len();
    let diag: f64 = (0..n).map(|i| s[i][i]).sum::<f64>() / n as f64;
    let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| s[i][j]).sum::<f64>();
    diag - off / (n * (n - 1)).max(1) as f64
}

/// Interaction matrix of one head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionMatrix {
    pub layer: usize,
    pub head: usize,
    /// Column indices the rows and columns of `s` stand for.
    pub columns: Vec<usize>,
    pub s: Vec<Vec<f64>>,
    pub contrast: f64,
}

impl InteractionMatrix {
    pub fn to_csv(&self) -> String {
        let mut out = format!("query_col,{}\n", self.columns.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","));
        for (j, row) in self.s.iter().enumerate() {
            out.push_str(&format!("{},{}\n", self.columns[j], row.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(",")));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionReport {
    pub matrices: Vec<InteractionMatrix>,
    /// Heads by decreasing `|contrast|`.
    pub ranked: Vec<(usize, usize)>,
    pub n_samples: usize,
}

impl InteractionReport {
    pub fn top(&self, k: usize) -> Vec<(usize, usize)> {
        self.ranked.iter().take(k).copied().collect()
    }

    pub fn get(&self, layer: usize, head: usize) -> Option<&InteractionMatrix> {
        self.matrices.iter().find(|m| m.layer == layer && m.head == head)
    }
}

/// Which query-column occurrences feed `q̄_j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuerySites {
    /// First column constraint only.
    First,
    /// Every column constraint of multi-column questions.
    All,
}

/// Pre-rotary query at column constraints and key at cells, averaged per
/// column index, for every head in `heads` (all heads when `None`).
pub fn rope_interaction<T: Scalar>(model: &Model<T>, prompts: &[PromptInstance], heads: Option<&[(usize, usize)]>, sites: QuerySites) -> Result<InteractionReport> {
    let cfg = &model.config;
    let all: Vec<(usize, usize)> = (0..cfg.n_layers).flat_map(|l| (0..cfg.n_heads).map(move |a| (l, a))).collect();
    let heads = heads.unwrap_or(&all).to_vec();
    let min_cols = prompts.iter().map(|p| p.n_cols()).min().unwrap_or(0);
    if min_cols < 4 {
        return Err(LabError::config("dataset.dims", "interaction scores need at least three attribute columns"));
    }
    let columns: Vec<usize> = (1..min_cols).collect();
    let nc = columns.len();
    let dh = cfg.d_head;
    let mut capture = CapturePlan::none();
    for &(l, a) in &heads {
        capture = capture.with(HookPoint::QueryPreRope(l, a)).with(HookPoint::KeyPreRope(l, a));
    }
    type Acc = (Vec<Vec<Vec<f64>>>, Vec<Vec<usize>>, Vec<Vec<Vec<f64>>>, Vec<Vec<usize>>);
    let zero = || -> Acc {
        (vec![vec![vec![0.0; dh]; nc]; heads.len()], vec![vec![0; nc]; heads.len()], vec![vec![vec![0.0; dh]; nc]; heads.len()], vec![vec![0; nc]; heads.len()])
    };
    let parts: Vec<Acc> = prompts
        .par_iter()
        .map(|p| -> Result<Acc> {
            let mut acc = zero();
            let (_, tr) = model.forward(p.input(), &capture, None)?;
            let mut qsites = Vec::new();
            for (key, span) in &p.spans {
                if key.role == SpanRole::QueryCol && (sites == QuerySites::All || key.index == 0) {
                    let header = p.spans.get(&crate::prompt::SpanKey::new(SpanRole::TableCol, key.index)).expect("query column has a header");
                    let col = p.header_pos.iter().position(|&h| h == header.start).expect("header position");
                    qsites.push((span.start, col));
                }
            }
            for (h, &(l, a)) in heads.iter().enumerate() {
                for &(pos, col) in &qsites {
                    if let Some(j) = columns.iter().position(|&c| c == col) {
                        for (s, v) in acc.0[h][j].iter_mut().zip(tr.row(HookPoint::QueryPreRope(l, a), pos)?) {
                            *s += *v as f64;
                        }
                        acc.1[h][j] += 1;
                    }
                }
                for row in &p.cell_pos {
                    for (j, &col) in columns.iter().enumerate() {
                        for (s, v) in acc.2[h][j].iter_mut().zip(tr.row(HookPoint::KeyPreRope(l, a), row[col])?) {
                            *s += *v as f64;
                        }
                        acc.3[h][j] += 1;
                    }
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut tot = zero();
    for part in parts {
        for h in 0..heads.len() {
            for j in 0..nc {
                for k in 0..dh {
                    tot.0[h][j][k] += part.0[h][j][k];
                    tot.2[h][j][k] += part.2[h][j][k];
                }
                tot.1[h][j] += part.1[h][j];
                tot.3[h][j] += part.3[h][j];
            }
        }
    }
    let mut matrices = Vec::new();
    for (h, &(l, a)) in heads.iter().enumerate() {
        let mean = |s: &Vec<Vec<f64>>, n: &Vec<usize>| -> Vec<Vec<f64>> {
            s.iter().zip(n).map(|(v, &c)| v.iter().map(|x| x / c.max(1) as f64).collect()).collect()
        };
        let q = mean(&tot.0[h], &tot.1[h]);
        let k = mean(&tot.2[h], &tot.3[h]);
        let s = interaction_matrix(&q, &k, &columns, cfg.rope_theta);
        let contrast = diagonal_contrast(&s);
        matrices.push(InteractionMatrix { layer: l, head: a, columns: columns.clone(), s, contrast });
    }
    let mut ranked: Vec<&InteractionMatrix> = matrices.iter().collect();
    ranked.sort_by(|x, y| y.contrast.abs().total_cmp(&x.contrast.abs()).then((x.layer, x.head).cmp(&(y.layer, y.head))));
    let ranked = ranked.iter().map(|m| (m.layer, m.head)).collect();
    Ok(InteractionReport { matrices, ranked, n_samples: prompts.len() })
}

/// Head ranking by probe R² for one (target, site).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadRanking {
    pub target: ProbeTarget,
    pub site: ProbeSite,
    /// `(layer, head, eval R²)`, best first.
    pub heads: Vec<(usize, usize, f64)>,
}

impl HeadRanking {
    pub fn top(&self, k: usize) -> Vec<(usize, usize)> {
        self.heads.iter().take(k).map(|&(l, a, _)| (l, a)).collect()
    }
}

/// Probes fit on each head's output contribution at cell and delimiter
/// positions; four rankings over {row, col} x {cell, delimiter}.
pub fn head_probe_rank<T: Scalar>(model: &Model<T>, prompts: &[PromptInstance], lambda: f64, seed: u64) -> Result<Vec<HeadRanking>> {
    let cfg = &model.config;
    let points: Vec<HookPoint> = (0..cfg.n_layers).flat_map(|l| (0..cfg.n_heads).map(move |a| HookPoint::HeadOutput(l, a))).collect();
    let mask = train_mask(prompts.len(), seed);
    let mut out = Vec::new();
    for site in [ProbeSite::Cell, ProbeSite::Delimiter] {
        let data = ProbeData::collect(model, prompts, site, &points)?;
        for target in [ProbeTarget::Row, ProbeTarget::Col] {
            let mut heads: Vec<(usize, usize, f64)> = points
                .par_iter()
                .map(|&hp| -> Result<_> {
                    let HookPoint::HeadOutput(l, a) = hp else { unreachable!() };
                    let r2 = data.fit(hp, target, lambda, &mask)?.r2_eval;
                    Ok((l, a, if r2.is_finite() { r2 } else { f64::NEG_INFINITY }))
                })
                .collect::<Result<_>>()?;
            heads.sort_by(|x, y| y.2.total_cmp(&x.2).then((x.0, x.1).cmp(&(y.0, y.1))));
            out.push(HeadRanking { target, site, heads });
        }
    }
    Ok(out)
}

/// A table and the same table with two attribute columns (or two rows) of
/// values swapped; the question stays the same.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapPair {
    pub id: u64,
    pub target: ProbeTarget,
    pub original: PromptInstance,
    pub swapped: PromptInstance,
    /// Answer of the original prompt; in the swapped prompt it sits at the
    /// swapped index.
    pub gold: u32,
    /// Answer of the swapped prompt.
    pub foil: u32,
    /// Position of the gold cell in each prompt.
    pub gold_pos: (usize, usize),
}

impl SwapPair {
    /// Swaps the target column (or row) with the next one, wrapping around.
    pub fn new(ctx: &PromptContext, id: u64, table: &Table, query: &QuerySpec, target: ProbeTarget) -> Result<Self> {
        let (r, c) = (query.row(), query.col());
        let (swapped_table, r2, c2) = match target {
            ProbeTarget::Col => {
                let other = if c + 1 < table.n_cols() { c + 1 } else { 1 };
                (swap_columns(table, c, other)?, r, other)
            }
            ProbeTarget::Row => {
                let other = (r + 1) % table.n_rows();
                (swap_rows(table, r, other)?, other, c)
            }
        };
        let original = assemble_prompt(ctx, table, query, None, None)?;
        let swapped = assemble_prompt(ctx, &swapped_table, query, None, None)?;
        let gold = ctx.vocab.id(table.value(r, c))?;
        let foil = ctx.vocab.id(swapped_table.value(r, c))?;
        debug_assert_eq!(ctx.vocab.id(swapped_table.value(r2, c2))?, gold);
        Ok(Self { id, target, gold, foil, gold_pos: (original.cell_pos[r][c], swapped.cell_pos[r2][c2]), original, swapped })
    }

    pub fn from_samples(ctx: &PromptContext, samples: &[Sample], target: ProbeTarget) -> Result<Vec<Self>> {
        samples.iter().map(|s| Self::new(ctx, s.id, &s.table, &s.query, target)).collect()
    }

    /// Gold position in (original, swapped) for a probe site: the cell
    /// itself, or the delimiter closing it.
    pub fn site_positions(&self, site: ProbeSite) -> Option<(usize, usize)> {
        match site {
            ProbeSite::Cell => Some(self.gold_pos),
            ProbeSite::Delimiter => {
                let a = next_delimiter(&self.original, self.gold_pos.0)?;
                let b = next_delimiter(&self.swapped, self.gold_pos.1)?;
                Some((a, b))
            }
        }
    }
}

fn next_delimiter(p: &PromptInstance, pos: usize) -> Option<usize> {
    let coords = token_coords(p);
    let c = coords.coords[pos];
    (pos + 1..p.table_range.end).find(|&q| coords.coords[q].class == TokenClass::Delimiter && coords.coords[q].r_idx == c.r_idx && coords.coords[q].c_idx == c.c_idx)
}

/// Patches the original run's head outputs at the gold cell (or delimiter)
/// into the swapped run at the gold value's new location. Returns the mean
/// Effect with `LD = logit(gold) - logit(foil)` and the number of pairs used.
pub fn delimiter_head_patch<T: Scalar>(model: &Model<T>, pairs: &[SwapPair], heads: &[(usize, usize)], site: ProbeSite, delta: f64) -> Result<(f64, usize)> {
    if heads.is_empty() {
        return Ok((0.0, pairs.len()));
    }
    let mut capture = CapturePlan::none();
    for &(l, a) in heads {
        capture = capture.with(HookPoint::HeadOutput(l, a));
    }
    let scores: Vec<Option<f64>> = pairs
        .par_iter()
        .map(|pair| -> Result<_> {
            let Some((src, dst)) = pair.site_positions(site) else { return Ok(None) };
            let (lo, tr) = model.forward(pair.original.input(), &capture, None)?;
            let (ls, _) = model.forward(pair.swapped.input(), &CapturePlan::none(), None)?;
            let mut plan = InterventionPlan::default();
            for &(l, a) in heads {
                plan.push(Edit::HeadOutputReplace { layer: l, head: a, positions: vec![dst], source: tr.row(HookPoint::HeadOutput(l, a), src)?.to_vec() });
            }
            let (lp, _) = model.forward(pair.swapped.input(), &CapturePlan::none(), Some(&plan))?;
            let ld = |l: &crate::model::Logits| logit_diff(l.last(), pair.gold, pair.foil);
            Ok(effect_score(ld(&lp), ld(&lo), ld(&ls), delta))
        })
        .collect::<Result<_>>()?;
    let vals: Vec<f64> = scores.into_iter().flatten().collect();
    let mean = if vals.is_empty() { f64::NAN } else { vals.iter().sum::<f64>() / vals.len() as f64 };
    Ok((mean, vals.len()))
}

/// Noise conditions evaluated by [`noise_eval`].
pub const NOISE_CONDITIONS: [(&str, Option<(NoiseKind, Placement)>); 5] = [
    ("baseline", None),
    ("structural_before", Some((NoiseKind::StructuralPipes, Placement::BeforeTarget))),
    ("structural_after", Some((NoiseKind::StructuralPipes, Placement::AfterTarget))),
    ("filler_before", Some((NoiseKind::LengthFiller, Placement::BeforeTarget))),
    ("filler_after", Some((NoiseKind::LengthFiller, Placement::AfterTarget))),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub condition: String,
    pub em: f64,
    pub n: usize,
}

/// EM under each noise condition with `amount` inserted units.
pub fn noise_eval<T: Scalar>(model: &Model<T>, ctx: &PromptContext, samples: &[Sample], amount: usize) -> Result<Vec<NoiseRow>> {
    let mut out = Vec::new();
    for (name, cond) in NOISE_CONDITIONS {
        let items: Vec<QaItem> = samples
            .iter()
            .map(|s| {
                let noise = match cond {
                    Some((kind, placement)) => Some(inject_noise(&s.table, &s.query, NoiseSpec { kind, placement, amount })?),
                    None => None,
                };
                let p = assemble_prompt(ctx, &s.table, &s.query, None, noise.as_ref())?;
                QaItem::from_prompt(ctx, s.id, &s.table, &s.query, p)
            })
            .collect::<Result<_>>()?;
        let hits: usize = items
            .par_iter()
            .map(|it| -> Result<usize> { Ok(usize::from(decode_answer_with(model, it.prompt.input(), it.answer().len(), None)? == it.answer())) })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .sum();
        out.push(NoiseRow { condition: name.into(), em: hits as f64 / items.len().max(1) as f64, n: items.len() });
    }
    Ok(out)
}

pub fn noise_csv(rows: &[NoiseRow]) -> String {
    let mut s = String::from("condition,em,n\n");
    for r in rows {
        s.push_str(&format!("{},{:.4},{}\n", r.condition, r.em, r.n));
    }
    s
}

#[cfg(test)]
mod tests;
