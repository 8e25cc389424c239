// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward and backward passes over a packed batch of sequences.

use serde::{Deserialize, Serialize};

use super::hooks::{ActivationTrace, CapturePlan, Edit, HookPoint, InterventionPlan, LogitRows};
use super::scalar::{gemm, Mat, MatMut, Scalar};
use super::{Model, Slot};
use crate::error::{LabError, Result};
use crate::prompt::TokenId;

/// Logit rows returned by [`Model::forward`], `f32`, `[positions.len(), V]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Logits {
    pub positions: Vec<usize>,
    pub vocab: usize,
    pub data: Vec<f32>,
}

impl Logits {
    /// Row for sequence position `pos`, if it was requested.
    pub fn at(&self, pos: usize) -> Option<&[f32]> {
        let i = self.positions.iter().position(|&p| p == pos)?;
        Some(&self.data[i * self.vocab..(i + 1) * self.vocab])
    }

    /// Row of the last requested position.
    pub fn last(&self) -> &[f32] {
        &self.data[self.data.len() - self.vocab..]
    }

    pub fn argmax(row: &[f32]) -> usize {
        let mut best = 0;
        for (i, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = i;
            }
        }
        best
    }
}

/// Several sequences laid end to end; attention never crosses a boundary.
#[derive(Debug, Clone, Default)]
pub struct Sequence {
    pub tokens: Vec<TokenId>,
    /// `starts[s]..starts[s + 1]` are the rows of sequence `s`.
    pub starts: Vec<usize>,
}

impl Sequence {
    pub fn pack<'a>(seqs: impl IntoIterator<Item = &'a [TokenId]>) -> Self {
        let mut out = Sequence { tokens: Vec::new(), starts: vec![0] };
        for s in seqs {
            out.tokens.extend_from_slice(s);
            out.starts.push(out.tokens.len());
        }
        out
    }

    pub fn n_seqs(&self) -> usize {
        self.starts.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn bounds(&self, s: usize) -> (usize, usize) {
        (self.starts[s], self.starts[s + 1])
    }
}

pub(crate) struct LayerCache<T> {
    x: Vec<T>,
    r1: Vec<T>,
    h: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// Attention probabilities, `[T_s, T_s]` per (sequence, head).
    p: Vec<T>,
    p_off: Vec<usize>,
    z: Vec<T>,
    x_mid: Vec<T>,
    r2: Vec<T>,
    h2: Vec<T>,
    a: Vec<T>,
    b: Vec<T>,
}

pub(crate) struct Cache<T> {
    layers: Vec<LayerCache<T>>,
    x_final: Vec<T>,
    rf: Vec<T>,
    /// Final-normed hidden states `[N, d]`.
    pub(crate) hf: Vec<T>,
}

fn rmsnorm<T: Scalar>(x: &[T], g: &[T], d: usize, eps: f64, out: &mut [T], r: &mut [T]) {
    let inv_d = T::from_f64(1.0 / d as f64);
    let eps = T::from_f64(eps);
    for (i, (row, o)) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        let ms: T = row.iter().map(|&v| v * v).sum::<T>() * inv_d;
        let ri = T::ONE / (ms + eps).sqrt();
        r[i] = ri;
        for j in 0..d {
            o[j] = row[j] * ri * g[j];
        }
    }
}

/// Accumulates into `dx` and `dg` given `dy` for `y = g * x * r`.
fn rmsnorm_back<T: Scalar>(x: &[T], g: &[T], r: &[T], dy: &[T], d: usize, dx: &mut [T], dg: &mut [T]) {
    let inv_d = T::from_f64(1.0 / d as f64);
    for (i, ((xr, dyr), dxr)) in x.chunks_exact(d).zip(dy.chunks_exact(d)).zip(dx.chunks_exact_mut(d)).enumerate() {
        let ri = r[i];
        let mut dot = T::ZERO;
        for j in 0..d {
            let dn = dyr[j] * g[j];
            dg[j] += dyr[j] * xr[j] * ri;
            dot += dn * xr[j];
        }
        let coef = ri * ri * ri * dot * inv_d;
        for j in 0..d {
            dxr[j] += ri * dyr[j] * g[j] - coef * xr[j];
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(a: T) -> T {
    T::ONE / (T::ONE + (-a).exp())
}

fn to_f32<T: Scalar>(v: &[T]) -> Vec<f32> {
    v.iter().map(|x| x.to_f64() as f32).collect()
}

/// `y[N, out] = x[N, in] @ w[in, out]`.
fn linear<T: Scalar>(x: &[T], w: &[T], n: usize, d_in: usize, d_out: usize) -> Vec<T> {
    let mut y = vec![T::ZERO; n * d_out];
    gemm(Mat::new(x, n, d_in), Mat::new(w, d_in, d_out), T::ZERO, MatMut::new(&mut y, n, d_out));
    y
}

fn apply_residual_edits<T: Scalar>(x: &mut [T], d: usize, plan: Option<&InterventionPlan>, layer: usize) {
    let Some(plan) = plan else { return };
    for e in plan.residual_edits(layer) {
        match e {
            Edit::ResidualReplace { positions, source, .. } => {
                for (i, &p) in positions.iter().enumerate() {
                    for j in 0..d {
                        x[p * d + j] = T::from_f64(source[i * d + j] as f64);
                    }
                }
            }
            Edit::ResidualAdd { positions, vector, .. } => {
                for &p in positions {
                    for j in 0..d {
                        x[p * d + j] += T::from_f64(vector[j] as f64);
                    }
                }
            }
            _ => unreachable!(),
        }
    }
}

pub(crate) struct Tap<'a> {
    plan: &'a CapturePlan,
    trace: &'a mut ActivationTrace,
}

impl<T: Scalar> Model<T> {
    /// Runs one sequence. Captures are recorded per `capture`, edits in
    /// `plan` are applied at their points before the value is consumed.
    pub fn forward(
        &self,
        tokens: &[TokenId],
        capture: &CapturePlan,
        plan: Option<&InterventionPlan>,
    ) -> Result<(Logits, ActivationTrace)> {
        let cfg = &self.config;
        if tokens.is_empty() || tokens.len() > cfg.max_seq_len {
            return Err(LabError::Shape(format!("sequence of {} tokens; model accepts 1..={}", tokens.len(), cfg.max_seq_len)));
        }
        for p in &capture.points {
            p.check(cfg)?;
        }
        if let Some(plan) = plan {
            plan.validate(cfg, tokens.len())?;
        }
        let batch = Sequence::pack([tokens]);
        let mut trace = ActivationTrace {
            seq_len: tokens.len(),
            d_model: cfg.d_model,
            d_head: cfg.d_head,
            ..Default::default()
        };
        let cache = self.run(&batch, Some(Tap { plan: capture, trace: &mut trace }), plan, false)?;
        let n = tokens.len();
        let positions: Vec<usize> = match &capture.logits {
            LogitRows::Last => vec![n - 1],
            LogitRows::All => (0..n).collect(),
            LogitRows::At(v) => {
                if let Some(&bad) = v.iter().find(|&&p| p >= n) {
                    return Err(LabError::Shape(format!("logit row {bad} outside sequence of {n}")));
                }
                v.clone()
            }
        };
        let data = to_f32(&self.logits_rows(&cache.hf, &positions));
        Ok((Logits { positions, vocab: cfg.vocab_size, data }, trace))
    }

    /// Plain final-position logits.
    pub fn last_logits(&self, tokens: &[TokenId]) -> Result<Vec<f32>> {
        Ok(self.forward(tokens, &CapturePlan::none(), None)?.0.data)
    }

    pub(crate) fn logits_rows(&self, hf: &[T], rows: &[usize]) -> Vec<T> {
        let d = self.config.d_model;
        let mut sel = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            sel.extend_from_slice(&hf[r * d..(r + 1) * d]);
        }
        linear(&sel, self.unembed(), rows.len(), d, self.config.vocab_size)
    }

    /// Core pass. Taps and edits require a single sequence.
    pub(crate) fn run(
        &self,
        batch: &Sequence,
        mut tap: Option<Tap<'_>>,
        plan: Option<&InterventionPlan>,
        keep: bool,
    ) -> Result<Cache<T>> {
        let cfg = &self.config;
        let (d, dh, nh, dm) = (cfg.d_model, cfg.d_head, cfg.n_heads, cfg.d_mlp);
        let n = batch.len();
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        debug_assert!(tap.is_none() && plan.is_none() || batch.n_seqs() == 1);

        let mut x = vec![T::ZERO; n * d];
        let emb = self.embed();
        for (t, &tok) in batch.tokens.iter().enumerate() {
            let tok = tok as usize;
            if tok >= cfg.vocab_size {
                return Err(LabError::UnknownToken(format!("token id {tok} outside vocabulary of {}", cfg.vocab_size)));
            }
            x[t * d..(t + 1) * d].copy_from_slice(&emb[tok * d..(tok + 1) * d]);
        }
        for s in 0..batch.n_seqs() {
            let (s0, s1) = batch.bounds(s);
            if s1 - s0 > cfg.max_seq_len {
                return Err(LabError::Shape(format!("sequence of {} tokens exceeds {}", s1 - s0, cfg.max_seq_len)));
            }
        }

        let mut layers = Vec::with_capacity(if keep { cfg.n_layers } else { 0 });
        for l in 0..cfg.n_layers {
            apply_residual_edits(&mut x, d, plan, l);
            if let Some(tap) = tap.as_mut() {
                if tap.plan.contains(HookPoint::Residual(l)) {
                    tap.trace.tensors.insert(HookPoint::Residual(l), to_f32(&x));
                }
            }
            let mut h = vec![T::ZERO; n * d];
            let mut r1 = vec![T::ZERO; n];
            rmsnorm(&x, self.w(l, Slot::AttnNorm), d, cfg.norm_eps, &mut h, &mut r1);
            let mut q = linear(&h, self.w(l, Slot::Wq), n, d, d);
            let mut k = linear(&h, self.w(l, Slot::Wk), n, d, d);
            let v = linear(&h, self.w(l, Slot::Wv), n, d, d);
            if let Some(tap) = tap.as_mut() {
                for a in 0..nh {
                    for (point, src) in [(HookPoint::QueryPreRope(l, a), &q), (HookPoint::KeyPreRope(l, a), &k)] {
                        if tap.plan.contains(point) {
                            let cols: Vec<T> = src.chunks_exact(d).flat_map(|row| row[a * dh..(a + 1) * dh].iter().copied()).collect();
                            tap.trace.tensors.insert(point, to_f32(&cols));
                        }
                    }
                }
            }
            for s in 0..batch.n_seqs() {
                let (s0, s1) = batch.bounds(s);
                for t in s0..s1 {
                    for a in 0..nh {
                        let off = t * d + a * dh;
                        self.rope.apply(&mut q[off..off + dh], t - s0, false);
                        self.rope.apply(&mut k[off..off + dh], t - s0, false);
                    }
                }
            }

            let mut z = vec![T::ZERO; n * d];
            let mut p_all = Vec::new();
            let mut p_off = Vec::new();
            for s in 0..batch.n_seqs() {
                let (s0, s1) = batch.bounds(s);
                let tl = s1 - s0;
                for a in 0..nh {
                    let mut p = vec![T::ZERO; tl * tl];
                    gemm(
                        Mat::block(&q, d, s0, tl, a * dh, dh),
                        Mat::block(&k, d, s0, tl, a * dh, dh).t(),
                        T::ZERO,
                        MatMut::new(&mut p, tl, tl),
                    );
                    for i in 0..tl {
                        let row = &mut p[i * tl..(i + 1) * tl];
                        let mut mx = row[0] * scale;
                        for j in 0..=i {
                            row[j] *= scale;
                            if row[j] > mx {
                                mx = row[j];
                            }
                        }
                        let mut sum = T::ZERO;
                        for x in row[..=i].iter_mut() {
                            *x = (*x - mx).exp();
                            sum += *x;
                        }
                        let inv = T::ONE / sum;
                        for x in row[..=i].iter_mut() {
                            *x *= inv;
                        }
                        for x in row[i + 1..].iter_mut() {
                            *x = T::ZERO;
                        }
                    }
                    gemm(
                        Mat::new(&p, tl, tl),
                        Mat::block(&v, d, s0, tl, a * dh, dh),
                        T::ZERO,
                        MatMut::block(&mut z, d, s0, tl, a * dh, dh),
                    );
                    if let Some(tap) = tap.as_mut() {
                        if tap.plan.contains(HookPoint::Attention(l, a)) {
                            tap.trace.tensors.insert(HookPoint::Attention(l, a), to_f32(&p));
                        }
                    }
                    if keep {
                        p_off.push(p_all.len());
                        p_all.extend(p);
                    }
                }
            }

            let wo = self.w(l, Slot::Wo);
            let mut replaced: Vec<(usize, &[usize], &[f32])> = Vec::new();
            if let Some(plan) = plan {
                for e in plan.head_edits(l) {
                    match e {
                        Edit::HeadZero { head, .. } => {
                            for row in z.chunks_exact_mut(d) {
                                row[head * dh..(head + 1) * dh].fill(T::ZERO);
                            }
                        }
                        Edit::HeadOutputReplace { head, positions, source, .. } => replaced.push((*head, positions, source)),
                        _ => unreachable!(),
                    }
                }
            }
            let head_out = |z: &[T], a: usize| -> Vec<T> {
                let mut o = vec![T::ZERO; n * d];
                gemm(Mat::block(z, d, 0, n, a * dh, dh), Mat::block(wo, d, a * dh, dh, 0, d), T::ZERO, MatMut::new(&mut o, n, d));
                o
            };
            let mut attn = linear(&z, wo, n, d, d);
            for &(a, positions, source) in &replaced {
                let own = head_out(&z, a);
                for (i, &p) in positions.iter().enumerate() {
                    for j in 0..d {
                        attn[p * d + j] += T::from_f64(source[i * d + j] as f64) - own[p * d + j];
                    }
                }
            }
            if let Some(tap) = tap.as_mut() {
                for a in 0..nh {
                    if tap.plan.contains(HookPoint::HeadOutput(l, a)) {
                        let mut o = to_f32(&head_out(&z, a));
                        for &(ra, positions, source) in &replaced {
                            if ra == a {
                                for (i, &p) in positions.iter().enumerate() {
                                    o[p * d..(p + 1) * d].copy_from_slice(&source[i * d..(i + 1) * d]);
                                }
                            }
                        }
                        tap.trace.tensors.insert(HookPoint::HeadOutput(l, a), o);
                    }
                }
            }

            let x_in = if keep { Some(x.clone()) } else { None };
            for (xi, ai) in x.iter_mut().zip(&attn) {
                *xi += *ai;
            }
            let mut h2 = vec![T::ZERO; n * d];
            let mut r2 = vec![T::ZERO; n];
            rmsnorm(&x, self.w(l, Slot::MlpNorm), d, cfg.norm_eps, &mut h2, &mut r2);
            let ga = linear(&h2, self.w(l, Slot::WGate), n, d, dm);
            let gb = linear(&h2, self.w(l, Slot::WUp), n, d, dm);
            let act: Vec<T> = ga.iter().zip(&gb).map(|(&a, &b)| a * sigmoid(a) * b).collect();
            let mlp = linear(&act, self.w(l, Slot::WDown), n, dm, d);
            let x_mid = if keep { Some(x.clone()) } else { None };
            for (xi, mi) in x.iter_mut().zip(&mlp) {
                *xi += *mi;
            }
            if keep {
                layers.push(LayerCache {
                    x: x_in.unwrap(),
                    r1,
                    h,
                    q,
                    k,
                    v,
                    p: p_all,
                    p_off,
                    z,
                    x_mid: x_mid.unwrap(),
                    r2,
                    h2,
                    a: ga,
                    b: gb,
                });
            }
        }
        apply_residual_edits(&mut x, d, plan, cfg.n_layers);
        if let Some(tap) = tap.as_mut() {
            if tap.plan.contains(HookPoint::Residual(cfg.n_layers)) {
                tap.trace.tensors.insert(HookPoint::Residual(cfg.n_layers), to_f32(&x));
            }
        }
        let mut hf = vec![T::ZERO; n * d];
        let mut rf = vec![T::ZERO; n];
        rmsnorm(&x, self.final_norm(), d, cfg.norm_eps, &mut hf, &mut rf);
        Ok(Cache { layers, x_final: x, rf, hf })
    }

    /// Gradients of the loss given `dlogits` at packed rows `rows`, in
    /// parameter order.
    pub(crate) fn backward(&self, batch: &Sequence, cache: &Cache<T>, rows: &[usize], dlogits: &[T]) -> Vec<Vec<T>> {
        let cfg = &self.config;
        let (d, dh, nh, dm, v) = (cfg.d_model, cfg.d_head, cfg.n_heads, cfg.d_mlp, cfg.vocab_size);
        let n = batch.len();
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut grads: Vec<Vec<T>> = self.params.iter().map(|p| vec![T::ZERO; p.data.len()]).collect();
        let n_params = grads.len();

        // Unembedding and final norm.
        let mut sel = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            sel.extend_from_slice(&cache.hf[r * d..(r + 1) * d]);
        }
        let m = rows.len();
        gemm(Mat::new(&sel, m, d).t(), Mat::new(dlogits, m, v), T::ZERO, MatMut::new(&mut grads[n_params - 1], d, v));
        let mut dsel = vec![T::ZERO; m * d];
        gemm(Mat::new(dlogits, m, v), Mat::new(self.unembed(), d, v).t(), T::ZERO, MatMut::new(&mut dsel, m, d));
        let mut dhf = vec![T::ZERO; n * d];
        for (i, &r) in rows.iter().enumerate() {
            for j in 0..d {
                dhf[r * d + j] += dsel[i * d + j];
            }
        }
        let mut dx = vec![T::ZERO; n * d];
        rmsnorm_back(&cache.x_final, self.final_norm(), &cache.rf, &dhf, d, &mut dx, &mut grads[n_params - 2]);

        for l in (0..cfg.n_layers).rev() {
            let c = &cache.layers[l];
            let gi = |slot: Slot| self.idx(l, slot);

            // MLP.
            let act: Vec<T> = c.a.iter().zip(&c.b).map(|(&a, &b)| a * sigmoid(a) * b).collect();
            gemm(Mat::new(&act, n, dm).t(), Mat::new(&dx, n, d), T::ZERO, MatMut::new(&mut grads[gi(Slot::WDown)], dm, d));
            let mut dact = vec![T::ZERO; n * dm];
            gemm(Mat::new(&dx, n, d), Mat::new(self.w(l, Slot::WDown), dm, d).t(), T::ZERO, MatMut::new(&mut dact, n, dm));
            let mut da = vec![T::ZERO; n * dm];
            let mut db = vec![T::ZERO; n * dm];
            for i in 0..n * dm {
                let (a, b) = (c.a[i], c.b[i]);
                let s = sigmoid(a);
                da[i] = dact[i] * b * s * (T::ONE + a * (T::ONE - s));
                db[i] = dact[i] * a * s;
            }
            gemm(Mat::new(&c.h2, n, d).t(), Mat::new(&da, n, dm), T::ZERO, MatMut::new(&mut grads[gi(Slot::WGate)], d, dm));
            gemm(Mat::new(&c.h2, n, d).t(), Mat::new(&db, n, dm), T::ZERO, MatMut::new(&mut grads[gi(Slot::WUp)], d, dm));
            let mut dh2 = vec![T::ZERO; n * d];
            gemm(Mat::new(&da, n, dm), Mat::new(self.w(l, Slot::WGate), d, dm).t(), T::ZERO, MatMut::new(&mut dh2, n, d));
            gemm(Mat::new(&db, n, dm), Mat::new(self.w(l, Slot::WUp), d, dm).t(), T::ONE, MatMut::new(&mut dh2, n, d));
            let mut dx_mid = dx.clone();
            rmsnorm_back(&c.x_mid, self.w(l, Slot::MlpNorm), &c.r2, &dh2, d, &mut dx_mid, &mut grads[gi(Slot::MlpNorm)]);

            // Attention output projection.
            gemm(Mat::new(&c.z, n, d).t(), Mat::new(&dx_mid, n, d), T::ZERO, MatMut::new(&mut grads[gi(Slot::Wo)], d, d));
            let mut dz = vec![T::ZERO; n * d];
            gemm(Mat::new(&dx_mid, n, d), Mat::new(self.w(l, Slot::Wo), d, d).t(), T::ZERO, MatMut::new(&mut dz, n, d));

            let mut dq = vec![T::ZERO; n * d];
            let mut dk = vec![T::ZERO; n * d];
            let mut dv = vec![T::ZERO; n * d];
            let mut idx = 0;
            for s in 0..batch.n_seqs() {
                let (s0, s1) = batch.bounds(s);
                let tl = s1 - s0;
                for a in 0..nh {
                    let p = &c.p[c.p_off[idx]..c.p_off[idx] + tl * tl];
                    idx += 1;
                    let mut dp = vec![T::ZERO; tl * tl];
                    gemm(
                        Mat::block(&dz, d, s0, tl, a * dh, dh),
                        Mat::block(&c.v, d, s0, tl, a * dh, dh).t(),
                        T::ZERO,
                        MatMut::new(&mut dp, tl, tl),
                    );
                    gemm(Mat::new(p, tl, tl).t(), Mat::block(&dz, d, s0, tl, a * dh, dh), T::ZERO, MatMut::block(&mut dv, d, s0, tl, a * dh, dh));
                    for i in 0..tl {
                        let pr = &p[i * tl..(i + 1) * tl];
                        let dr = &mut dp[i * tl..(i + 1) * tl];
                        let dot: T = (0..=i).map(|j| pr[j] * dr[j]).sum();
                        for j in 0..=i {
                            dr[j] = pr[j] * (dr[j] - dot) * scale;
                        }
                        for x in dr[i + 1..].iter_mut() {
                            *x = T::ZERO;
                        }
                    }
                    gemm(Mat::new(&dp, tl, tl), Mat::block(&c.k, d, s0, tl, a * dh, dh), T::ZERO, MatMut::block(&mut dq, d, s0, tl, a * dh, dh));
                    gemm(Mat::new(&dp, tl, tl).t(), Mat::block(&c.q, d, s0, tl, a * dh, dh), T::ZERO, MatMut::block(&mut dk, d, s0, tl, a * dh, dh));
                }
                for t in s0..s1 {
                    for a in 0..nh {
                        let off = t * d + a * dh;
                        self.rope.apply(&mut dq[off..off + dh], t - s0, true);
                        self.rope.apply(&mut dk[off..off + dh], t - s0, true);
                    }
                }
            }
            let mut dh_ = vec![T::ZERO; n * d];
            for (slot, dy) in [(Slot::Wq, &dq), (Slot::Wk, &dk), (Slot::Wv, &dv)] {
                gemm(Mat::new(&c.h, n, d).t(), Mat::new(dy, n, d), T::ZERO, MatMut::new(&mut grads[gi(slot)], d, d));
                gemm(Mat::new(dy, n, d), Mat::new(self.w(l, slot), d, d).t(), T::ONE, MatMut::new(&mut dh_, n, d));
            }
            dx = dx_mid;
            rmsnorm_back(&c.x, self.w(l, Slot::AttnNorm), &c.r1, &dh_, d, &mut dx, &mut grads[gi(Slot::AttnNorm)]);
        }

        let ge = &mut grads[0];
        for (t, &tok) in batch.tokens.iter().enumerate() {
            let tok = tok as usize;
            for j in 0..d {
                ge[tok * d + j] += dx[t * d + j];
            }
        }
        grads
    }
}
