// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! A-criteria are exact properties checked against oracles written here and
//! fail the run. B-criteria read the desk run in `runs/desk` at the workspace
//! root, generating it first when it is missing or stale (about 45 minutes
//! on one core); they are reported, not asserted. Set `TABLELAB_SKIP_DESK=1`
//! to skip them.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tablelab::binding::{categorize_output, ErrorBreakdown, ErrorCategory, QaItem};
use tablelab::coords::{fit_ridge, r_squared};
use tablelab::geometry::{extract_shift_vector, middle_window, steer_forward, ShiftVector};
use tablelab::model::{
    grad_check, rope_apply, CapturePlan, Edit, HookPoint, InterventionPlan, LossMode, Model, ModelConfig, Precision, TrainExample,
};
use tablelab::patchkit::{effect_score, logit_diff, PatchPair};
use tablelab::pipeline::{self, acceptance, RunConfig, RunDir, RunManifest, Stage};
use tablelab::prompt::*;
use tablelab::tablegen::*;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn context(seed: u64, layout: Layout) -> (EntityPool, PromptContext) {
    let pool = build_entity_pool(seed, 40, 24).unwrap();
    let demo = Demo::build(&pool, seed).unwrap();
    let vocab = Vocab::build(&pool).unwrap();
    (pool, PromptContext { vocab, demo, layout, max_len: 4096 })
}

const LAYOUTS: [Layout; 3] = [
    Layout { format: Format::Markdown, separator_row: true },
    Layout { format: Format::Csv, separator_row: false },
    Layout { format: Format::Html, separator_row: false },
];

/// Recovers the grid (header row first) from rendered text by scanning
/// delimiters.
fn scan_grid(text: &str, format: Format) -> Vec<Vec<String>> {
    let mut grid = Vec::new();
    for line in text.lines() {
        let words: Vec<&str> = line.split_whitespace().collect();
        if words.is_empty() {
            continue;
        }
        let row: Vec<String> = match format {
            Format::Markdown => {
                if words.iter().all(|w| *w == "|" || w.chars().all(|c| c == '-')) {
                    continue;
                }
                words.split(|w| *w == "|").filter(|g| !g.is_empty()).map(|g| g.join(" ")).collect()
            }
            Format::Csv => words.split(|w| *w == ",").map(|g| g.join(" ")).collect(),
            Format::Html => {
                let mut out = Vec::new();
                let mut cur: Option<Vec<&str>> = None;
                for w in words {
                    match w {
                        "<td>" | "<th>" => cur = Some(Vec::new()),
                        "</td>" | "</th>" => out.push(cur.take().unwrap_or_default().join(" ")),
                        _ => {
                            if let Some(c) = cur.as_mut() {
                                c.push(w)
                            }
                        }
                    }
                }
                out
            }
        };
        grid.push(row);
    }
    grid
}

fn a1_round_trips() -> Check {
    let mut mismatches = 0usize;
    let mut first = None;
    for layout in LAYOUTS {
        let (pool, ctx) = context(31, layout);
        let mut rng = stream_rng(32, layout.format as u64);
        for _ in 0..1000 {
            let t = generate_table(&pool, &DimsRange::DESK, &ctx.demo.table.categories, &mut rng).unwrap();
            let q = make_query(&t, QueryKind::Atomic, 1, &mut rng).unwrap();
            let s = serialize(&ctx.vocab, &t, layout, None).unwrap();
            let text = s.text(&ctx.vocab);
            let mut expect = vec![t.col_headers.clone()];
            expect.extend(t.cells.iter().cloned());
            let mut bad = scan_grid(&text, layout.format) != expect;
            bad |= ctx.vocab.tokenize(&text).map(|ids| ids != s.ids).unwrap_or(true);
            let p = assemble_prompt(&ctx, &t, &q, None, None).unwrap();
            let coords = token_coords(&p);
            for (i, row) in p.cell_pos.iter().enumerate() {
                for (j, &pos) in row.iter().enumerate() {
                    bad |= ctx.vocab.word(p.token_ids[pos]) != t.cells[i][j];
                    let c = coords.coords[pos];
                    bad |= (c.r_idx, c.c_idx, c.class) != (i as i32, j as i32, TokenClass::Cell);
                }
            }
            for (j, &pos) in p.header_pos.iter().enumerate() {
                bad |= ctx.vocab.word(p.token_ids[pos]) != t.col_headers[j];
                bad |= coords.coords[pos].c_idx != j as i32 || coords.coords[pos].r_idx != -1;
            }
            let (r, c) = (q.row(), q.col());
            bad |= p.answer_ids != vec![ctx.vocab.id(t.value(r, c)).unwrap()];
            if bad {
                mismatches += 1;
                first.get_or_insert_with(|| format!("{:?}: {text}", layout.format));
            }
        }
    }
    ensure(mismatches == 0, || format!("{mismatches} mismatching tables, first {}", first.unwrap_or_default()))?;
    Ok("3000 tables (1000 x markdown/csv/html) match the scanned grid, token round trip and span bookkeeping".into())
}

fn a2_rope() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let d = 2 * rng.gen_range(1..=32);
        let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (m, n) = (rng.gen_range(0..2048) as f64, rng.gen_range(0..2048) as f64);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let lhs = dot(&rope_apply(&q, m, 10000.0), &rope_apply(&k, n, 10000.0));
        let rhs = dot(&rope_apply(&q, 0.0, 10000.0), &rope_apply(&k, n - m, 10000.0));
        worst = worst.max((lhs - rhs).abs());
    }
    ensure(worst < 1e-9, || format!("max deviation {worst:e}"))?;
    Ok(format!("1000 draws, max |<rope(q,m),rope(k,n)> - <q,rope(k,n-m)>| = {worst:.1e}"))
}

fn a3_gradcheck() -> Check {
    let cfg = ModelConfig { precision: Precision::F64, ..ModelConfig::tiny() };
    ensure(cfg.n_layers == 2 && cfg.d_model == 16, || "tiny config changed".into())?;
    let m = Model::<f64>::init(cfg.clone(), 3).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch: Vec<TrainExample> = (0..3)
        .map(|i| {
            let n = 10 + i;
            let tokens: Vec<TokenId> = (0..n).map(|_| rng.gen_range(0..cfg.vocab_size as TokenId)).collect();
            TrainExample { tokens, answers: vec![n - 3..n - 1, n - 1..n] }
        })
        .collect();
    let r = grad_check(&m, &batch, 1e-5, 240, LossMode::Answer, 5).map_err(|e| e.to_string())?;
    let families: std::collections::BTreeSet<String> = r.coords.iter().map(|c| c.param.split('.').last().unwrap().to_string()).collect();
    let tensors: std::collections::BTreeSet<&str> = r.coords.iter().map(|c| c.param.as_str()).collect();
    ensure(tensors.len() == m.params.len(), || format!("only {} of {} tensors covered", tensors.len(), m.params.len()))?;
    ensure(r.max_rel_err < 1e-4, || format!("max relative error {:e}", r.max_rel_err))?;
    Ok(format!("{} coordinates over {} tensors ({} families), max relative error {:.1e}", r.coords.len(), tensors.len(), families.len(), r.max_rel_err))
}

fn a4_effect_calibration() -> Check {
    let (pool, ctx) = context(41, LAYOUTS[0]);
    let cfg = ModelConfig { n_layers: 2, n_heads: 2, d_model: 32, d_head: 16, d_mlp: 64, vocab_size: ctx.vocab.len(), max_seq_len: 512, ..ModelConfig::desk(0) };
    let m = Model::<f32>::init(cfg, 42).map_err(|e| e.to_string())?;
    let dcfg = DatasetConfig { n_categories: 40, values_per_category: 24, n_train: 0, n_heldout: 20, ..Default::default() };
    let samples: Vec<Sample> = (0..20).map(|i| draw_sample(&pool, &ctx.demo, &dcfg, 41, 1_000_000 + i, Split::Heldout).unwrap()).collect();
    let pairs = PatchPair::from_samples(&ctx, &samples).map_err(|e| e.to_string())?;
    let l = m.config.n_layers;
    let (mut worst_self, mut worst_full, mut used) = (0.0f64, 0.0f64, 0);
    for pair in &pairs {
        let plan_all = CapturePlan::residuals(&m.config);
        let (lc, clean) = m.forward(pair.clean.input(), &plan_all, None).unwrap();
        let (ld, dirty) = m.forward(pair.corrupt.input(), &plan_all, None).unwrap();
        let (ld_c, ld_d) = (logit_diff(lc.last(), pair.gold, pair.foil), logit_diff(ld.last(), pair.gold, pair.foil));
        let t = pair.corrupt.input().len() - 1;
        let replace = |src: &tablelab::model::ActivationTrace, layer: usize| {
            InterventionPlan::new(vec![Edit::ResidualReplace { layer, positions: vec![t], source: src.row(HookPoint::Residual(layer), t).unwrap().to_vec() }])
        };
        let (own, _) = m.forward(pair.corrupt.input(), &CapturePlan::none(), Some(&replace(&dirty, 1))).unwrap();
        let (full, _) = m.forward(pair.corrupt.input(), &CapturePlan::none(), Some(&replace(&clean, l))).unwrap();
        let (Some(e_self), Some(e_full)) = (
            effect_score(logit_diff(own.last(), pair.gold, pair.foil), ld_c, ld_d, 1e-3),
            effect_score(logit_diff(full.last(), pair.gold, pair.foil), ld_c, ld_d, 1e-3),
        ) else {
            continue;
        };
        used += 1;
        worst_self = worst_self.max(e_self.abs());
        worst_full = worst_full.max((e_full - 1.0).abs());
    }
    ensure(used >= 10, || format!("only {used} pairs had a usable margin"))?;
    ensure(worst_self == 0.0, || format!("self-patch effect {worst_self:e}"))?;
    ensure(worst_full <= 1e-4, || format!("full restoration off by {worst_full:e}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let mut worst_aff = 0.0f64;
    for _ in 0..1000 {
        let (p, c, d): (f64, f64, f64) = (rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
        let (a, b) = (rng.gen_range(0.1..10.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }, rng.gen_range(-10.0..10.0));
        if let (Some(x), Some(y)) = (effect_score(p, c, d, 1e-3), effect_score(a * p + b, a * c + b, a * d + b, 1e-3 * a.abs())) {
            if (c - d).abs() > 1e-2 {
                worst_aff = worst_aff.max((x - y).abs() / x.abs().max(1.0));
            }
        }
    }
    ensure(worst_aff <= 1e-9, || format!("affine invariance off by {worst_aff:e}"))?;
    Ok(format!("{used} pairs: self-patch 0 exactly, full restoration within {worst_full:.1e}, affine invariance within {worst_aff:.1e}"))
}

/// Conjugate gradients on the centered ridge normal equations.
fn ridge_cg(x: &[f64], d: usize, z: &[f64], lambda: f64) -> (Vec<f64>, f64) {
    let n = z.len();
    let xm: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x[i * d + j]).sum::<f64>() / n as f64).collect();
    let zm = z.iter().sum::<f64>() / n as f64;
    let xc: Vec<f64> = (0..n * d).map(|k| x[k] - xm[k % d]).collect();
    let apply = |w: &[f64]| -> Vec<f64> {
        let xw: Vec<f64> = (0..n).map(|i| (0..d).map(|j| xc[i * d + j] * w[j]).sum()).collect();
        (0..d).map(|j| (0..n).map(|i| xc[i * d + j] * xw[i]).sum::<f64>() + lambda * w[j]).collect()
    };
    let b: Vec<f64> = (0..d).map(|j| (0..n).map(|i| xc[i * d + j] * (z[i] - zm)).sum()).collect();
    let mut w = vec![0.0; d];
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rr: f64 = r.iter().map(|v| v * v).sum();
    for _ in 0..10 * d {
        if rr.sqrt() < 1e-14 {
            break;
        }
        let ap = apply(&p);
        let alpha = rr / p.iter().zip(&ap).map(|(a, b)| a * b).sum::<f64>();
        for j in 0..d {
            w[j] += alpha * p[j];
            r[j] -= alpha * ap[j];
        }
        let rr2: f64 = r.iter().map(|v| v * v).sum();
        for j in 0..d {
            p[j] = r[j] + rr2 / rr * p[j];
        }
        rr = rr2;
    }
    let bias = zm - (0..d).map(|j| xm[j] * w[j]).sum::<f64>();
    (w, bias)
}

fn a5_ridge() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut worst_r2 = 1.0f64;
    for _ in 0..50 {
        let (n, d) = (rng.gen_range(20..120), rng.gen_range(2..24));
        let lambda = 10f64.powf(rng.gen_range(-3.0..1.0));
        let x: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let truth: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let z: Vec<f64> = (0..n).map(|i| (0..d).map(|j| x[i * d + j] * truth[j]).sum::<f64>() + 0.3 + rng.gen_range(-0.1..0.1)).collect();
        let closed = fit_ridge(&x, d, &z, lambda).map_err(|e| e.to_string())?;
        let (w, b) = ridge_cg(&x, d, &z, lambda);
        for (a, c) in closed.weights.iter().zip(&w) {
            worst = worst.max((a - c).abs());
        }
        worst = worst.max((closed.bias - b).abs());
        let exact: Vec<f64> = (0..n).map(|i| (0..d).map(|j| x[i * d + j] * truth[j]).sum::<f64>() - 1.5).collect();
        let fit = fit_ridge(&x, d, &exact, 1e-6).map_err(|e| e.to_string())?;
        let pred: Vec<f64> = (0..n).map(|i| fit.predict(&x[i * d..(i + 1) * d])).collect();
        worst_r2 = worst_r2.min(r_squared(&pred, &exact));
    }
    ensure(worst <= 1e-6, || format!("closed form and CG differ by {worst:e}"))?;
    ensure(worst_r2 >= 0.999, || format!("noise-free R2 {worst_r2}"))?;
    Ok(format!("50 problems: closed form vs conjugate gradients within {worst:.1e}; noise-free R2 >= {worst_r2:.6}"))
}

fn a6_steering() -> Check {
    let (pool, ctx) = context(61, LAYOUTS[0]);
    let cfg = ModelConfig { n_layers: 3, n_heads: 2, d_model: 32, d_head: 16, d_mlp: 64, vocab_size: ctx.vocab.len(), max_seq_len: 512, ..ModelConfig::desk(0) };
    let m = Model::<f32>::init(cfg, 62).map_err(|e| e.to_string())?;
    let mut rng = stream_rng(63, 0);
    let prompts: Vec<PromptInstance> = (0..30)
        .map(|_| {
            let t = generate_table(&pool, &DimsRange::DESK, &ctx.demo.table.categories, &mut rng).unwrap();
            let q = make_query(&t, QueryKind::Atomic, 1, &mut rng).unwrap();
            assemble_prompt(&ctx, &t, &q, None, None).unwrap()
        })
        .collect();
    let window = middle_window(3);
    let v1 = extract_shift_vector(&m, &prompts, 1, &window).map_err(|e| e.to_string())?;
    let vm1 = extract_shift_vector(&m, &prompts, -1, &window).map_err(|e| e.to_string())?;
    let anti = v1.vectors.iter().flatten().zip(vm1.vectors.iter().flatten()).map(|(a, b)| (a + b).abs()).fold(0.0, f64::max);
    ensure(anti <= 1e-6, || format!("v(+1) + v(-1) reaches {anti:e}"))?;
    let v2 = extract_shift_vector(&m, &prompts, 2, &window).map_err(|e| e.to_string())?;
    let comp = v1.add(&v2).map_err(|e| e.to_string())?;
    let exact_sum = comp.vectors.iter().flatten().zip(v1.vectors.iter().flatten().zip(v2.vectors.iter().flatten())).all(|(c, (a, b))| *c == a + b);
    ensure(exact_sum && comp.k == 3, || "composite is not the elementwise sum".into())?;
    for p in &prompts[..10] {
        let (base, _) = m.forward(p.input(), &CapturePlan::none(), None).unwrap();
        let k0 = steer_forward(&m, p, &v1, 0.0, 8.0).unwrap();
        let a0 = steer_forward(&m, p, &v1, 1.0, 0.0).unwrap();
        let zero = ShiftVector { vectors: vec![vec![0.0; m.config.d_model]; window.len()], ..v1.clone() };
        let z = steer_forward(&m, p, &zero, 1.0, 8.0).unwrap();
        ensure(base.data == k0.data && base.data == a0.data && base.data == z.data, || "zero steering changed the logits".into())?;
        let moved = steer_forward(&m, p, &v1.unit(), 1.0, 8.0).unwrap();
        ensure(moved.data != base.data, || "steering had no effect".into())?;
    }
    Ok(format!("k=0 and alpha=0 bit-identical on 10 prompts; composite sum exact; antisymmetry within {anti:.1e}"))
}

/// Category from the definition, over words rather than token ids.
fn oracle_category(pred: &[String], t: &Table, r: usize, c: usize) -> ErrorCategory {
    if pred.len() != 1 {
        return ErrorCategory::NotInTable;
    }
    let w = &pred[0];
    let hits: Vec<(usize, usize)> = (0..t.n_rows()).flat_map(|i| (0..t.n_cols()).map(move |j| (i, j))).filter(|&(i, j)| &t.cells[i][j] == w).collect();
    let is_row_header = &t.cells[r][0] == w;
    let is_col_header = &t.col_headers[c] == w;
    match () {
        _ if hits.contains(&(r, c)) => ErrorCategory::Exact,
        _ if is_row_header => ErrorCategory::RowHeader,
        _ if is_col_header => ErrorCategory::ColumnHeader,
        _ if hits.iter().any(|&(i, j)| i != r && j == c) => ErrorCategory::WrongRow,
        _ if hits.iter().any(|&(i, j)| i == r && j != c) => ErrorCategory::WrongColumn,
        _ if !hits.is_empty() => ErrorCategory::WrongRowAndColumn,
        _ => ErrorCategory::NotInTable,
    }
}

fn a7_taxonomy() -> Check {
    let (pool, ctx) = context(71, LAYOUTS[0]);
    let mut rng = stream_rng(72, 0);
    let words: Vec<&str> = ctx.vocab.words().iter().map(String::as_str).collect();
    let mut b = ErrorBreakdown::default();
    let mut disagreements = 0;
    for _ in 0..10_000 {
        let t = generate_table(&pool, &DimsRange::DESK, &ctx.demo.table.categories, &mut rng).unwrap();
        let q = make_query(&t, QueryKind::Atomic, 1, &mut rng).unwrap();
        let item = QaItem::new(&ctx, 0, &t, &q).unwrap();
        let (r, c) = (q.row(), q.col());
        let len = [0, 1, 1, 1, 1, 2][rng.gen_range(0..6)];
        let pred: Vec<String> = (0..len)
            .map(|_| match rng.gen_range(0..4) {
                0 => t.cells[rng.gen_range(0..t.n_rows())][rng.gen_range(0..t.n_cols())].clone(),
                1 => t.cells[r][rng.gen_range(0..t.n_cols())].clone(),
                2 => t.col_headers[rng.gen_range(0..t.n_cols())].clone(),
                _ => words[rng.gen_range(0..words.len())].to_string(),
            })
            .collect();
        let ids: Vec<TokenId> = pred.iter().map(|w| ctx.vocab.id(w).unwrap()).collect();
        let got = categorize_output(&ids, &item, r, c);
        disagreements += usize::from(got != oracle_category(&pred, &t, r, c));
        b.add(got);
    }
    let sum: usize = ErrorCategory::ALL.iter().map(|&c| b.count(c)).sum();
    ensure(disagreements == 0, || format!("{disagreements} predictions disagree with the oracle"))?;
    ensure(sum == 10_000 && b.total == 10_000, || format!("counts sum to {sum}, total {}", b.total))?;
    let seen = ErrorCategory::ALL.iter().filter(|&&c| b.count(c) > 0).count();
    Ok(format!("10000 predictions, {seen}/7 categories hit, counts sum to 10000, oracle agrees on all"))
}

fn a8_determinism() -> Check {
    let mut cfg = RunConfig::smoke();
    cfg.threads = 1;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut manifests = Vec::new();
    let t0 = Instant::now();
    for name in ["a", "b"] {
        let dir = RunDir::new(tmp.path().join(name));
        pipeline::run_all(&cfg, &dir, |_| {}).map_err(|e| e.to_string())?;
        manifests.push(RunManifest::load(&dir).map_err(|e| e.to_string())?.ok_or("no manifest")?);
    }
    let secs = t0.elapsed().as_secs_f64();
    let (a, b) = (manifests[0].without_timings(), manifests[1].without_timings());
    let differing: Vec<&String> = a.files.iter().filter(|(k, v)| b.files.get(*k) != Some(v)).map(|(k, _)| k).collect();
    ensure(a == b, || format!("manifests differ: {differing:?}"))?;
    ensure(manifests[0].timings.contains_key("report"), || "`all` did not reach the report".into())?;
    Ok(format!("two single-thread smoke runs, {} files, identical manifests ({secs:.0}s)", a.files.len()))
}

fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn desk_complete(dir: &RunDir, cfg: &RunConfig) -> bool {
    matches!(RunManifest::load(dir), Ok(Some(m)) if m.config_hash == cfg.hash() && Stage::ALL.iter().all(|s| m.timings.contains_key(s.name())))
}

fn main() -> ExitCode {
    let checks: [(&str, fn() -> Check); 8] = [
        ("A1", a1_round_trips),
        ("A2", a2_rope),
        ("A3", a3_gradcheck),
        ("A4", a4_effect_calibration),
        ("A5", a5_ridge),
        ("A6", a6_steering),
        ("A7", a7_taxonomy),
        ("A8", a8_determinism),
    ];
    let mut failed = 0;
    let mut lines = BTreeMap::new();
    for (id, f) in checks {
        let t0 = Instant::now();
        let line = match f() {
            Ok(d) => format!("{id} PASS: {d} [{:.1}s]", t0.elapsed().as_secs_f64()),
            Err(d) => {
                failed += 1;
                format!("{id} FAIL: {d}")
            }
        };
        println!("{line}");
        lines.insert(id, line);
    }

    if std::env::var_os("TABLELAB_SKIP_DESK").is_some() {
        println!("B1-B8 SKIPPED: TABLELAB_SKIP_DESK is set");
    } else {
        let cfg = RunConfig::desk();
        let dir = RunDir::new(workspace_root().join("runs/desk"));
        if !desk_complete(&dir, &cfg) {
            println!("desk run missing or stale; generating {}", dir.root().display());
            if let Err(e) = pipeline::run_all(&cfg, &dir, |s| println!("  desk stage {s}")) {
                println!("desk run failed: {e}");
            }
        }
        for v in acceptance::evaluate(&dir) {
            println!("{}", v.line());
        }
    }

    if failed > 0 {
        println!("{failed} exact criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
