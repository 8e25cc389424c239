use super::*;
use crate::model::{Model, ModelConfig};
use crate::prompt::{Format, Layout, Vocab};
use crate::tablegen::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_problem(seed: u64, n: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let w: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let z = x.chunks_exact(d).map(|r| r.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + 0.3 + 0.5 * rng.gen::<f64>()).collect();
    (x, z)
}

/// Plain gradient descent on the same centered objective, run to convergence.
fn ridge_gd(x: &[f64], d: usize, z: &[f64], lambda: f64) -> Vec<f64> {
    let n = z.len();
    let mut mx = vec![0.0; d];
    for r in x.chunks_exact(d) {
        for j in 0..d {
            mx[j] += r[j] / n as f64;
        }
    }
    let mz = z.iter().sum::<f64>() / n as f64;
    let xc: Vec<f64> = x.chunks_exact(d).flat_map(|r| r.iter().zip(&mx).map(|(a, m)| a - m).collect::<Vec<_>>()).collect();
    // Step size from a power-iteration bound on the largest eigenvalue.
    let mut v = vec![1.0; d];
    let mut top = 0.0;
    for _ in 0..100 {
        let mut xv = vec![0.0; n];
        for i in 0..n {
            xv[i] = (0..d).map(|j| xc[i * d + j] * v[j]).sum();
        }
        let mut u = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                u[j] += xc[i * d + j] * xv[i];
            }
        }
        top = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        v = u.iter().map(|a| a / top).collect();
    }
    let eta = 1.0 / (top + lambda);
    let mut w = vec![0.0; d];
    for _ in 0..20_000 {
        let mut g: Vec<f64> = w.iter().map(|a| lambda * a).collect();
        for i in 0..n {
            let r: f64 = (0..d).map(|j| xc[i * d + j] * w[j]).sum::<f64>() - (z[i] - mz);
            for j in 0..d {
                g[j] += xc[i * d + j] * r;
            }
        }
        for j in 0..d {
            w[j] -= eta * g[j];
        }
    }
    w
}

#[test]
fn ridge_matches_gradient_descent() {
    for seed in 0..3 {
        let (x, z) = random_problem(seed, 200, 32);
        let fit = fit_ridge(&x, 32, &z, 1.0).unwrap();
        let gd = ridge_gd(&x, 32, &z, 1.0);
        let diff = fit.weights.iter().zip(&gd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6, "seed {seed}: {diff}");
    }
}

#[test]
fn ridge_fits_linear_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 8;
    let x: Vec<f64> = (0..100 * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let z: Vec<f64> = x.chunks_exact(d).map(|r| 2.0 * r[0] - r[3] + 5.0).collect();
    let fit = fit_ridge(&x, d, &z, 1e-8).unwrap();
    let pred: Vec<f64> = x.chunks_exact(d).map(|r| fit.predict(r)).collect();
    assert!(r_squared(&pred, &z) >= 0.999);
    assert!((fit.bias - 5.0).abs() < 1e-4);
}

#[test]
fn ridge_degenerate_cases() {
    let x = vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0];
    assert!(fit_ridge(&x, 2, &[1.0, 1.0, 1.0], 0.0).is_err());
    let fit = fit_ridge(&x, 2, &[1.0, 1.0, 1.0], 1.0).unwrap();
    let pred: Vec<f64> = x.chunks_exact(2).map(|r| fit.predict(r)).collect();
    assert_eq!(r_squared(&pred, &[1.0, 1.0, 1.0]), 0.0);
    assert!(fit_ridge(&x[..2], 2, &[1.0], 1.0).is_err());
}

#[test]
fn train_fit_degrades_with_lambda() {
    let (x, z) = random_problem(7, 60, 16);
    let r2 = |lambda: f64| {
        let f = fit_ridge(&x, 16, &z, lambda).unwrap();
        let p: Vec<f64> = x.chunks_exact(16).map(|r| f.predict(r)).collect();
        r_squared(&p, &z)
    };
    let base = r2(1e-10);
    for l in [0.1, 1.0, 10.0, 100.0] {
        assert!(r2(l) <= base + 1e-12);
    }
}

#[test]
fn normalization_endpoints() {
    assert_eq!(normalize_index(0, 5), Some(0.0));
    assert_eq!(normalize_index(4, 5), Some(1.0));
    assert_eq!(normalize_index(0, 1), None);
}

fn pool() -> EntityPool {
    build_entity_pool(1, 24, 16).unwrap()
}

fn ctx(format: Format, seed: u64) -> PromptContext {
    let pool = pool();
    let demo = Demo::build(&pool, seed).unwrap();
    PromptContext { vocab: Vocab::build(&pool).unwrap(), demo, layout: Layout { format, ..Layout::default() }, max_len: 1024 }
}

fn prompts(ctx: &PromptContext, n: usize, seed: u64) -> (Vec<Table>, Vec<QuerySpec>, Vec<PromptInstance>) {
    let mut rng = stream_rng(seed, 1);
    let mut out = (vec![], vec![], vec![]);
    let pool = pool();
    for _ in 0..n {
        let t = generate_table(&pool, &DimsRange::DESK, &ctx.demo.table.categories, &mut rng).unwrap();
        let q = make_query(&t, QueryKind::Atomic, 1, &mut rng).unwrap();
        out.2.push(assemble_prompt(ctx, &t, &q, None, None).unwrap());
        out.0.push(t);
        out.1.push(q);
    }
    out
}

#[test]
fn site_targets_lie_in_unit_interval() {
    for format in [Format::Markdown, Format::Csv, Format::Html] {
        let c = ctx(format, 1);
        for p in prompts(&c, 30, 2).2 {
            for site in [ProbeSite::Cell, ProbeSite::Delimiter] {
                let s = probe_sites(&p, site);
                assert!(!s.positions.is_empty());
                assert!(s.row.iter().chain(&s.col).all(|z| (0.0..=1.0).contains(z)));
            }
            assert_eq!(probe_sites(&p, ProbeSite::Cell).positions.len(), p.n_rows() * p.n_cols());
        }
    }
}

fn truth_trace(p: &PromptInstance) -> PredictTrace {
    let s = probe_sites(p, ProbeSite::Cell);
    PredictTrace { predicted: s.c_idx.iter().map(|&c| c as f64).collect(), positions: s.positions, r_idx: s.r_idx, c_idx: s.c_idx }
}

#[test]
fn sawtooth_of_ground_truth_is_one() {
    let c = ctx(Format::Markdown, 3);
    let p = &prompts(&c, 1, 4).2[0];
    let t = truth_trace(p);
    assert!((sawtooth_score(&t) - 1.0).abs() < 1e-12);
    let mut rows = t.clone();
    rows.predicted = rows.r_idx.iter().map(|&r| r as f64).collect();
    assert_eq!(step_score(&rows), 1.0);
}

#[test]
fn random_probe_sawtooth_is_near_zero() {
    let c = ctx(Format::Markdown, 5);
    let ps = prompts(&c, 100, 6).2;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let traces: Vec<PredictTrace> = ps
        .iter()
        .map(|p| {
            let mut t = truth_trace(p);
            t.predicted = t.predicted.iter().map(|_| rng.gen::<f64>()).collect();
            t
        })
        .collect();
    let mean = traces.iter().map(sawtooth_score).sum::<f64>() / traces.len() as f64;
    assert!(mean.abs() < 0.2, "{mean}");
    let (_, p) = sawtooth_permutation_test(&traces, 99, 1);
    assert!(p > 0.01);
    let truth: Vec<PredictTrace> = ps.iter().map(truth_trace).collect();
    let (obs, p) = sawtooth_permutation_test(&truth, 99, 1);
    assert!(obs > 0.99 && p <= 0.01, "{obs} {p}");
}

#[test]
fn spearman_handles_ties_and_constants() {
    assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
    assert!((spearman(&[3.0, 2.0, 1.0], &[10.0, 20.0, 30.0]) + 1.0).abs() < 1e-12);
    assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), 0.0);
}

#[test]
fn interaction_is_toeplitz_for_constant_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let q: Vec<f64> = (0..16).map(|_| StandardNormal.sample(&mut rng)).collect();
    let k: Vec<f64> = (0..16).map(|_| StandardNormal.sample(&mut rng)).collect();
    let pos: Vec<usize> = (0..6).collect();
    let s = interaction_matrix(&vec![q.clone(); 6], &vec![k.clone(); 6], &pos, 10_000.0);
    for j in 0..6 {
        for l in 0..6 {
            if j + 1 < 6 && l + 1 < 6 {
                assert!((s[j][l] - s[j + 1][l + 1]).abs() < 1e-6);
            }
        }
    }
    // Infinite base: no rotation, so S is the plain dot product.
    let s = interaction_matrix(&[q.clone()], &[k.clone()], &[3], f64::INFINITY);
    let dot: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
    assert!((s[0][0] - dot).abs() < 1e-12);
}

#[test]
fn contrast_of_identity_is_one() {
    let s = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
    assert_eq!(diagonal_contrast(&s), 1.0);
}

fn tiny_model(vocab: usize) -> Model<f32> {
    let mut cfg = ModelConfig::tiny();
    cfg.vocab_size = vocab;
    cfg.max_seq_len = 512;
    cfg.precision = crate::model::Precision::F32;
    Model::init(cfg, 3).unwrap()
}

#[test]
fn rope_interaction_on_untrained_model() {
    let c = ctx(Format::Markdown, 12);
    let ps = prompts(&c, 12, 13).2;
    let m = tiny_model(c.vocab.len());
    let rep = rope_interaction(&m, &ps, None, QuerySites::First).unwrap();
    assert_eq!(rep.matrices.len(), 4);
    assert_eq!(rep.ranked.len(), 4);
    let first = rep.get(rep.ranked[0].0, rep.ranked[0].1).unwrap();
    assert!(rep.matrices.iter().all(|x| x.contrast.abs() <= first.contrast.abs()));
    assert_eq!(first.s.len(), first.columns.len());
}

#[test]
fn constant_head_has_zero_r2_and_rankings_cover_four_cases() {
    let c = ctx(Format::Markdown, 14);
    let ps = prompts(&c, 20, 15).2;
    let mut m = tiny_model(c.vocab.len());
    // Zeroing Wo for head 0 of layer 0 makes its contribution identically zero.
    let dh = m.config.d_head;
    let idx = m.idx(0, crate::model::Slot::Wo);
    let d = m.config.d_model;
    for r in 0..dh {
        for j in 0..d {
            m.params[idx].data[r * d + j] = 0.0;
        }
    }
    let ranks = head_probe_rank(&m, &ps, 1.0, 0).unwrap();
    assert_eq!(ranks.len(), 4);
    for r in &ranks {
        let z = r.heads.iter().find(|h| (h.0, h.1) == (0, 0)).unwrap();
        assert_eq!(z.2, 0.0);
    }
}

#[test]
fn swap_pair_moves_gold_cell() {
    let c = ctx(Format::Markdown, 16);
    let (tabs, qs, _) = prompts(&c, 20, 17);
    for (t, q) in tabs.iter().zip(&qs) {
        for target in [ProbeTarget::Col, ProbeTarget::Row] {
            let pair = SwapPair::new(&c, 0, t, q, target).unwrap();
            let coords = token_coords(&pair.swapped);
            let at = coords.coords[pair.gold_pos.1];
            assert_eq!(pair.swapped.token_ids[pair.gold_pos.1], pair.gold);
            match target {
                ProbeTarget::Col => {
                    assert_ne!(at.c_idx as usize, q.col());
                    assert_eq!(at.r_idx as usize, q.row());
                }
                ProbeTarget::Row => {
                    assert_ne!(at.r_idx as usize, q.row());
                    assert_eq!(at.c_idx as usize, q.col());
                }
            }
            let (a, b) = pair.site_positions(ProbeSite::Delimiter).unwrap();
            assert_eq!(pair.original.token_ids[a], crate::prompt::PIPE);
            assert_eq!(pair.swapped.token_ids[b], crate::prompt::PIPE);
        }
    }
}

#[test]
fn empty_head_set_patch_is_zero() {
    let c = ctx(Format::Markdown, 18);
    let (tabs, qs, _) = prompts(&c, 2, 19);
    let pairs: Vec<SwapPair> = tabs.iter().zip(&qs).map(|(t, q)| SwapPair::new(&c, 0, t, q, ProbeTarget::Col).unwrap()).collect();
    let m = tiny_model(c.vocab.len());
    assert_eq!(delimiter_head_patch(&m, &pairs, &[], ProbeSite::Cell, 1e-3).unwrap().0, 0.0);
}

#[test]
fn zero_noise_matches_baseline() {
    let c = ctx(Format::Markdown, 20);
    let pool = pool();
    let cfg = DatasetConfig { n_categories: 24, n_train: 0, n_heldout: 6, ..Default::default() };
    let samples: Vec<Sample> = (0..6).map(|i| draw_sample(&pool, &c.demo, &cfg, 20, 1_000_000 + i, Split::Heldout).unwrap()).collect();
    let m = tiny_model(c.vocab.len());
    let rows = noise_eval(&m, &c, &samples, 0).unwrap();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.em == rows[0].em));
}
