// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binding::{self, BindAxis, QaItem};
use crate::coords::{self, ProbeData, ProbeSite, ProbeTarget, QuerySites, SwapPair};
use crate::error::{LabError, Result};
use crate::geometry::{self, SteerItem};
use crate::model::{self, EvalExample, HookPoint, CapturePlan, Model, TrainConfig, TrainExample};
use crate::multicell;
use crate::patchkit::{self, PatchOptions, PatchPair};
use crate::plot::{self, Series};
use crate::prompt::{assemble_multi_query, assemble_prompt, PromptContext, PromptInstance, Vocab};
use crate::tablegen::{self, Corpus, Demo, EntityPool, QueryKind, QuerySpec, Sample, Split, QUERY_TEMPLATES};

use super::rundir::{sha256_file, RunDir, RunManifest};
use super::summary::*;
use super::RunConfig;

/// Pipeline stages, in the order `all` runs them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    Gen,
    Train,
    Eval,
    PatchMap,
    Stage1,
    Stage2,
    Stage3,
    Steer,
    Compose,
    Noise,
    Multicell,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 12] = [
        Stage::Gen,
        Stage::Train,
        Stage::Eval,
        Stage::PatchMap,
        Stage::Stage1,
        Stage::Stage2,
        Stage::Stage3,
        Stage::Steer,
        Stage::Compose,
        Stage::Noise,
        Stage::Multicell,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::PatchMap => "patch-map",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::Stage3 => "stage3",
            Stage::Steer => "steer",
            Stage::Compose => "compose",
            Stage::Noise => "noise",
            Stage::Multicell => "multicell",
            Stage::Report => "report",
        }
    }

    /// Output directory inside the run directory.
    pub fn dir(self) -> &'static str {
        match self {
            Stage::Gen => "data",
            Stage::Train => "model",
            Stage::PatchMap => "patch",
            s => s.name(),
        }
    }

    pub fn summary_path(self) -> String {
        format!("{}/summary.json", self.dir())
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| LabError::config("stage", format!("unknown stage `{s}`")))
    }
}

const CHECKPOINT: &str = "model/model.ckpt";

/// Runs one stage inside `dir` and updates the manifest.
pub fn run_stage(cfg: &RunConfig, dir: &RunDir, stage: Stage) -> Result<()> {
    cfg.validate()?;
    let mut manifest = if stage == Stage::Gen {
        clear_outputs(dir)?;
        RunManifest::new(cfg)
    } else {
        let m = RunManifest::load(dir)?.ok_or_else(|| LabError::Prerequisite { path: dir.path(super::rundir::MANIFEST), hint: "gen".into() })?;
        if m.config_hash != cfg.hash() {
            return Err(LabError::config(
                "config",
                format!("run directory {} was generated from a different config (hash {}); rerun `gen` or pick another --out", dir.root().display(), &m.config_hash[..12]),
            ));
        }
        m
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| LabError::config("threads", e.to_string()))?;
    let t0 = Instant::now();
    let lab = Lab { cfg, dir };
    pool.install(|| lab.run(stage))?;
    manifest.timings.insert(stage.name().into(), t0.elapsed().as_secs_f64());
    manifest.refresh(dir)
}

/// Every stage in order.
pub fn run_all(cfg: &RunConfig, dir: &RunDir, mut on_stage: impl FnMut(Stage)) -> Result<()> {
    for s in Stage::ALL {
        on_stage(s);
        run_stage(cfg, dir, s)?;
    }
    Ok(())
}

fn clear_outputs(dir: &RunDir) -> Result<()> {
    for s in Stage::ALL {
        let p = dir.path(s.dir());
        if p.is_dir() {
            fs::remove_dir_all(p)?;
        }
    }
    let m = dir.path(super::rundir::MANIFEST);
    if m.exists() {
        fs::remove_file(m)?;
    }
    Ok(())
}

struct Lab<'a> {
    cfg: &'a RunConfig,
    dir: &'a RunDir,
}

struct Data {
    ctx: PromptContext,
    heldout: Vec<Sample>,
}

fn read_jsonl(dir: &RunDir, rel: &str) -> Result<Vec<Sample>> {
    let f = fs::File::open(dir.require(rel, "gen")?)?;
    BufReader::new(f).lines().map(|l| Ok(serde_json::from_str(&l?)?)).collect()
}

fn layer_curve_svg(title: &str, y: &str, curves: &[(&str, &[f64])]) -> String {
    let series: Vec<Series> = curves
        .iter()
        .map(|(name, v)| Series { name: name.to_string(), points: v.iter().enumerate().map(|(l, &x)| (l as f64, x)).collect(), style: "line" })
        .collect();
    plot::xy_plot(title, "residual index", y, &series)
}

fn curves_csv(curves: &[(&str, &[f64])]) -> String {
    let mut s = format!("layer,{}\n", curves.iter().map(|c| c.0).collect::<Vec<_>>().join(","));
    let n = curves.iter().map(|c| c.1.len()).max().unwrap_or(0);
    for l in 0..n {
        let vals: Vec<String> = curves.iter().map(|c| c.1.get(l).map(|x| format!("{x:.6}")).unwrap_or_default()).collect();
        s.push_str(&format!("{l},{}\n", vals.join(",")));
    }
    s
}

fn heads_csv(heads: &[Head]) -> String {
    let mut s = String::from("layer,head\n");
    for (l, a) in heads {
        s.push_str(&format!("{l},{a}\n"));
    }
    s
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Residual indices `1..=ceil(L/3)`: the first third of the blocks.
pub fn early_layers(n_layers: usize) -> (usize, usize) {
    (1, n_layers.div_ceil(3).max(1))
}

/// Target-cell effect statistics: the early-layer mean and the best
/// contiguous band of at least two residual indices after the early layers
/// and before the last.
pub fn band_statistics(curve: &[f64], n_layers: usize) -> ((usize, usize), f64, (usize, usize), f64) {
    let early = early_layers(n_layers);
    let finite = |s: &[f64]| mean(&s.iter().cloned().filter(|x| x.is_finite()).collect::<Vec<_>>());
    let early_mean = finite(&curve[early.0.min(curve.len() - 1)..=early.1.min(curve.len() - 1)]);
    let lo = early.1 + 1;
    let hi = n_layers.saturating_sub(1).max(lo);
    let mut best = ((lo, hi.min(curve.len() - 1)), f64::NEG_INFINITY);
    for a in lo..=hi {
        for b in a + 1..=hi {
            if b >= curve.len() {
                continue;
            }
            let m = finite(&curve[a..=b]);
            if m > best.1 {
                best = ((a, b), m);
            }
        }
    }
    if !best.1.is_finite() && lo < curve.len() {
        best = ((lo, lo), finite(&curve[lo..=lo]));
    }
    (early, early_mean, best.0, best.1)
}

/// Training sequences: each training sample's prompt, extended with questions
/// about other cells of the same table up to `queries_per_table`.
pub fn training_examples(ctx: &PromptContext, samples: &[Sample], queries_per_table: usize) -> Result<Vec<TrainExample>> {
    samples
        .iter()
        .map(|s| {
            let mut rng = s.rng(0x7121);
            let asked = s.query.targets();
            let mut cells: Vec<(usize, usize)> = (0..s.table.n_rows())
                .flat_map(|r| (1..s.table.n_cols()).map(move |c| (r, c)))
                .filter(|rc| !asked.contains(rc))
                .collect();
            cells.shuffle(&mut rng);
            let mut qs = vec![s.query.clone()];
            for &(r, c) in cells.iter().take(queries_per_table - 1) {
                qs.push(QuerySpec::atomic(r, c, rng.gen_range(0..QUERY_TEMPLATES)));
            }
            loop {
                match assemble_multi_query(ctx, &s.table, &qs) {
                    Ok((tokens, answers)) => return Ok(TrainExample { tokens, answers }),
                    Err(LabError::Prompt(_)) if qs.len() > 1 => {
                        qs.pop();
                    }
                    Err(e) => return Err(e),
                }
            }
        })
        .collect()
}

impl Lab<'_> {
    fn run(&self, stage: Stage) -> Result<()> {
        match stage {
            Stage::Gen => self.gen(),
            Stage::Train => self.train(),
            Stage::Eval => self.eval(),
            Stage::PatchMap => self.patch_map(),
            Stage::Stage1 => self.stage1(),
            Stage::Stage2 => self.stage2(),
            Stage::Stage3 => self.stage3(),
            Stage::Steer => self.steer(),
            Stage::Compose => self.compose(),
            Stage::Noise => self.noise(),
            Stage::Multicell => self.multicell(),
            Stage::Report => super::report::write_report(self.cfg, self.dir),
        }
    }

    fn context(&self, pool: &EntityPool, demo: Demo) -> Result<PromptContext> {
        Ok(PromptContext { vocab: Vocab::build(pool)?, demo, layout: self.cfg.layout(), max_len: self.cfg.model.max_seq_len })
    }

    fn gen(&self) -> Result<()> {
        let corpus = Corpus::generate(self.cfg.seed, &self.cfg.dataset)?;
        let ctx = self.context(&corpus.pool, corpus.demo.clone())?;
        let mut lens = Vec::with_capacity(corpus.samples.len());
        for s in &corpus.samples {
            lens.push(assemble_prompt(&ctx, &s.table, &s.query, None, None)?.token_ids.len());
        }
        let d = self.dir;
        d.write_json("data/pool.json", &corpus.pool)?;
        d.write_json("data/demo.json", &corpus.demo)?;
        d.write_json("data/vocab.json", &ctx.vocab)?;
        for (split, rel) in [(Split::Train, "data/train.jsonl"), (Split::Heldout, "data/heldout.jsonl")] {
            let mut body = String::new();
            for s in corpus.split(split) {
                body.push_str(&serde_json::to_string(s)?);
                body.push('\n');
            }
            d.write(rel, body)?;
        }
        let summary = GenSummary {
            n_train: self.cfg.dataset.n_train,
            n_heldout: self.cfg.dataset.n_heldout,
            vocab_size: ctx.vocab.len(),
            mean_prompt_len: lens.iter().sum::<usize>() as f64 / lens.len().max(1) as f64,
            max_prompt_len: lens.iter().copied().max().unwrap_or(0),
            train_sha256: sha256_file(&d.path("data/train.jsonl"))?,
            heldout_sha256: sha256_file(&d.path("data/heldout.jsonl"))?,
        };
        d.write_json(&Stage::Gen.summary_path(), &summary)
    }

    fn data(&self) -> Result<Data> {
        let pool: EntityPool = self.dir.read_json("data/pool.json", "gen")?;
        let demo: Demo = self.dir.read_json("data/demo.json", "gen")?;
        let ctx = self.context(&pool, demo)?;
        let stored: Vocab = self.dir.read_json("data/vocab.json", "gen")?;
        if stored.words() != ctx.vocab.words() {
            return Err(LabError::Format("data/vocab.json does not match the entity pool".into()));
        }
        Ok(Data { ctx, heldout: read_jsonl(self.dir, "data/heldout.jsonl")? })
    }

    fn model(&self) -> Result<Model<f32>> {
        model::load_checkpoint(&self.dir.require(CHECKPOINT, "train")?)
    }

    fn heldout_prompts(&self, data: &Data, n: usize) -> Result<Vec<PromptInstance>> {
        data.heldout[..n].iter().map(|s| assemble_prompt(&data.ctx, &s.table, &s.query, None, None)).collect()
    }

    fn train(&self) -> Result<()> {
        let t0 = Instant::now();
        let data = self.data()?;
        let train_samples = read_jsonl(self.dir, "data/train.jsonl")?;
        let cfg = self.cfg;
        let examples = training_examples(&data.ctx, &train_samples, cfg.train_data.queries_per_table)?;
        let heldout: Vec<EvalExample> = self.heldout_prompts(&data, cfg.train.eval_samples.min(data.heldout.len()))?.iter().map(EvalExample::from).collect();
        let mut m = Model::<f32>::init(cfg.model.config(data.ctx.vocab.len()), cfg.seed)?;
        if cfg.model.aligned_unembed {
            m.align_unembed(1.0 / cfg.model.d_model as f64);
        }
        // The budget covers the whole stage, so setup time comes off it.
        let max_seconds = cfg.train.max_seconds.map(|s| (s - t0.elapsed().as_secs_f64() - 1.0).max(0.0));
        let tc = TrainConfig { seed: cfg.seed.wrapping_add(cfg.train.seed).wrapping_add(1), checkpoint_dir: None, max_seconds, ..cfg.train.clone() };
        let report = model::train(&mut m, &examples, &heldout, &tc, |_| {})?;
        model::save_checkpoint(&m, &self.dir.path(CHECKPOINT))?;
        let mut csv = String::from("step,loss,heldout_em,lr\n");
        for s in &report.history {
            csv.push_str(&format!("{},{:.6},{:.6},{:.8}\n", s.step, s.loss, s.heldout_em, s.lr));
        }
        self.dir.write("model/train_metrics.csv", csv)?;
        let loss: Vec<(f64, f64)> = report.history.iter().map(|s| (s.step as f64, s.loss)).collect();
        let em: Vec<(f64, f64)> = report.history.iter().map(|s| (s.step as f64, s.heldout_em)).collect();
        self.dir.write(
            "model/train_curve.svg",
            plot::xy_plot(
                "Training",
                "step",
                "value",
                &[Series { name: "loss".into(), points: loss, style: "line" }, Series { name: "held-out EM".into(), points: em, style: "line" }],
            ),
        )?;
        let answers: usize = examples.iter().map(|e| e.answers.len()).sum();
        self.dir.write_json(
            &Stage::Train.summary_path(),
            &TrainSummary {
                steps_run: report.steps_run,
                stopped_by: report.stopped_by,
                final_em: report.final_em,
                n_params: m.n_params(),
                n_sequences: examples.len(),
                mean_answers_per_sequence: answers as f64 / examples.len() as f64,
            },
        )
    }

    fn requeried(&self, data: &Data, kind: QueryKind) -> Result<Vec<QaItem>> {
        let samples: Vec<Sample> = data.heldout[..self.cfg.analysis.n_eval]
            .iter()
            .map(|s| tablegen::requery(s, kind, self.cfg.analysis.multicell_subset))
            .collect::<Result<_>>()?;
        QaItem::from_samples(&data.ctx, &samples)
    }

    fn eval(&self) -> Result<()> {
        let data = self.data()?;
        let m = self.model()?;
        let n = self.cfg.analysis.n_eval;
        let atomic = QaItem::from_samples(&data.ctx, &data.heldout[..n])?;
        let breakdown = binding::zero_ablate_eval(&m, &atomic, &[])?;
        let row = multicell::multicell_eval(&m, QueryKind::MultiRow, &self.requeried(&data, QueryKind::MultiRow)?)?;
        let col = multicell::multicell_eval(&m, QueryKind::MultiCol, &self.requeried(&data, QueryKind::MultiCol)?)?;
        let mut csv = binding::ErrorBreakdown::csv_header();
        csv.push_str(&breakdown.to_csv_row("atomic"));
        csv.push_str(&row.breakdown.to_csv_row("multi_row"));
        csv.push_str(&col.breakdown.to_csv_row("multi_col"));
        self.dir.write("eval/breakdown.csv", csv)?;
        self.dir.write_json(
            &Stage::Eval.summary_path(),
            &EvalSummary { atomic_em: breakdown.exact(), multi_row_em: row.em, multi_col_em: col.em, n_items: n, atomic: breakdown },
        )
    }

    fn patch_pairs(&self, data: &Data) -> Result<Vec<PatchPair>> {
        PatchPair::from_samples(&data.ctx, &data.heldout[..self.cfg.analysis.n_patch])
    }

    fn patch_map(&self) -> Result<()> {
        let data = self.data()?;
        let m = self.model()?;
        let pairs = self.patch_pairs(&data)?;
        let opts = PatchOptions::default();
        let layer = patchkit::run_layer_patch(&m, &pairs, opts)?;
        let heads = patchkit::run_head_patch_last(&m, &pairs, opts)?;
        let dir = self.dir.path("patch");
        layer.write(&dir, "layer_region_effect")?;
        heads.write(&dir, "head_effect")?;
        let l = m.config.n_layers;
        let curve: Vec<f64> = (0..=l).map(|i| layer.get(i, 9)).collect();
        let (early, early_mean, band, band_mean) = band_statistics(&curve, l);
        let mut top: Vec<(usize, usize, f64)> = (0..l).flat_map(|i| (0..m.config.n_heads).map(move |a| (i, a))).map(|(i, a)| (i, a, heads.get(i, a))).filter(|h| h.2.is_finite()).collect();
        top.sort_by(|a, b| b.2.total_cmp(&a.2));
        top.truncate(5);
        self.dir.write_json(
            &Stage::PatchMap.summary_path(),
            &PatchSummary { n_pairs: pairs.len(), target_cell_curve: curve, early, early_mean, band, band_mean, top_heads: top },
        )
    }

    fn stage1(&self) -> Result<()> {
        let data = self.data()?;
        let m = self.model()?;
        let a = &self.cfg.analysis;
        let prompts = self.heldout_prompts(&data, a.n_probe)?;
        let row_sim = binding::header_similarity_accuracy(&m, &prompts, BindAxis::Row)?;
        let col_sim = binding::header_similarity_accuracy(&m, &prompts, BindAxis::Column)?;
        self.dir.write("stage1/header_similarity.csv", curves_csv(&[("row", &row_sim.accuracy), ("column", &col_sim.accuracy)]))?;
        self.dir.write(
            "stage1/header_similarity.svg",
            layer_curve_svg("Header similarity top-1 accuracy", "accuracy", &[("row", &row_sim.accuracy), ("column", &col_sim.accuracy)]),
        )?;
        let row_tab = binding::alignment_heads(&m, &prompts, BindAxis::Row)?;
        let col_tab = binding::alignment_heads(&m, &prompts, BindAxis::Column)?;
        self.dir.write("stage1/row_alignment_scores.csv", row_tab.to_csv())?;
        self.dir.write("stage1/column_alignment_scores.csv", col_tab.to_csv())?;
        let labels = |n: usize, p: &str| (0..n).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
        let (ll, hl) = (labels(m.config.n_layers, "L"), labels(m.config.n_heads, "H"));
        self.dir.write("stage1/row_alignment_scores.svg", plot::heatmap("Row alignment score", &ll, &hl, &row_tab.scores))?;
        self.dir.write("stage1/column_alignment_scores.svg", plot::heatmap("Column alignment score", &ll, &hl, &col_tab.scores))?;
        let row_heads = row_tab.top(a.top_k_alignment);
        let col_heads = col_tab.top(a.top_k_alignment);
        self.dir.write("stage1/row_heads.csv", heads_csv(&row_heads))?;
        self.dir.write("stage1/column_heads.csv", heads_csv(&col_heads))?;
        let items = QaItem::from_samples(&data.ctx, &data.heldout[..a.n_eval])?;
        let study = binding::ablation_study(&m, &items, &row_heads, a.control_draws, self.cfg.seed)?;
        let mut csv = binding::ErrorBreakdown::csv_header();
        csv.push_str(&study.baseline.to_csv_row("baseline"));
        csv.push_str(&study.ablated.to_csv_row("row_heads"));
        csv.push_str(&study.random.to_csv_row("random_heads"));
        self.dir.write("stage1/ablation.csv", csv)?;
        use binding::ErrorCategory::WrongRow;
        self.dir.write_json(
            &Stage::Stage1.summary_path(),
            &Stage1Summary {
                row_heads,
                col_heads,
                row_similarity: row_sim.accuracy,
                col_similarity: col_sim.accuracy,
                baseline_em: study.baseline.exact(),
                ablated_em: study.ablated.exact(),
                random_em: study.random.exact(),
                drop_ablated: study.drop_ablated(),
                drop_random: study.drop_random(),
                wrong_row_ablated: study.ablated.share(WrongRow),
                wrong_row_random: study.random.share(WrongRow),
                random_heads: study.random_heads.clone(),
            },
        )
    }

    fn stage2(&self) -> Result<()> {
        let data = self.data()?;
        let m = self.model()?;
        let heads: patchkit::EffectMatrix = self.dir.read_json("patch/head_effect.json", "patch-map")?;
        let pairs = self.patch_pairs(&data)?;
        let report = patchkit::find_mover_heads(&m, &pairs, &heads, self.cfg.analysis.attn_threshold, self.cfg.analysis.mover_fraction)?;
        self.dir.write_json("stage2/mover_heads.json", &report)?;
        let mut csv = String::from("layer,head,effect,fraction_attending\n");
        for h in &report.heads {
            csv.push_str(&format!("{},{},{:.6},{:.6}\n", h.layer, h.head, h.effect, h.fraction_attending));
        }
        self.dir.write("stage2/mover_heads.csv", csv)?;
        self.dir.write_json(
            &Stage::Stage2.summary_path(),
            &Stage2Summary { mover_heads: report.heads.iter().map(|h| (h.layer, h.head, h.effect, h.fraction_attending)).collect(), n_samples: report.n_samples },
        )
    }

    fn stage3(&self) -> Result<()> {
        let data = self.data()?;
        let m = self.model()?;
        let a = &self.cfg.analysis;
        let l = m.config.n_layers;
        let prompts = self.heldout_prompts(&data, a.n_probe)?;
        let points: Vec<HookPoint> = (0..=l).map(HookPoint::Residual).collect();
        let mask = coords::train_mask(prompts.len(), self.cfg.seed);
        let mut curves = Vec::new();
        for site in [ProbeSite::Cell, ProbeSite::Delimiter] {
            let pd = ProbeData::collect(&m, &prompts, site, &points)?;
            for target in [ProbeTarget::Row, ProbeTarget::Col] {
                curves.push(coords::probe_sweep_data(&pd, l, target, a.ridge_lambda, &mask)?);
            }
        }
        let [row_cell, col_cell, row_delim, col_delim] = [0, 1, 2, 3].map(|i| curves[i].r2_eval());
        let named = [("row_cell", &row_cell[..]), ("col_cell", &col_cell[..]), ("row_delimiter", &row_delim[..]), ("col_delimiter", &col_delim[..])];
        self.dir.write("stage3/probe_r2.csv", curves_csv(&named))?;
        self.dir.write("stage3/probe_r2.svg", layer_curve_svg("Held-out probe R²", "R²", &named))?;

        let col_probe = &curves[1];
        let (peak_layer, _) = col_probe.peak();
        let probe = &col_probe.probes[peak_layer];
        let plan = CapturePlan::none().with(HookPoint::Residual(peak_layer));
        let mut traces = Vec::new();
        for (p, &is_train) in prompts.iter().zip(&mask) {
            if is_train {
                continue;
            }
            let (_, trace) = m.forward(p.input(), &plan, None)?;
            traces.push(coords::predict_trace(probe, p, trace.get(HookPoint::Residual(peak_layer))?, m.config.d_model));
        }
        let (saw, p_value) = coords::sawtooth_permutation_test(&traces, a.permutations, self.cfg.seed);
        if let Some(t) = traces.first() {
            let truth: Vec<(f64, f64)> = t.c_idx.iter().enumerate().map(|(i, &c)| (i as f64, c as f64)).collect();
            let pred: Vec<(f64, f64)> = t.predicted.iter().enumerate().map(|(i, &c)| (i as f64, c)).collect();
            self.dir.write(
                "stage3/sawtooth.svg",
                plot::xy_plot(
                    "Column probe over cell tokens",
                    "cell token",
                    "column index",
                    &[Series { name: "true".into(), points: truth, style: "line" }, Series { name: "predicted".into(), points: pred, style: "dot" }],
                ),
            )?;
        }

        let inter = coords::rope_interaction(&m, &prompts, None, QuerySites::First)?;
        let coordinate_heads = inter.top(a.top_k_coordinate);
        let mut rank = String::from("rank,layer,head,contrast\n");
        for (i, &(hl, ha)) in inter.ranked.iter().enumerate() {
            let c = inter.get(hl, ha).map(|x| x.contrast).unwrap_or(f64::NAN);
            rank.push_str(&format!("{i},{hl},{ha},{c:.6}\n"));
        }
        self.dir.write("stage3/interaction_ranking.csv", rank)?;
        for &(hl, ha) in &coordinate_heads {
            if let Some(mx) = inter.get(hl, ha) {
                let labels: Vec<String> = mx.columns.iter().map(|c| c.to_string()).collect();
                self.dir.write(&format!("stage3/interaction_L{hl}H{ha}.csv"), mx.to_csv())?;
                self.dir.write(&format!("stage3/interaction_L{hl}H{ha}.svg"), plot::heatmap(&format!("Query-key interaction L{hl}H{ha}"), &labels, &labels, &mx.s))?;
            }
        }

        let rankings = coords::head_probe_rank(&m, &prompts, a.ridge_lambda, self.cfg.seed)?;
        let mut rk = String::from("target,site,rank,layer,head,r2\n");
        for r in &rankings {
            for (i, (hl, ha, r2)) in r.heads.iter().enumerate() {
                rk.push_str(&format!("{:?},{:?},{i},{hl},{ha},{r2:.6}\n", r.target, r.site));
            }
        }
        self.dir.write("stage3/head_probe_rank.csv", rk.to_lowercase())?;
        let pick = |t: ProbeTarget, s: ProbeSite| -> Vec<Head> {
            rankings.iter().find(|r| r.target == t && r.site == s).map(|r| r.top(a.top_k_probe_heads)).unwrap_or_default()
        };
        let delimiter_heads = pick(ProbeTarget::Col, ProbeSite::Delimiter);
        let cell_heads = pick(ProbeTarget::Col, ProbeSite::Cell);
        let mut head_patch = [[f64::NAN; 2]; 2];
        let mut head_patch_n = [[0; 2]; 2];
        let mut csv = String::from("target,site,heads,effect,n\n");
        let delta = PatchOptions::default().delta_denom;
        for (ti, target) in [ProbeTarget::Row, ProbeTarget::Col].into_iter().enumerate() {
            let pairs = SwapPair::from_samples(&data.ctx, &data.heldout[..a.n_patch], target)?;
            for (si, site) in [ProbeSite::Cell, ProbeSite::Delimiter].into_iter().enumerate() {
                let heads = pick(target, site);
                let (e, n) = coords::delimiter_head_patch(&m, &pairs, &heads, site, delta)?;
                head_patch[ti][si] = e;
                head_patch_n[ti][si] = n;
                let hs: Vec<String> = heads.iter().map(|(x, y)| format!("L{x}H{y}")).collect();
                csv.push_str(&format!("{target:?},{site:?},{},{e:.6},{n}\n", hs.join(" ")).to_lowercase());
            }
        }
        self.dir.write("stage3/head_patch.csv", csv)?;
        self.dir.write_json(
            &Stage::Stage3.summary_path(),
            &Stage3Summary {
                row_cell,
                col_cell,
                row_delimiter: row_delim,
                col_delimiter: col_delim,
                early: early_layers(l),
                sawtooth_layer: peak_layer,
                sawtooth_score: saw,
                sawtooth_p: p_value,
                coordinate_heads,
                delimiter_heads,
                cell_heads,
                head_patch,
                head_patch_n,
            },
        )
    }

    fn window(&self, n_layers: usize) -> Vec<usize> {
        self.cfg.analysis.steer_window.clone().unwrap_or_else(|| geometry::middle_window(n_layers))
    }

    fn steer_items(&self, data: &Data) -> Result<Vec<SteerItem>> {
        data.heldout[..self.cfg.analysis.n_steer].iter().map(|s| SteerItem::new(&data.ctx, s)).collect()
    }

    fn steer(&self) -> Result<()> {
        let data = self.data()?;
        let m = self.model()?;
        let a = &self.cfg.analysis;
        let prompts = self.heldout_prompts(&data, a.n_probe)?;
        let items = self.steer_items(&data)?;
        let window = self.window(m.config.n_layers);
        let delta = PatchOptions::default().delta_denom;
        let mut rows = Vec::new();
        let mut norms = Vec::new();
        for &k in &a.compose_ks {
            let mut shift = match geometry::extract_shift_vector(&m, &prompts, k, &window) {
                Ok(s) => s,
                Err(LabError::Config { .. }) => continue,
                Err(e) => return Err(e),
            };
            if a.global_average {
                shift = shift.global_average();
            }
            norms.push((k, shift.norm()));
            rows.push(geometry::steer_summary(&m, &data.ctx, &items, &shift.unit(), k, a.alpha, delta)?);
        }
        let mut csv = String::from("k,mean_effect,raised,included,excluded\n");
        for r in &rows {
            csv.push_str(&format!("{},{:.6},{:.6},{},{}\n", r.k, r.mean_effect, r.raised, r.included, r.excluded));
        }
        self.dir.write("steer/steering.csv", csv)?;
        let pts = |f: fn(&geometry::SteerSummary) -> f64| rows.iter().map(|r| (r.k as f64, f(r))).collect::<Vec<_>>();
        self.dir.write(
            "steer/steering.svg",
            plot::xy_plot(
                "Steering by column offset",
                "k",
                "value",
                &[Series { name: "mean effect".into(), points: pts(|r| r.mean_effect), style: "dot" }, Series { name: "share raised".into(), points: pts(|r| r.raised), style: "star" }],
            ),
        )?;
        self.dir.write_json(&Stage::Steer.summary_path(), &SteerStageSummary { window, alpha: a.alpha, shift_norms: norms, rows })
    }

    fn compose(&self) -> Result<()> {
        let data = self.data()?;
        let m = self.model()?;
        let a = &self.cfg.analysis;
        let prompts = self.heldout_prompts(&data, a.n_probe)?;
        let items = self.steer_items(&data)?;
        let window = self.window(m.config.n_layers);
        let delta = PatchOptions::default().delta_denom;
        let rows = geometry::composition_experiment(&m, &data.ctx, &prompts, &items, &a.compose_ks, a.max_offset, &window, a.compose_alpha, delta)?;
        self.dir.write("compose/composition.csv", geometry::composition_csv(&rows))?;
        self.dir.write("compose/composition.svg", geometry::composition_svg(&rows))?;
        self.dir.write_json(&Stage::Compose.summary_path(), &ComposeSummary { rank_correlation: geometry::composition_rank_correlation(&rows), n_rows: rows.len() })
    }

    fn noise(&self) -> Result<()> {
        let data = self.data()?;
        let m = self.model()?;
        let a = &self.cfg.analysis;
        let rows = coords::noise_eval(&m, &data.ctx, &data.heldout[..a.n_eval], a.noise_amount)?;
        self.dir.write("noise/noise.csv", coords::noise_csv(&rows))?;
        self.dir.write_json(&Stage::Noise.summary_path(), &NoiseSummary { rows })
    }

    fn multicell(&self) -> Result<()> {
        let s1: Stage1Summary = self.dir.read_json(&Stage::Stage1.summary_path(), "stage1")?;
        let s3: Stage3Summary = self.dir.read_json(&Stage::Stage3.summary_path(), "stage3")?;
        let data = self.data()?;
        let m = self.model()?;
        let rows = self.requeried(&data, QueryKind::MultiRow)?;
        let cols = self.requeried(&data, QueryKind::MultiCol)?;
        let base_row = multicell::multicell_eval(&m, QueryKind::MultiRow, &rows)?;
        let base_col = multicell::multicell_eval(&m, QueryKind::MultiCol, &cols)?;
        let ablated = multicell::multicell_ablation(&m, QueryKind::MultiRow, &rows, &s1.row_heads)?;
        let seeds: Vec<u64> = (0..3).map(|i| self.cfg.seed.wrapping_add(1000 + i)).collect();
        let mut random_em = Vec::new();
        let mut csv = binding::ErrorBreakdown::csv_header();
        csv.push_str(&base_row.breakdown.to_csv_row("multi_row"));
        csv.push_str(&base_col.breakdown.to_csv_row("multi_col"));
        csv.push_str(&ablated.breakdown.to_csv_row("multi_row_row_heads"));
        for &seed in &seeds {
            let heads = binding::random_heads(&m.config, &s1.row_heads, s1.row_heads.len(), seed)?;
            let r = multicell::multicell_ablation(&m, QueryKind::MultiRow, &rows, &heads)?;
            csv.push_str(&r.breakdown.to_csv_row(&format!("multi_row_random_{seed}")));
            random_em.push(r.em);
        }
        self.dir.write("multicell/breakdown.csv", csv)?;
        let mut flow = String::from("transition,count\n");
        for (k, v) in multicell::flow(&base_row, &ablated) {
            flow.push_str(&format!("{k},{v}\n"));
        }
        self.dir.write("multicell/row_head_flow.csv", flow)?;
        let prompts: Vec<PromptInstance> = cols.iter().map(|i| i.prompt.clone()).collect();
        let maps = multicell::multicell_rope_heatmap(&m, &prompts, &s3.coordinate_heads)?;
        for (card, rep) in &maps {
            if let Some(mx) = rep.matrices.first() {
                let labels: Vec<String> = mx.columns.iter().map(|c| c.to_string()).collect();
                self.dir.write(&format!("multicell/interaction_{card}cells.csv"), mx.to_csv())?;
                self.dir.write(
                    &format!("multicell/interaction_{card}cells.svg"),
                    plot::heatmap(&format!("Query-key interaction L{}H{}, {card} queried columns", mx.layer, mx.head), &labels, &labels, &mx.s),
                )?;
            }
        }
        self.dir.write_json(
            &Stage::Multicell.summary_path(),
            &MulticellSummary {
                multi_row_em: base_row.em,
                multi_col_em: base_col.em,
                row_heads: s1.row_heads,
                multi_row_ablated_em: ablated.em,
                multi_row_random_em: random_em,
                random_seeds: seeds,
                n_items: rows.len(),
                heatmap_cardinalities: maps.keys().copied().collect(),
            },
        )
    }
}
