// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt::Write;

use crate::error::{LabError, Result};

use super::acceptance;
use super::rundir::RunDir;
use super::stages::Stage;
use super::RunConfig;

const ANALYSES: [Stage; 9] =
    [Stage::Eval, Stage::PatchMap, Stage::Stage1, Stage::Stage2, Stage::Stage3, Stage::Steer, Stage::Compose, Stage::Noise, Stage::Multicell];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn csv_table(body: &str) -> String {
    let mut out = String::from("<table>\n");
    for (i, line) in body.lines().enumerate() {
        let tag = if i == 0 { "th" } else { "td" };
        out.push_str("<tr>");
        for cell in line.split(',') {
            let _ = write!(out, "<{tag}>{}</{tag}>", esc(cell));
        }
        out.push_str("</tr>\n");
    }
    out.push_str("</table>\n");
    out
}

/// Renders `report/report.html` with every CSV and SVG of the analysis
/// stages inline. Fails if no analysis stage has run.
pub fn write_report(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    let done: Vec<Stage> = ANALYSES.into_iter().filter(|s| dir.exists(&s.summary_path())).collect();
    if done.is_empty() {
        return Err(LabError::Prerequisite { path: dir.path(&Stage::Eval.summary_path()), hint: "eval".into() });
    }
    let inventory = dir.inventory()?;
    let mut h = String::from("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>tablelab run report</title>\n");
    h.push_str("<style>body{font-family:sans-serif;max-width:1100px;margin:auto}table{border-collapse:collapse;font-size:12px}td,th{border:1px solid #ccc;padding:2px 6px}pre{background:#f6f6f6;padding:8px}</style>\n");
    h.push_str("</head><body>\n<h1>Run report</h1>\n");
    let _ = writeln!(h, "<p>config hash <code>{}</code></p>", cfg.hash());
    h.push_str("<h2>Checks</h2>\n<ul>\n");
    for v in acceptance::evaluate(dir) {
        let _ = writeln!(h, "<li>{}</li>", esc(&v.line()));
    }
    h.push_str("</ul>\n");
    for stage in [Stage::Train].into_iter().chain(done) {
        let prefix = format!("{}/", stage.dir());
        let _ = writeln!(h, "<h2>{}</h2>", stage.name());
        if let Ok(s) = dir.read_string(&stage.summary_path(), stage.name()) {
            let _ = writeln!(h, "<pre>{}</pre>", esc(&s));
        }
        for rel in inventory.iter().filter(|r| r.starts_with(&prefix)) {
            if rel.ends_with(".svg") {
                let _ = writeln!(h, "<h3>{}</h3>\n{}", esc(rel), dir.read_string(rel, stage.name())?);
            } else if rel.ends_with(".csv") {
                let _ = writeln!(h, "<h3>{}</h3>\n{}", esc(rel), csv_table(&dir.read_string(rel, stage.name())?));
            }
        }
    }
    h.push_str("<h2>Config</h2>\n");
    let _ = writeln!(h, "<pre>{}</pre>\n</body></html>", esc(&cfg.to_json()));
    dir.write("report/report.html", h)
}
