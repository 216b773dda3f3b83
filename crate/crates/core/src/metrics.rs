//! Normalized MSE and report emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{CostLedger, RoundRecord};
use crate::fusion::FusorKind;
use crate::scenario::Modality;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmseResult {
    /// `100 · Σ‖pred − truth‖² / Σ‖truth − mean(truth)‖²`.
    pub value: f64,
    pub modality: Option<Modality>,
    pub samples: usize,
}

fn check_shapes<P: AsRef<[f64]>, T: AsRef<[f64]>>(pred: &[P], truth: &[T]) -> Result<usize> {
    if pred.len() != truth.len() {
        return Err(Error::shape("nmse sample count", truth.len(), pred.len()));
    }
    let dim = truth.first().map_or(0, |t| t.as_ref().len());
    for (p, t) in pred.iter().zip(truth) {
        if t.as_ref().len() != dim {
            return Err(Error::shape("nmse truth dimension", dim, t.as_ref().len()));
        }
        if p.as_ref().len() != dim {
            return Err(Error::shape("nmse prediction dimension", dim, p.as_ref().len()));
        }
    }
    Ok(dim)
}

/// Per-coordinate sample mean.
pub fn mean_vector<T: AsRef<[f64]>>(samples: &[T]) -> Vec<f64> {
    let dim = samples.first().map_or(0, |t| t.as_ref().len());
    let mut mean = vec![0.0; dim];
    for s in samples {
        for (m, &v) in mean.iter_mut().zip(s.as_ref()) {
            *m += v;
        }
    }
    let n = samples.len().max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

pub fn nmse<P: AsRef<[f64]>, T: AsRef<[f64]>>(pred: &[P], truth: &[T]) -> Result<NmseResult> {
    check_shapes(pred, truth)?;
    if truth.len() < 2 {
        return Err(Error::UndefinedNormalization);
    }
    let mean = mean_vector(truth);
    let mut err = 0.0;
    let mut var = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        for ((&pi, &ti), &mi) in p.as_ref().iter().zip(t.as_ref()).zip(&mean) {
            err += (pi - ti) * (pi - ti);
            var += (ti - mi) * (ti - mi);
        }
    }
    if !(var > 0.0) {
        return Err(Error::UndefinedNormalization);
    }
    Ok(NmseResult {
        value: 100.0 * (err / var),
        modality: None,
        samples: truth.len(),
    })
}

/// One evaluated (fusor, op, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub fusor: FusorKind,
    pub op: String,
    pub seed: u64,
    /// Mean of the per-target values.
    pub nmse: f64,
    pub per_target: BTreeMap<Modality, f64>,
}

/// A mapping history tagged with the run that produced it.
#[derive(Debug, Clone)]
pub struct HistoryRun {
    pub run: String,
    pub rounds: Vec<RoundRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub fusor: FusorKind,
    pub op: String,
    pub seeds: usize,
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub std: f64,
}

/// Mean and spread over seeds, in first-appearance order of (fusor, op).
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut groups: Vec<(FusorKind, &str, Vec<f64>)> = Vec::new();
    for r in rows {
        match groups.iter_mut().find(|(f, op, _)| *f == r.fusor && *op == r.op) {
            Some((_, _, v)) => v.push(r.nmse),
            None => groups.push((r.fusor, &r.op, vec![r.nmse])),
        }
    }
    groups
        .into_iter()
        .map(|(fusor, op, v)| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
            SummaryRow {
                fusor,
                op: op.to_string(),
                seeds: v.len(),
                mean,
                std,
            }
        })
        .collect()
}

pub const RESULTS_HEADER: [&str; 7] = ["fusor", "op", "seed", "nmse", "nmse_v", "nmse_w", "nmse_s"];
pub const SUMMARY_HEADER: [&str; 5] = ["fusor", "op", "seeds", "mean_nmse", "std_nmse"];
pub const HISTORY_HEADER: [&str; 8] = [
    "run",
    "round",
    "area",
    "loss",
    "grad_norm_sq",
    "up_bytes",
    "down_bytes",
    "wall_ms",
];
pub const COSTS_HEADER: [&str; 8] = [
    "run",
    "mode",
    "upload_bytes",
    "download_bytes",
    "total_bytes",
    "messages",
    "local_steps",
    "server_steps",
];

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn finish(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(RESULTS_HEADER)?;
    for r in rows {
        let cell = |m: Modality| r.per_target.get(&m).map(f64::to_string).unwrap_or_default();
        w.write_record([
            r.fusor.name().to_string(),
            r.op.clone(),
            r.seed.to_string(),
            r.nmse.to_string(),
            cell(Modality::V),
            cell(Modality::W),
            cell(Modality::S),
        ])?;
    }
    finish(w, path)
}

/// Reads `results.csv` back.
pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i as u64 + 2;
        let parse_err = |message: String| Error::Parse { line, message };
        let num = |s: &str| s.parse::<f64>().map_err(|e| parse_err(format!("bad number {s:?}: {e}")));
        let mut per_target = BTreeMap::new();
        for (k, m) in [(4, Modality::V), (5, Modality::W), (6, Modality::S)] {
            let cell = rec.get(k).unwrap_or("");
            if !cell.is_empty() {
                per_target.insert(m, num(cell)?);
            }
        }
        out.push(ResultRow {
            fusor: rec.get(0).unwrap_or("").parse().map_err(|e: Error| parse_err(e.to_string()))?,
            op: rec.get(1).unwrap_or("").to_string(),
            seed: rec
                .get(2)
                .unwrap_or("")
                .parse()
                .map_err(|e| parse_err(format!("bad seed: {e}")))?,
            nmse: num(rec.get(3).unwrap_or(""))?,
            per_target,
        });
    }
    Ok(out)
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        w.write_record([
            r.fusor.name().to_string(),
            r.op.clone(),
            r.seeds.to_string(),
            r.mean.to_string(),
            r.std.to_string(),
        ])?;
    }
    finish(w, path)
}

/// One `all` row per round (probe loss, gradient norm, bytes, wall time)
/// followed by one row per area with its mean local loss.
pub fn write_history_csv(path: &Path, runs: &[HistoryRun]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(HISTORY_HEADER)?;
    for run in runs {
        for r in &run.rounds {
            w.write_record([
                run.run.clone(),
                r.round.to_string(),
                "all".to_string(),
                r.global_loss.to_string(),
                r.grad_norm_sq.to_string(),
                r.upload_bytes.to_string(),
                r.download_bytes.to_string(),
                format!("{:.3}", r.wall_ms),
            ])?;
            for (area, loss) in r.area_losses.iter().enumerate() {
                w.write_record([
                    run.run.clone(),
                    r.round.to_string(),
                    area.to_string(),
                    loss.map(|l| l.to_string()).unwrap_or_default(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                ])?;
            }
        }
    }
    finish(w, path)
}

pub fn write_costs_csv(path: &Path, ledgers: &[(String, CostLedger)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(COSTS_HEADER)?;
    for (run, l) in ledgers {
        let mode = match l.mode {
            crate::federation::LedgerMode::Federated => "federated",
            crate::federation::LedgerMode::Centralized => "centralized",
        };
        w.write_record([
            run.clone(),
            mode.to_string(),
            l.upload_bytes.to_string(),
            l.download_bytes.to_string(),
            l.total_bytes().to_string(),
            l.messages.to_string(),
            l.local_steps.to_string(),
            l.server_steps.to_string(),
        ])?;
    }
    finish(w, path)
}

const PALETTE: [&str; 8] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#9c755f",
];

/// Grouped bar chart: one group per op, one bar per fusor (mean NMSE).
pub fn render_chart(summary: &[SummaryRow]) -> String {
    let mut ops: Vec<&str> = Vec::new();
    let mut fusors: Vec<FusorKind> = Vec::new();
    for r in summary {
        if !ops.contains(&r.op.as_str()) {
            ops.push(&r.op);
        }
        if !fusors.contains(&r.fusor) {
            fusors.push(r.fusor);
        }
    }
    let (bar_w, gap, margin, plot_h) = (18.0, 24.0, 50.0, 220.0);
    let group_w = bar_w * fusors.len().max(1) as f64 + gap;
    let width = margin * 2.0 + group_w * ops.len().max(1) as f64 + 120.0;
    let height = plot_h + 90.0;
    let top = summary.iter().map(|r| r.mean).fold(0.0f64, f64::max).max(1e-12);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}">
<style>text {{ font-family: sans-serif; font-size: 11px; }}</style>
<text x="{margin}" y="16">NMSE by fusor and operation</text>
<line x1="{margin}" y1="{y0}" x2="{x1:.1}" y2="{y0}" stroke="black"/>"#,
        y0 = margin / 2.0 + plot_h,
        x1 = width - 120.0,
    );
    for (oi, op) in ops.iter().enumerate() {
        let gx = margin + oi as f64 * group_w;
        for (fi, f) in fusors.iter().enumerate() {
            let Some(r) = summary.iter().find(|r| r.op == *op && r.fusor == *f) else {
                continue;
            };
            let h = plot_h * r.mean / top;
            let _ = writeln!(
                svg,
                r#"<rect class="bar" x="{:.1}" y="{:.1}" width="{bar_w}" height="{:.1}" fill="{}"><title>{} {}: {:.4}</title></rect>"#,
                gx + fi as f64 * bar_w,
                margin / 2.0 + plot_h - h,
                h,
                PALETTE[fi % PALETTE.len()],
                f,
                op,
                r.mean
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}">{}</text>"#,
            gx,
            margin / 2.0 + plot_h + 16.0,
            xml_escape(op)
        );
    }
    for (fi, f) in fusors.iter().enumerate() {
        let y = margin / 2.0 + 14.0 * fi as f64;
        let x = width - 110.0;
        let _ = writeln!(
            svg,
            r#"<rect class="legend" x="{x:.1}" y="{y:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{:.1}">{f}</text>"#,
            PALETTE[fi % PALETTE.len()],
            x + 14.0,
            y + 9.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Everything an experiment reports.
#[derive(Debug, Clone, Default)]
pub struct Report {
    pub results: Vec<ResultRow>,
    pub history: Vec<HistoryRun>,
    pub costs: Vec<(String, CostLedger)>,
    pub charts: bool,
}

/// Writes `results.csv`, `summary.csv`, `history.csv`, `costs.csv` and
/// optionally `charts.svg` into `out_dir`; returns the written paths.
pub fn emit_report(report: &Report, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let path = out_dir.join("results.csv");
    write_results_csv(&path, &report.results)?;
    written.push(path);
    let summary = summarize(&report.results);
    let path = out_dir.join("summary.csv");
    write_summary_csv(&path, &summary)?;
    written.push(path);
    let path = out_dir.join("history.csv");
    write_history_csv(&path, &report.history)?;
    written.push(path);
    let path = out_dir.join("costs.csv");
    write_costs_csv(&path, &report.costs)?;
    written.push(path);
    if report.charts {
        let path = out_dir.join("charts.svg");
        fs::write(&path, render_chart(&summary)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
