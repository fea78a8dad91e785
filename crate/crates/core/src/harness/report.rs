//! `metrics.json`, `metrics.csv` and SVG plots built from stage results.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Ix1;
use serde::{Deserialize, Serialize};

use super::container::load_container;
use super::pipeline::{
    write_json, BandAblation, CabAblation, CellTrace, Evaluation, Layout, Provenance, Scored, Superres, RESULTS,
};
use crate::denoiser::Conditioning;
use crate::diffusion::moving_average;
use crate::error::{CatdError, Result};
use crate::metrics::{CVResult, MetricReport};

/// One number of one variant of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub group: String,
    pub variant: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportData {
    pub rows: Vec<MetricRow>,
    pub curves: Vec<Curve>,
    pub traces: Vec<CellTrace>,
    /// Sampling period of the low-rate points and of the output curve.
    pub trace_tr_s: (f64, f64),
    /// Raw bytes of every results file read, for the provenance hash.
    pub sources: Vec<(String, Vec<u8>)>,
}

#[derive(Serialize)]
struct MetricsJson<'a> {
    provenance: &'a Provenance,
    rows: &'a [MetricRow],
    curves: &'a [Curve],
    superres_traces: &'a [CellTrace],
}

fn push_metrics(rows: &mut Vec<MetricRow>, group: &str, variant: &str, m: &MetricReport) {
    for (metric, value) in [
        ("rmse", m.rmse),
        ("ssim", m.ssim),
        ("cosine_similarity", m.cosine_similarity),
        ("ccc", m.ccc),
        ("snr_db_real", m.snr_db_real),
        ("snr_db_synthetic", m.snr_db_synthetic),
    ] {
        rows.push(MetricRow { group: group.into(), variant: variant.into(), metric: metric.into(), value });
    }
}

fn push_cv(rows: &mut Vec<MetricRow>, group: &str, variant: &str, cv: &CVResult) {
    for (metric, value) in [("acc", cv.acc), ("pre", cv.pre), ("sen", cv.sen), ("f1", cv.f1)] {
        rows.push(MetricRow { group: group.into(), variant: variant.into(), metric: metric.into(), value });
    }
}

fn push_scored(rows: &mut Vec<MetricRow>, group: &str, s: &Scored) {
    push_metrics(rows, group, &s.variant, &s.metrics);
    push_cv(rows, group, &s.variant, &s.classification);
}

fn read_results<T: for<'de> Deserialize<'de>>(dir: &Path, sources: &mut Vec<(String, Vec<u8>)>) -> Result<Option<T>> {
    let path = dir.join(RESULTS);
    if !path.is_file() {
        return Ok(None);
    }
    let bytes = fs::read(&path)?;
    let value = serde_json::from_slice(&bytes).map_err(|e| CatdError::CorruptContainer {
        array: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    sources.push((format!("{name}/{RESULTS}"), bytes));
    Ok(Some(value))
}

fn history(dir: &Path) -> Result<Option<Vec<f64>>> {
    if !dir.join(super::container::MANIFEST).is_file() {
        return Ok(None);
    }
    let c = load_container(dir)?;
    let h = c.get("loss_history")?.clone().into_dimensionality::<Ix1>().map_err(|e| CatdError::CorruptContainer {
        array: "loss_history".into(),
        reason: e.to_string(),
    })?;
    Ok(Some(h.to_vec()))
}

/// Reads whatever stage results exist under `layout`.
pub fn collect_report(layout: &Layout) -> Result<ReportData> {
    let mut data = ReportData::default();
    for (name, dir) in [
        ("vae", layout.vae()),
        ("diffusion", layout.diffusion(Conditioning::Cab)),
        ("diffusion-bypass", layout.diffusion(Conditioning::Bypass)),
    ] {
        if let Some(values) = history(&dir)? {
            data.curves.push(Curve { name: name.into(), values });
        }
    }
    let mut sources = Vec::new();
    if let Some(e) = read_results::<Evaluation>(&layout.evaluate(), &mut sources)? {
        push_cv(&mut data.rows, "evaluate", "real", &e.real_classification);
        for s in &e.variants {
            push_scored(&mut data.rows, "evaluate", s);
        }
    }
    if let Some(c) = read_results::<CabAblation>(&layout.cab_ablation(), &mut sources)? {
        push_scored(&mut data.rows, "cab-ablation", &c.bypass);
    }
    if let Some(b) = read_results::<BandAblation>(&layout.band_ablation(), &mut sources)? {
        for r in &b.rows {
            push_metrics(&mut data.rows, "band-ablation", r.band.as_str(), &r.metrics);
            push_cv(&mut data.rows, "band-ablation", r.band.as_str(), &r.classification);
        }
    }
    if let Some(s) = read_results::<Superres>(&layout.superres(), &mut sources)? {
        let row = |variant: &str, metric: &str, value: f64| MetricRow {
            group: "superres".into(),
            variant: variant.into(),
            metric: metric.into(),
            value,
        };
        data.rows.push(row("superres", "pearson", s.corr_superres));
        data.rows.push(row("nearest", "pearson", s.corr_nearest));
        data.rows.push(row("superres", "latent_group_residual", s.latent_group_residual));
        data.rows.push(row("superres", "output_frames", s.output_frames as f64));
        data.rows.push(row("superres", "lowres_frames", s.lowres_frames as f64));
        data.traces = s.traces;
        data.trace_tr_s = (s.lowres_tr_s, s.output_tr_s);
    }
    data.sources = sources;
    Ok(data)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Writes the report file set under `dir`. Plots from earlier runs are
/// removed so the file set depends only on `data`.
pub fn emit_report(data: &ReportData, provenance: &Provenance, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(
        &dir.join("metrics.json"),
        &MetricsJson { provenance, rows: &data.rows, curves: &data.curves, superres_traces: &data.traces },
    )?;

    let mut csv = String::new();
    writeln!(csv, "# command: {}", provenance.command).unwrap();
    writeln!(csv, "# input_hash: {}", provenance.input_hash).unwrap();
    writeln!(csv, "# config: {}", serde_json::to_string(&provenance.config)?).unwrap();
    csv.push_str("group,variant,metric,value\n");
    for r in &data.rows {
        writeln!(csv, "{},{},{},{}", csv_field(&r.group), csv_field(&r.variant), csv_field(&r.metric), r.value).unwrap();
    }
    fs::write(dir.join("metrics.csv"), csv)?;

    let plots = dir.join("plots");
    if plots.exists() {
        fs::remove_dir_all(&plots)?;
    }
    let mut files: Vec<(String, String)> = Vec::new();
    if !data.curves.is_empty() {
        files.push(("loss.svg".into(), loss_plot(&data.curves, provenance)));
    }
    let compared: Vec<&MetricRow> = data
        .rows
        .iter()
        .filter(|r| {
            matches!(r.group.as_str(), "evaluate" | "cab-ablation") && matches!(r.metric.as_str(), "cosine_similarity" | "ccc")
        })
        .collect();
    if !compared.is_empty() {
        files.push(("comparison.svg".into(), bar_plot("Generated vs real (test session)", &compared, provenance)));
    }
    let bands: Vec<&MetricRow> =
        data.rows.iter().filter(|r| r.group == "band-ablation" && matches!(r.metric.as_str(), "acc" | "ccc")).collect();
    if !bands.is_empty() {
        files.push(("bands.svg".into(), bar_plot("Condition band ablation", &bands, provenance)));
    }
    for t in &data.traces {
        files.push((format!("superres_r{}_c{}.svg", t.row, t.col), superres_plot(t, data.trace_tr_s, provenance)));
    }
    if !files.is_empty() {
        fs::create_dir_all(&plots)?;
        for (name, svg) in files {
            fs::write(plots.join(name), svg)?;
        }
    }
    Ok(())
}

const WIDTH: f64 = 640.0;
const PANEL_H: f64 = 200.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn svg_open(height: f64, title: &str, provenance: &Provenance) -> String {
    let meta = serde_json::json!({ "input_hash": provenance.input_hash, "config": provenance.config });
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(s, "<metadata>{}</metadata>", escape(&meta.to_string())).unwrap();
    writeln!(s, r#"<rect width="{WIDTH}" height="{height}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, WIDTH / 2.0, escape(title)).unwrap();
    s
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Plot frame: `(left, top, width, height)` in pixels.
type Frame = (f64, f64, f64, f64);

fn axes(s: &mut String, f: Frame, y: (f64, f64), label: &str) {
    let (l, t, w, h) = f;
    writeln!(s, r##"<rect x="{l:.2}" y="{t:.2}" width="{w:.2}" height="{h:.2}" fill="none" stroke="#444"/>"##).unwrap();
    writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, l - 4.0, t + 10.0, fmt_tick(y.1)).unwrap();
    writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, l - 4.0, t + h, fmt_tick(y.0)).unwrap();
    writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, l + 4.0, t + 12.0, escape(label)).unwrap();
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn polyline(s: &mut String, f: Frame, xs: &[f64], ys: &[f64], x: (f64, f64), y: (f64, f64), color: &str) {
    let (l, t, w, h) = f;
    let points: Vec<String> = xs
        .iter()
        .zip(ys)
        .map(|(&xv, &yv)| {
            let px = l + (xv - x.0) / (x.1 - x.0) * w;
            let py = t + h - (yv - y.0) / (y.1 - y.0) * h;
            format!("{px:.2},{py:.2}")
        })
        .collect();
    writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, points.join(" ")).unwrap();
}

fn loss_plot(curves: &[Curve], provenance: &Provenance) -> String {
    let height = 30.0 + PANEL_H * curves.len() as f64;
    let mut s = svg_open(height, "Training objective", provenance);
    for (i, c) in curves.iter().enumerate() {
        let f = (MARGIN + 20.0, 30.0 + PANEL_H * i as f64 + 8.0, WIDTH - MARGIN - 40.0, PANEL_H - 40.0);
        let smooth = moving_average(&c.values, (c.values.len() / 50).max(1));
        let y = range(smooth.iter().copied());
        let xs: Vec<f64> = (1..=smooth.len()).map(|k| k as f64).collect();
        axes(&mut s, f, y, &format!("{} ({} points, trailing mean)", c.name, c.values.len()));
        if !smooth.is_empty() {
            polyline(&mut s, f, &xs, &smooth, (1.0, (smooth.len() as f64).max(2.0)), y, PALETTE[i % PALETTE.len()]);
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Bars grouped by metric, one colour per variant.
fn bar_plot(title: &str, rows: &[&MetricRow], provenance: &Provenance) -> String {
    let mut metrics: Vec<&str> = Vec::new();
    let mut variants: Vec<String> = Vec::new();
    for r in rows {
        if !metrics.contains(&r.metric.as_str()) {
            metrics.push(&r.metric);
        }
        let v = format!("{}:{}", r.group, r.variant);
        if !variants.contains(&v) {
            variants.push(v);
        }
    }
    let height = 30.0 + PANEL_H * metrics.len() as f64 + 20.0;
    let mut s = svg_open(height, title, provenance);
    for (mi, metric) in metrics.iter().enumerate() {
        let f = (MARGIN + 20.0, 30.0 + PANEL_H * mi as f64 + 8.0, WIDTH - MARGIN - 40.0, PANEL_H - 48.0);
        let vals: Vec<(usize, f64)> = rows
            .iter()
            .filter(|r| r.metric == *metric)
            .map(|r| (variants.iter().position(|v| *v == format!("{}:{}", r.group, r.variant)).unwrap(), r.value))
            .collect();
        let (lo, hi) = range(vals.iter().map(|v| v.1).chain([0.0]));
        axes(&mut s, f, (lo, hi), metric);
        let (l, t, w, h) = f;
        let slot = w / variants.len() as f64;
        let zero = t + h - (0.0 - lo) / (hi - lo) * h;
        for &(vi, v) in &vals {
            let top = t + h - (v - lo) / (hi - lo) * h;
            let (y0, y1) = if top < zero { (top, zero) } else { (zero, top) };
            let x = l + slot * vi as f64 + slot * 0.15;
            writeln!(
                s,
                r#"<rect x="{x:.2}" y="{y0:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                slot * 0.7,
                (y1 - y0).max(0.5),
                PALETTE[vi % PALETTE.len()]
            )
            .unwrap();
            writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, x + slot * 0.35, y0 - 3.0, fmt_tick(v)).unwrap();
        }
        for (vi, name) in variants.iter().enumerate() {
            writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                l + slot * (vi as f64 + 0.5),
                t + h + 14.0,
                escape(name)
            )
            .unwrap();
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Low-rate points at group centres over the generated and true high-rate curves.
fn superres_plot(t: &CellTrace, (low_tr, high_tr): (f64, f64), provenance: &Provenance) -> String {
    let mut s = svg_open(PANEL_H + 60.0, &format!("Super-resolution, cell ({}, {})", t.row, t.col), provenance);
    let f = (MARGIN + 20.0, 38.0, WIDTH - MARGIN - 40.0, PANEL_H - 20.0);
    let y = range(t.lowres.iter().chain(&t.truth).chain(&t.generated).copied());
    let hx: Vec<f64> = (0..t.truth.len()).map(|j| j as f64 * high_tr).collect();
    let x = (0.0, hx.last().copied().unwrap_or(1.0).max(high_tr));
    axes(&mut s, f, y, "standardised BOLD vs time (s)");
    polyline(&mut s, f, &hx, &t.truth, x, y, "#999999");
    polyline(&mut s, f, &hx, &t.generated, x, y, PALETTE[0]);
    let (l, top, w, h) = f;
    for (g, &v) in t.lowres.iter().enumerate() {
        let xv = g as f64 * low_tr + (low_tr - high_tr) / 2.0;
        let px = l + (xv - x.0) / (x.1 - x.0) * w;
        let py = top + h - (v - y.0) / (y.1 - y.0) * h;
        writeln!(s, r#"<circle cx="{px:.2}" cy="{py:.2}" r="2.5" fill="{}"/>"#, PALETTE[1]).unwrap();
    }
    let ly = top + h + 16.0;
    writeln!(s, r##"<text x="{l:.2}" y="{ly:.2}" fill="#999999">truth</text>"##).unwrap();
    writeln!(s, r#"<text x="{:.2}" y="{ly:.2}" fill="{}">generated</text>"#, l + 60.0, PALETTE[0]).unwrap();
    writeln!(s, r#"<text x="{:.2}" y="{ly:.2}" fill="{}">low-rate input</text>"#, l + 140.0, PALETTE[1]).unwrap();
    s.push_str("</svg>\n");
    s
}
