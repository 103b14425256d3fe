//! Report artifacts: metrics JSON, confusion CSV, hypnograms, comparison tables.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{mean_std, MetricsReport};
use crate::error::Result;
use crate::signal_io::StageLabel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub folds: Vec<FoldResult>,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub mf1_mean: f64,
    pub mf1_std: f64,
    pub per_class_f1_mean: [f64; StageLabel::COUNT],
    /// All folds' confusion matrices summed.
    pub pooled: MetricsReport,
}

impl MetricsSummary {
    pub fn new(folds: Vec<FoldResult>) -> Self {
        let acc: Vec<f64> = folds.iter().map(|f| f.report.acc).collect();
        let mf1: Vec<f64> = folds.iter().map(|f| f.report.mf1).collect();
        let (acc_mean, acc_std) = mean_std(&acc);
        let (mf1_mean, mf1_std) = mean_std(&mf1);
        let mut per_class_f1_mean = [0.0; StageLabel::COUNT];
        let mut confusion = [[0u64; StageLabel::COUNT]; StageLabel::COUNT];
        for f in &folds {
            for c in 0..StageLabel::COUNT {
                per_class_f1_mean[c] += f.report.per_class_f1[c] / folds.len().max(1) as f64;
                for p in 0..StageLabel::COUNT {
                    confusion[c][p] += f.report.confusion[c][p];
                }
            }
        }
        Self {
            folds,
            acc_mean,
            acc_std,
            mf1_mean,
            mf1_std,
            per_class_f1_mean,
            pooled: MetricsReport::from_confusion(confusion),
        }
    }
}

pub fn write_metrics_json(path: &Path, summary: &MetricsSummary) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, serde_json::to_string_pretty(summary)?)?;
    Ok(())
}

pub fn confusion_csv(confusion: &[[u64; StageLabel::COUNT]; StageLabel::COUNT]) -> String {
    let mut out = String::from("truth\\pred");
    for s in StageLabel::ALL {
        out.push(',');
        out.push_str(s.short());
    }
    out.push('\n');
    for (s, row) in StageLabel::ALL.iter().zip(confusion) {
        out.push_str(s.short());
        for v in row {
            write!(out, ",{v}").expect("string write");
        }
        out.push('\n');
    }
    out
}

pub fn write_confusion_csv(path: &Path, confusion: &[[u64; StageLabel::COUNT]; StageLabel::COUNT]) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, confusion_csv(confusion))?;
    Ok(())
}

/// Vertical order of the hypnogram, top to bottom.
pub const HYPNOGRAM_ORDER: [StageLabel; 5] =
    [StageLabel::Wake, StageLabel::Rem, StageLabel::N1, StageLabel::N2, StageLabel::N3];

fn level(s: StageLabel) -> usize {
    HYPNOGRAM_ORDER.iter().position(|&x| x == s).expect("stage")
}

pub fn hypnogram_csv(preds: &[StageLabel], truth: &[StageLabel]) -> String {
    let mut out = String::from("epoch_idx,truth,pred\n");
    for (i, (t, p)) in truth.iter().zip(preds).enumerate() {
        writeln!(out, "{i},{},{}", t.short(), p.short()).expect("string write");
    }
    out
}

/// Step plot of the predicted stages with the reference in grey and red
/// markers wherever the two disagree.
pub fn hypnogram_svg(preds: &[StageLabel], truth: &[StageLabel]) -> String {
    let (left, top, row_h, width) = (50.0, 20.0, 30.0, 900.0);
    let n = preds.len().max(1) as f64;
    let x = |i: usize| left + width * i as f64 / n;
    let y = |s: StageLabel| top + row_h * level(s) as f64;
    let height = top * 2.0 + row_h * 4.0 + 20.0;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"12\">\n",
        left + width + 20.0
    );
    for s in HYPNOGRAM_ORDER {
        writeln!(
            svg,
            "<text x=\"8\" y=\"{}\" class=\"stage\">{}</text>",
            y(s) + 4.0,
            s.short()
        )
        .expect("string write");
    }
    let path = |seq: &[StageLabel]| {
        let mut d = String::new();
        for (i, &s) in seq.iter().enumerate() {
            let cmd = if i == 0 { 'M' } else { 'L' };
            write!(d, "{cmd}{:.2},{:.2} H{:.2} ", x(i), y(s), x(i + 1)).expect("string write");
        }
        d
    };
    writeln!(
        svg,
        "<path class=\"truth\" d=\"{}\" fill=\"none\" stroke=\"#bbbbbb\" stroke-width=\"3\"/>",
        path(truth)
    )
    .expect("string write");
    writeln!(
        svg,
        "<path class=\"pred\" d=\"{}\" fill=\"none\" stroke=\"#1f4e99\" stroke-width=\"1.2\"/>",
        path(preds)
    )
    .expect("string write");
    for (i, (&p, &t)) in preds.iter().zip(truth).enumerate() {
        if p != t {
            writeln!(
                svg,
                "<circle class=\"error\" cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"#d62728\"/>",
                (x(i) + x(i + 1)) / 2.0,
                y(p)
            )
            .expect("string write");
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `<stem>.csv` and `<stem>.svg`; returns both paths.
pub fn export_hypnogram(preds: &[StageLabel], truth: &[StageLabel], stem: &Path) -> Result<(PathBuf, PathBuf)> {
    if preds.len() != truth.len() {
        return Err(crate::Error::Shape(format!("{} predictions for {} labels", preds.len(), truth.len())));
    }
    ensure_parent(stem)?;
    let csv = stem.with_extension("csv");
    let svg = stem.with_extension("svg");
    fs::write(&csv, hypnogram_csv(preds, truth))?;
    fs::write(&svg, hypnogram_svg(preds, truth))?;
    Ok((csv, svg))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table7Row {
    pub model: String,
    pub context_length: usize,
    pub acc: f64,
    pub mf1: f64,
}

/// One row per context length with an `acc`/`mf1` column pair per model,
/// models in order of first appearance. Missing cells are left empty.
pub fn table7_csv(rows: &[Table7Row]) -> String {
    let mut models: Vec<&str> = Vec::new();
    let mut lengths: Vec<usize> = Vec::new();
    for r in rows {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
        if !lengths.contains(&r.context_length) {
            lengths.push(r.context_length);
        }
    }
    lengths.sort_unstable();
    let mut out = String::from("context_length");
    for m in &models {
        let col = m.to_lowercase().replace('+', "_");
        write!(out, ",{col}_acc,{col}_mf1").expect("string write");
    }
    out.push('\n');
    for len in lengths {
        write!(out, "{len}").expect("string write");
        for m in &models {
            match rows.iter().find(|r| r.context_length == len && r.model == *m) {
                Some(r) => write!(out, ",{:.4},{:.4}", r.acc, r.mf1),
                None => write!(out, ",,"),
            }
            .expect("string write");
        }
        out.push('\n');
    }
    out
}

pub fn write_table7(path: &Path, rows: &[Table7Row]) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, table7_csv(rows))?;
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}
