//! CSV and JSON emission.
//!
//! Every CSV has a fixed column order. Per-class columns carry a `_c{k}`
//! suffix. Numbers are written with 6 significant digits (`%.6g`); undefined
//! values are written as `NA`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::{TrainConfig, TrainLogRecord};

pub const NA: &str = "NA";

/// C `printf("%.6g")` formatting.
pub fn fmt_sig6(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let mantissa = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (5 - exp) as usize;
        strip_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| NA.into(), fmt_sig6)
}

fn per_class(prefix: &str, classes: usize) -> impl Iterator<Item = String> + '_ {
    (0..classes).map(move |k| format!("{prefix}_c{k}"))
}

pub fn metrics_header(classes: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "epoch",
        "loss_supervised",
        "loss_unlabeled",
        "loss_uncertainty",
        "loss_total",
        "top1",
        "top5",
        "macro_recall",
        "pseudo_precision",
        "pseudo_recall",
        "selected_total",
    ]
    .map(String::from)
    .into();
    h.extend(per_class("recall", classes));
    h.extend(per_class("selected", classes));
    h.extend(per_class("mean_uncertainty", classes));
    h
}

pub fn thresholds_header(classes: usize) -> Vec<String> {
    let mut h = vec!["epoch".to_string(), "global_tau".to_string()];
    h.extend(per_class("learning_state", classes));
    h.extend(per_class("uncertainty_state", classes));
    h.extend(per_class("class_tau", classes));
    h.extend(per_class("class_unc_norm", classes));
    h
}

pub fn selection_header(classes: usize) -> Vec<String> {
    let mut h = vec!["epoch".to_string()];
    h.extend(per_class("selected", classes));
    h.extend(per_class("precision", classes));
    h.extend(per_class("selected_uncertainty", classes));
    h.extend(["failed_confidence", "failed_uncertainty", "failed_both", "ranked_out"].map(String::from));
    h
}

fn metrics_row(r: &TrainLogRecord, classes: usize) -> Vec<String> {
    let mut row = vec![
        r.epoch.to_string(),
        fmt_sig6(r.loss_supervised),
        opt(r.loss_unlabeled),
        opt(r.loss_uncertainty),
        fmt_sig6(r.loss_total),
        fmt_sig6(r.top1),
        fmt_sig6(r.top5),
        opt(r.macro_recall),
        opt(r.pseudo_precision),
        opt(r.pseudo_recall),
        r.selected_total.map_or_else(|| NA.into(), |n| n.to_string()),
    ];
    row.extend(r.per_class_recall.iter().map(|&x| opt(x)));
    row.extend(counts_or_na(r.selected_per_class.as_deref(), classes));
    row.extend(r.mean_uncertainty_per_class.iter().map(|&x| opt(x)));
    row
}

fn counts_or_na(counts: Option<&[usize]>, classes: usize) -> Vec<String> {
    match counts {
        Some(c) => c.iter().map(usize::to_string).collect(),
        None => vec![NA.into(); classes],
    }
}

fn thresholds_row(r: &TrainLogRecord) -> Vec<String> {
    let mut row = vec![r.epoch.to_string(), fmt_sig6(r.global_tau)];
    for v in [&r.learning_state, &r.uncertainty_state, &r.class_tau, &r.class_unc_norm] {
        row.extend(v.iter().map(|&x| fmt_sig6(x)));
    }
    row
}

fn selection_row(r: &TrainLogRecord, classes: usize) -> Vec<String> {
    let mut row = vec![r.epoch.to_string()];
    row.extend(counts_or_na(r.selected_per_class.as_deref(), classes));
    row.extend(r.pseudo_precision_per_class.iter().map(|&x| opt(x)));
    row.extend(r.selected_mean_uncertainty.iter().map(|&x| opt(x)));
    match &r.rejections {
        Some(rej) => row.extend(
            [rej.failed_confidence, rej.failed_uncertainty, rej.failed_both, rej.ranked_out].map(|n| n.to_string()),
        ),
        None => row.extend(std::iter::repeat_n(NA.to_string(), 4)),
    }
    row
}

fn render(header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<String> {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        if row.len() != header.len() {
            return Err(Error::Shape(format!("row has {} fields, header {}", row.len(), header.len())));
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}

fn classes_of(records: &[TrainLogRecord]) -> Result<usize> {
    let first = records.first().ok_or_else(|| Error::State("no records to report".into()))?;
    Ok(first.class_tau.len())
}

pub fn render_metrics_csv(records: &[TrainLogRecord]) -> Result<String> {
    let c = classes_of(records)?;
    render(&metrics_header(c), records.iter().map(|r| metrics_row(r, c)))
}

pub fn render_thresholds_csv(records: &[TrainLogRecord]) -> Result<String> {
    let c = classes_of(records)?;
    render(&thresholds_header(c), records.iter().map(thresholds_row))
}

pub fn render_selection_csv(records: &[TrainLogRecord]) -> Result<String> {
    let c = classes_of(records)?;
    render(&selection_header(c), records.iter().map(|r| selection_row(r, c)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: String,
    pub seed: u64,
    pub epochs_completed: usize,
    pub final_metrics: TrainLogRecord,
    pub best_top1: f64,
    pub best_top1_epoch: usize,
    pub config: TrainConfig,
}

impl Summary {
    pub fn new(config: &TrainConfig, records: &[TrainLogRecord]) -> Result<Self> {
        let last = records.last().ok_or_else(|| Error::State("no records to summarise".into()))?;
        let best = records
            .iter()
            .fold(last, |b, r| if r.top1 > b.top1 || (r.top1 == b.top1 && r.epoch < b.epoch) { r } else { b });
        Ok(Self {
            mode: config.mode.to_string(),
            seed: config.seed,
            epochs_completed: records.len(),
            final_metrics: last.clone(),
            best_top1: best.top1,
            best_top1_epoch: best.epoch,
            config: config.clone(),
        })
    }
}

pub fn render_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::State(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Write metrics.csv, thresholds.csv, selection.csv and summary.json into `dir`.
pub fn emit_report(dir: &Path, config: &TrainConfig, records: &[TrainLogRecord]) -> Result<()> {
    let files = [
        ("metrics.csv", render_metrics_csv(records)?),
        ("thresholds.csv", render_thresholds_csv(records)?),
        ("selection.csv", render_selection_csv(records)?),
        ("summary.json", render_json(&Summary::new(config, records)?)?),
    ];
    fs::create_dir_all(dir)?;
    for (name, body) in files {
        fs::write(dir.join(name), body)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub passes: usize,
    pub top1: f64,
    pub mc_std_error: Option<f64>,
    pub wall_time_s: f64,
}

pub const SWEEP_HEADER: [&str; 4] = ["T", "top1", "mc_std_error", "wall_time"];

pub fn render_sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let header = SWEEP_HEADER.map(String::from);
    render(
        &header,
        rows.iter().map(|r| {
            vec![r.passes.to_string(), fmt_sig6(r.top1), opt(r.mc_std_error), fmt_sig6(r.wall_time_s)]
        }),
    )
}

/// Human-readable one-line-per-metric rendering used by `eval`.
pub fn render_eval_text(top1: f64, top5: f64, recall: &[Option<f64>], macro_recall: Option<f64>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "top1 {}", fmt_sig6(top1));
    let _ = writeln!(s, "top5 {}", fmt_sig6(top5));
    let _ = writeln!(s, "macro_recall {}", opt(macro_recall));
    for (k, r) in recall.iter().enumerate() {
        let _ = writeln!(s, "recall_c{k} {}", opt(*r));
    }
    s
}
