//! Plain-text accuracy tables and CSV output.

use std::fmt::Write as _;
use std::path::Path;

use super::metrics::MetricsReport;
use super::EpochRecord;
use crate::error::Result;

/// Land-cover classes of the Houston 2013 scene, in label order.
pub const HOUSTON_CLASSES: [&str; 15] = [
    "Healthy grass",
    "Stressed grass",
    "Synthetic grass",
    "Trees",
    "Soil",
    "Water",
    "Residential",
    "Commercial",
    "Road",
    "Highway",
    "Railway",
    "Parking Lot 1",
    "Parking Lot 2",
    "Tennis Court",
    "Running Track",
];

/// One method column of an accuracy table, all values in percent.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportColumn {
    pub method: String,
    pub per_class: Vec<f64>,
    pub oa: f64,
    pub aa: Option<f64>,
    pub kappa: Option<f64>,
}

impl ReportColumn {
    pub fn from_report(method: impl Into<String>, r: &MetricsReport) -> Self {
        ReportColumn {
            method: method.into(),
            per_class: r.per_class.clone(),
            oa: r.oa,
            aa: Some(r.aa),
            kappa: Some(r.kappa),
        }
    }
}

/// Class names for a `k`-class scene: the Houston names when `k == 15`,
/// `Class i` otherwise.
pub fn class_names(k: usize) -> Vec<String> {
    if k == HOUSTON_CLASSES.len() {
        HOUSTON_CLASSES.iter().map(|s| s.to_string()).collect()
    } else {
        (1..=k).map(|i| format!("Class {i}")).collect()
    }
}

fn cell(v: f64) -> String {
    if v.is_nan() {
        "-".into()
    } else {
        format!("{v:.2}")
    }
}

/// Per-class rows, a rule, then OA (and AA / Kappa when any column has
/// them). Kappa is printed as a fraction with four decimals.
pub fn render_table(classes: &[String], columns: &[ReportColumn]) -> String {
    let mut rows: Vec<(String, Vec<String>)> = Vec::new();
    for (i, name) in classes.iter().enumerate() {
        let cells = columns
            .iter()
            .map(|c| c.per_class.get(i).map_or("-".into(), |&v| cell(v)))
            .collect();
        rows.push((name.clone(), cells));
    }
    let body = rows.len();
    rows.push(("OA".into(), columns.iter().map(|c| cell(c.oa)).collect()));
    if columns.iter().any(|c| c.aa.is_some()) {
        rows.push(("AA".into(), columns.iter().map(|c| c.aa.map_or("-".into(), cell)).collect()));
    }
    if columns.iter().any(|c| c.kappa.is_some()) {
        rows.push((
            "Kappa".into(),
            columns
                .iter()
                .map(|c| c.kappa.map_or("-".into(), |k| format!("{k:.4}")))
                .collect(),
        ));
    }

    let first = rows.iter().map(|r| r.0.len()).chain([5]).max().unwrap_or(5);
    let widths: Vec<usize> = columns
        .iter()
        .enumerate()
        .map(|(j, c)| rows.iter().map(|r| r.1[j].len()).chain([c.method.len()]).max().unwrap_or(0))
        .collect();
    let rule_len = first + widths.iter().map(|w| w + 2).sum::<usize>();

    let mut out = String::new();
    let _ = write!(out, "{:<first$}", "Class");
    for (c, w) in columns.iter().zip(&widths) {
        let _ = write!(out, "  {:>w$}", c.method);
    }
    out.push('\n');
    out.push_str(&"=".repeat(rule_len));
    out.push('\n');
    for (i, (name, cells)) in rows.iter().enumerate() {
        if i == body {
            out.push_str(&"=".repeat(rule_len));
            out.push('\n');
        }
        let _ = write!(out, "{name:<first$}");
        for (v, w) in cells.iter().zip(&widths) {
            let _ = write!(out, "  {v:>w$}");
        }
        out.push('\n');
    }
    out
}

/// `epoch,loss,train_accuracy` per epoch.
pub fn write_loss_csv(path: impl AsRef<Path>, trace: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "loss", "train_accuracy"])?;
    for r in trace {
        w.write_record([r.epoch.to_string(), format!("{:e}", r.loss), format!("{}", r.accuracy)])?;
    }
    w.flush()?;
    Ok(())
}

/// `class,name,support,correct,accuracy` per class, then OA, AA and kappa rows.
pub fn write_metrics_csv(path: impl AsRef<Path>, report: &MetricsReport, names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["class", "name", "support", "correct", "accuracy"])?;
    let support = report.support();
    for (i, acc) in report.per_class.iter().enumerate() {
        let name = names.get(i).cloned().unwrap_or_default();
        w.write_record([
            (i + 1).to_string(),
            name,
            support[i].to_string(),
            report.confusion[i][i].to_string(),
            acc.to_string(),
        ])?;
    }
    let total = report.total().to_string();
    let correct: u64 = (0..report.classes()).map(|i| report.confusion[i][i]).sum();
    w.write_record(["OA", "", &total, &correct.to_string(), &report.oa.to_string()])?;
    w.write_record(["AA", "", &total, "", &report.aa.to_string()])?;
    w.write_record(["kappa", "", &total, "", &report.kappa.to_string()])?;
    w.flush()?;
    Ok(())
}
