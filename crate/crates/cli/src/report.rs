//! Comparison tables: delimiter-separated values for machines and aligned
//! text for people. Missing values print as "—", like a baseline row.

use std::path::Path;

use crate::error::{CliError, Result};
use crate::pipeline::RunSummary;

pub const DASH: &str = "—";

/// Column headers and string cells.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(headers: &[&str]) -> Self {
        Self { headers: headers.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record(r).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Usage(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv of utf-8 cells"))
    }

    /// First column left-aligned, the rest right-aligned.
    pub fn to_text(&self) -> String {
        let width = |s: &str| s.chars().count();
        let mut widths: Vec<usize> = self.headers.iter().map(|h| width(h)).collect();
        for r in &self.rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(width(c));
            }
        }
        let line = |cells: &[String]| {
            let parts: Vec<String> = cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, &w))| {
                    let pad = " ".repeat(w - width(c));
                    if i == 0 {
                        format!("{c}{pad}")
                    } else {
                        format!("{pad}{c}")
                    }
                })
                .collect();
            parts.join("  ").trim_end().to_string()
        };
        let mut out = line(&self.headers);
        out.push('\n');
        out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1)));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }

    /// Writes `<stem>.csv` and `<stem>.txt` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        for (ext, text) in [("csv", self.to_csv()?), ("txt", self.to_text())] {
            let p = dir.join(format!("{stem}.{ext}"));
            std::fs::write(&p, text).map_err(|e| CliError::io(&p, e))?;
        }
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Usage(format!("csv: {e}"))
}

/// One comparison row; accuracies in percent.
#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub model: String,
    pub dataset: String,
    pub method: String,
    pub params: u64,
    pub params_pruned_pct: Option<f64>,
    pub flops: u64,
    pub flops_pruned_pct: Option<f64>,
    pub acc: f64,
    pub delta_acc: Option<f64>,
}

pub fn method_label(scorer: &str) -> String {
    match scorer {
        "l1" => "L1-norm".into(),
        "slimming" => "Slimming".into(),
        "cpse" => "CPSE".into(),
        "cpsca" => "CPSCA".into(),
        other => other.into(),
    }
}

fn pct_removed(before: u64, after: u64) -> f64 {
    100.0 * (before as f64 - after as f64) / before as f64
}

/// Rows in input order. The first baseline-only run of each model/dataset
/// pair is the reference for ΔAcc; pruned runs without one fall back to
/// their own trained accuracy.
pub fn rows(summaries: &[RunSummary]) -> Vec<Row> {
    let reference =
        |s: &RunSummary| summaries.iter().find(|b| b.pruned.is_none() && b.arch == s.arch && b.dataset == s.dataset);
    summaries
        .iter()
        .map(|s| {
            let base = reference(s);
            match (&s.pruned, &s.scorer) {
                (Some(p), Some(scorer)) => {
                    let base_acc = base.map_or(s.trained.accuracy, |b| b.trained.accuracy) * 100.0;
                    let acc = p.accuracy * 100.0;
                    Row {
                        model: s.arch.clone(),
                        dataset: s.dataset.clone(),
                        method: method_label(scorer),
                        params: p.params,
                        params_pruned_pct: Some(pct_removed(s.backbone_params, p.params)),
                        flops: p.flops,
                        flops_pruned_pct: Some(pct_removed(s.backbone_flops, p.flops)),
                        acc,
                        delta_acc: Some(acc - base_acc),
                    }
                }
                _ => {
                    let is_reference = base.is_some_and(|b| std::ptr::eq(b, s));
                    let acc = s.trained.accuracy * 100.0;
                    let method = match s.attention.as_str() {
                        "none" => "baseline".to_string(),
                        a => format!("baseline + {}", a.to_uppercase()),
                    };
                    Row {
                        model: s.arch.clone(),
                        dataset: s.dataset.clone(),
                        method,
                        params: s.trained.params,
                        params_pruned_pct: None,
                        flops: s.trained.flops,
                        flops_pruned_pct: None,
                        acc,
                        delta_acc: if is_reference { None } else { base.map(|b| acc - b.trained.accuracy * 100.0) },
                    }
                }
            }
        })
        .collect()
}

const COLUMNS: [&str; 9] = ["Model", "Dataset", "Method", "Params", "Pruned", "GFLOPs", "Pruned", "Acc(%)", "ΔAcc"];

fn opt(v: Option<f64>, f: impl Fn(f64) -> String) -> String {
    v.map_or_else(|| DASH.to_string(), f)
}

/// Full-precision values; ΔAcc parses back to exactly `Acc - baseline Acc`.
pub fn machine_table(rows: &[Row]) -> Table {
    let mut t = Table::new(&COLUMNS);
    for r in rows {
        t.rows.push(vec![
            r.model.clone(),
            r.dataset.clone(),
            r.method.clone(),
            r.params.to_string(),
            opt(r.params_pruned_pct, |v| v.to_string()),
            (r.flops as f64 / 1e9).to_string(),
            opt(r.flops_pruned_pct, |v| v.to_string()),
            r.acc.to_string(),
            opt(r.delta_acc, |v| v.to_string()),
        ]);
    }
    t
}

/// Rounded like a results table: `16.87M`, `32.25%`, `0.63163`, `↑0.21`.
pub fn human_table(rows: &[Row]) -> Table {
    let mut t = Table::new(&COLUMNS);
    for r in rows {
        t.rows.push(vec![
            r.model.clone(),
            r.dataset.clone(),
            r.method.clone(),
            format!("{:.2}M", r.params as f64 / 1e6),
            opt(r.params_pruned_pct, |v| format!("{v:.2}%")),
            format!("{:.5}", r.flops as f64 / 1e9),
            opt(r.flops_pruned_pct, |v| format!("{v:.2}%")),
            format!("{:.2}", r.acc),
            opt(r.delta_acc, |v| if v >= 0.0 { format!("↑{v:.2}") } else { format!("↓{:.2}", -v) }),
        ]);
    }
    t
}

/// Writes `report.csv` (full precision) and `report.txt` (rounded, aligned).
pub fn write_report(dir: &Path, rows: &[Row]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let csv_path = dir.join("report.csv");
    std::fs::write(&csv_path, machine_table(rows).to_csv()?).map_err(|e| CliError::io(&csv_path, e))?;
    let txt_path = dir.join("report.txt");
    std::fs::write(&txt_path, human_table(rows).to_text()).map_err(|e| CliError::io(&txt_path, e))
}
