use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{decode_checkpoint, read_bytes, sha256_bytes};

/// Identity of one evaluated checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportColumn {
    pub variant: String,
    pub model_tag: String,
    pub checkpoint_hash: String,
    pub tokens_seen: u64,
    pub dataset_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub metric: String,
    /// One value per column; `None` where the metric was not measured.
    pub values: Vec<Option<f64>>,
}

/// A metric-by-variant table. Holds no timings, so identical inputs render
/// byte-identical output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EvalReport {
    pub columns: Vec<ReportColumn>,
    pub rows: Vec<ReportRow>,
}

/// Scores of one checkpoint, keyed by metric name.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportEntry<'a> {
    pub checkpoint: &'a Path,
    /// Overrides the variant stored in the checkpoint.
    pub variant: Option<String>,
    pub model_tag: String,
    pub dataset_seed: u64,
    pub metrics: IndexMap<String, f64>,
}

impl EvalReport {
    /// Adds a column; metrics missing from earlier columns become `None`.
    pub fn push(&mut self, column: ReportColumn, metrics: &IndexMap<String, f64>) {
        let idx = self.columns.len();
        self.columns.push(column);
        for row in &mut self.rows {
            row.values.push(metrics.get(&row.metric).copied());
        }
        for (name, value) in metrics {
            if !self.rows.iter().any(|r| &r.metric == name) {
                let mut values = vec![None; idx + 1];
                values[idx] = Some(*value);
                self.rows.push(ReportRow {
                    metric: name.clone(),
                    values,
                });
            }
        }
    }

    pub fn value(&self, metric: &str, variant: &str) -> Option<f64> {
        let c = self.columns.iter().position(|c| c.variant == variant)?;
        let r = self.rows.iter().find(|r| r.metric == metric)?;
        r.values[c]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Fixed-width text table, one column per checkpoint.
    pub fn render_text(&self) -> String {
        let mut header: Vec<Vec<String>> = vec![
            vec!["variant".into()],
            vec!["model".into()],
            vec!["checkpoint".into()],
            vec!["tokens".into()],
            vec!["data seed".into()],
        ];
        for c in &self.columns {
            header[0].push(c.variant.clone());
            header[1].push(c.model_tag.clone());
            header[2].push(c.checkpoint_hash.chars().take(12).collect());
            header[3].push(c.tokens_seen.to_string());
            header[4].push(c.dataset_seed.to_string());
        }
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut line = vec![r.metric.clone()];
                line.extend(r.values.iter().map(|v| match v {
                    Some(x) => format!("{x:.4}"),
                    None => "-".into(),
                }));
                line
            })
            .collect();
        let n = self.columns.len() + 1;
        let mut widths = vec![0; n];
        for line in header.iter().chain(body.iter()) {
            for (w, cell) in widths.iter_mut().zip(line) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let mut out = String::new();
        let emit = |out: &mut String, line: &[String]| {
            let cells: Vec<String> = line
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    if i == 0 {
                        format!("{c:<w$}", w = widths[i])
                    } else {
                        format!("{c:>w$}", w = widths[i])
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        };
        for line in &header {
            emit(&mut out, line);
        }
        let total: usize = widths.iter().sum::<usize>() + 2 * (n - 1);
        let _ = writeln!(out, "{}", "-".repeat(total));
        for line in &body {
            emit(&mut out, line);
        }
        out
    }
}

/// Builds a report from evaluated checkpoints, reading variant and token
/// counts from each file. Fails if a checkpoint is missing or corrupt.
pub fn build_report(entries: &[ReportEntry<'_>]) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for e in entries {
        if !e.checkpoint.exists() {
            return Err(Error::Invalid(format!(
                "checkpoint {} not found",
                e.checkpoint.display()
            )));
        }
        let bytes = read_bytes(e.checkpoint)?;
        let (meta, _) = decode_checkpoint(&bytes)?;
        let variant = e
            .variant
            .clone()
            .or(meta.variant.clone())
            .or(meta.stage.clone())
            .unwrap_or_else(|| "model".into());
        report.push(
            ReportColumn {
                variant,
                model_tag: e.model_tag.clone(),
                checkpoint_hash: sha256_bytes(&bytes),
                tokens_seen: meta.tokens_seen,
                dataset_seed: e.dataset_seed,
            },
            &e.metrics,
        );
    }
    Ok(report)
}
