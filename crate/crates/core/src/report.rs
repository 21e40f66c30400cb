//! Text tables, CSV and JSON renderings of experiment results, plus the
//! content fingerprint used to tie artifacts to configurations.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{FoldReport, FoldRun};

/// Hex SHA-256 of the canonical JSON form of `value` (object keys sorted).
pub fn fingerprint<T: Serialize>(value: &T) -> Result<String> {
    let canonical = serde_json::to_string(&serde_json::to_value(value)?)?;
    let digest = Sha256::digest(canonical.as_bytes());
    Ok(digest.iter().fold(String::with_capacity(64), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    }))
}

/// `89.36±6.14` from fractions `0.8936`, `0.0614`.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{:.2}±{:.2}", mean * 100.0, std * 100.0)
}

fn ratio_label(r: f64) -> String {
    format!("{}%", (r * 100.0).round())
}

/// One row per variant, one column per `(dataset, label ratio)`, cells
/// formatted as mean±std accuracy in percent.
pub fn render_table(reports: &[FoldReport]) -> String {
    let mut columns: Vec<(String, u64)> = Vec::new();
    let mut rows: Vec<String> = Vec::new();
    let mut cells: BTreeMap<(String, String, u64), String> = BTreeMap::new();
    for r in reports {
        let col = (r.dataset.clone(), r.label_ratio.to_bits());
        if !columns.contains(&col) {
            columns.push(col.clone());
        }
        let row = r.variant.name().to_string();
        if !rows.contains(&row) {
            rows.push(row.clone());
        }
        cells.insert((row, col.0, col.1), format_mean_std(r.mean, r.std));
    }
    let header: Vec<String> = std::iter::once("Variant".to_string())
        .chain(
            columns
                .iter()
                .map(|(d, bits)| format!("{d} {}", ratio_label(f64::from_bits(*bits)))),
        )
        .collect();
    let mut table: Vec<Vec<String>> = vec![header];
    for row in &rows {
        let mut line = vec![row.clone()];
        for (d, bits) in &columns {
            line.push(cells.get(&(row.clone(), d.clone(), *bits)).cloned().unwrap_or_else(|| "-".into()));
        }
        table.push(line);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, line) in table.iter().enumerate() {
        let padded: Vec<String> = line
            .iter()
            .zip(&widths)
            .map(|(cell, &w)| format!("{cell:<w$}"))
            .collect();
        writeln!(out, "{}", padded.join("  ").trim_end()).unwrap();
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            writeln!(out, "{}", rule.join("  ")).unwrap();
        }
    }
    out
}

/// One CSV row per fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub dataset: String,
    pub variant: String,
    pub label_ratio: f64,
    pub fold: usize,
    pub accuracy: f64,
    pub seed: u64,
    pub config_fingerprint: String,
}

impl FoldRecord {
    pub fn from_run(run: &FoldRun, config_fingerprint: &str) -> Self {
        Self {
            dataset: run.dataset.clone(),
            variant: run.variant.name().to_string(),
            label_ratio: run.label_ratio,
            fold: run.fold,
            accuracy: run.accuracy,
            seed: run.seed,
            config_fingerprint: config_fingerprint.to_string(),
        }
    }
}

pub fn to_csv(records: &[FoldRecord]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(["dataset", "variant", "label_ratio", "fold", "accuracy", "seed", "config_fingerprint"])?;
    for r in records {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Serialization(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Serialization(e.to_string()))
}

pub fn from_csv(text: &str) -> Result<Vec<FoldRecord>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)?)
}

pub fn from_json<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    Ok(serde_json::from_str(text)?)
}
