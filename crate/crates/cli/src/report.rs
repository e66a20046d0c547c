//! Folds evaluation manifests of one or more run directories into tables.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifacts::{ensure_dir, Manifest, MANIFEST};
use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub variant: String,
    pub method: String,
    pub bits: String,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub method: String,
    pub bits: String,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; empty for a single seed.
    pub std: Option<f64>,
    pub min: f64,
    pub max: f64,
}

fn row_from(m: &Manifest, path: &Path) -> Result<RunRow> {
    let bad = |field: &str| CliError::Report(format!("{}: eval manifest lacks `{field}`", path.display()));
    let s = |field: &str| -> Result<String> {
        m.metrics
            .get(field)
            .and_then(|v| v.as_str())
            .map(String::from)
            .ok_or_else(|| bad(field))
    };
    Ok(RunRow {
        variant: s("variant")?,
        method: s("method")?,
        bits: s("bits")?,
        seed: m.metrics.get("seed").and_then(|v| v.as_u64()).ok_or_else(|| bad("seed"))?,
        accuracy: m.metrics.get("accuracy").and_then(|v| v.as_f64()).ok_or_else(|| bad("accuracy"))?,
    })
}

/// Every evaluation row under `dirs`, sorted.
pub fn collect_rows(dirs: &[PathBuf]) -> Result<Vec<RunRow>> {
    let mut rows = Vec::new();
    for d in dirs {
        let eval = d.join("eval");
        let entries = std::fs::read_dir(&eval).map_err(|e| CliError::io(&eval, e))?;
        let mut subdirs: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(MANIFEST).exists())
            .collect();
        subdirs.sort();
        for s in subdirs {
            let m = Manifest::read(&s)?;
            if m.stage != "eval" {
                return Err(CliError::Report(format!("{}: stage `{}` is not eval", s.display(), m.stage)));
            }
            rows.push(row_from(&m, &s)?);
        }
    }
    if rows.is_empty() {
        return Err(CliError::Report("no completed evaluations found".into()));
    }
    rows.sort_by(|a, b| {
        (&a.variant, &a.method, &a.bits, a.seed).cmp(&(&b.variant, &b.method, &b.bits, b.seed))
    });
    rows.dedup();
    Ok(rows)
}

/// Mean and spread over seeds per (variant, method, bits).
pub fn summarize(rows: &[RunRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.variant.clone(), r.method.clone(), r.bits.clone()))
            .or_default()
            .push(r.accuracy);
    }
    groups
        .into_iter()
        .map(|((variant, method, bits), v)| {
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let std = (n > 1).then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
            SummaryRow {
                variant,
                method,
                bits,
                n,
                mean,
                std,
                min: v.iter().copied().fold(f64::INFINITY, f64::min),
                max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect()
}

/// Method × bit-width accuracy table in percent, one block per variant.
pub fn pivot(summary: &[SummaryRow]) -> (Vec<String>, Vec<Vec<String>>) {
    let mut bits: Vec<String> = summary.iter().map(|s| s.bits.clone()).collect();
    bits.sort();
    bits.dedup();
    let mut header = vec!["variant".to_string(), "method".to_string()];
    header.extend(bits.iter().cloned());
    let mut rows: BTreeMap<(String, String), Vec<String>> = BTreeMap::new();
    for s in summary {
        let r = rows
            .entry((s.variant.clone(), s.method.clone()))
            .or_insert_with(|| vec![String::new(); bits.len()]);
        let col = bits.iter().position(|b| *b == s.bits).unwrap();
        r[col] = match s.std {
            Some(sd) => format!("{:.2}±{:.2}", 100.0 * s.mean, 100.0 * sd),
            None => format!("{:.2}", 100.0 * s.mean),
        };
    }
    let body = rows
        .into_iter()
        .map(|((v, m), cells)| [vec![v, m], cells].concat())
        .collect();
    (header, body)
}

pub fn cmd_report(dirs: &[PathBuf], output: Option<&Path>) -> Result<()> {
    if dirs.is_empty() {
        return Err(CliError::Report("pass at least one run directory".into()));
    }
    let rows = collect_rows(dirs)?;
    let summary = summarize(&rows);
    let out = ensure_dir(output.unwrap_or(&dirs[0]))?;

    let mut w = csv::Writer::from_path(out.join("runs.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::io(out.join("runs.csv"), e))?;

    let mut w = csv::Writer::from_path(out.join("summary.csv"))?;
    for s in &summary {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| CliError::io(out.join("summary.csv"), e))?;

    let (header, body) = pivot(&summary);
    let mut w = csv::Writer::from_path(out.join("table.csv"))?;
    w.write_record(&header)?;
    for r in &body {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| CliError::io(out.join("table.csv"), e))?;
    for s in &summary {
        println!(
            "{:<4} {:<16} {:<6} n={} mean={:.4} std={}",
            s.variant,
            s.method,
            s.bits,
            s.n,
            s.mean,
            s.std.map_or("-".into(), |v| format!("{v:.4}"))
        );
    }
    Ok(())
}
