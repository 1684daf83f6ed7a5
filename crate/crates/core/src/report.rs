//! Table writers: correlation CSVs, the fusion table and a readable summary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::fusion::{self, FusionRow};
use crate::io::write_atomic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub uoa: String,
    pub model: String,
    pub strategy: String,
    pub gold_kind: String,
    pub n: usize,
    pub rho: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub model: String,
    pub strategy: String,
    pub gold_kind: String,
    pub units: usize,
    pub mean_rho: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragingRow {
    pub uoa: String,
    pub model: String,
    pub strategy: String,
    pub gold_kind: String,
    pub rho_single: f64,
    pub rho_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignTestRow {
    pub comparison: String,
    pub gold_kind: String,
    pub k: u64,
    pub n: u64,
    pub p_value: f64,
}

fn to_csv<T: Serialize>(rows: &[T], header: &[&str]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

pub fn correlation_csv(rows: &[CorrelationRow]) -> String {
    let rounded: Vec<CorrelationRow> = rows
        .iter()
        .map(|r| CorrelationRow {
            rho: round6(r.rho),
            ci_low: round6(r.ci_low),
            ci_high: round6(r.ci_high),
            ..r.clone()
        })
        .collect();
    to_csv(&rounded, &["uoa", "model", "strategy", "gold_kind", "n", "rho", "ci_low", "ci_high"])
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let rounded: Vec<AggregateRow> = rows
        .iter()
        .map(|r| AggregateRow {
            mean_rho: round6(r.mean_rho),
            ci_low: round6(r.ci_low),
            ci_high: round6(r.ci_high),
            ..r.clone()
        })
        .collect();
    to_csv(&rounded, &["model", "strategy", "gold_kind", "units", "mean_rho", "ci_low", "ci_high"])
}

pub fn averaging_csv(rows: &[AveragingRow]) -> String {
    let rounded: Vec<AveragingRow> = rows
        .iter()
        .map(|r| AveragingRow {
            rho_single: round6(r.rho_single),
            rho_mean: round6(r.rho_mean),
            ..r.clone()
        })
        .collect();
    to_csv(&rounded, &["uoa", "model", "strategy", "gold_kind", "rho_single", "rho_mean"])
}

pub fn sign_test_csv(rows: &[SignTestRow]) -> String {
    to_csv(rows, &["comparison", "gold_kind", "k", "n", "p_value"])
}

/// Formats values to three decimals, bolding every entry equal to the
/// row maximum at that precision.
pub fn mark_max(values: &[f64]) -> Vec<String> {
    let shown: Vec<String> = values.iter().map(|v| format!("{v:.3}")).collect();
    let best = values.iter().map(|v| (v * 1000.0).round() as i64).max();
    values
        .iter()
        .zip(shown)
        .map(|(v, s)| {
            if Some((v * 1000.0).round() as i64) == best {
                format!("**{s}**")
            } else {
                s
            }
        })
        .collect()
}

/// Markdown fusion table with the row maximum in bold.
pub fn fusion_summary(title: &str, rows: &[FusionRow]) -> String {
    let mut out = format!("## {title}\n\n{}.\n\n", fusion::ALL_ROW_NOTE);
    out.push_str("| UoA | Mean fusion | Median fusion | Best single | Rank average | Weighted (CV) | Best column |\n");
    out.push_str("|---|---|---|---|---|---|---|\n");
    for r in rows {
        let cells = mark_max(&[r.mean, r.median, r.best_single, r.rank_average, r.cv_mean]);
        let _ = writeln!(out, "| {} | {} | {} |", r.uoa, cells.join(" | "), r.best_column);
    }
    out
}

/// Everything the analysis and fusion stages tabulate.
#[derive(Debug, Clone, Default)]
pub struct Tables {
    pub correlations: Vec<CorrelationRow>,
    pub aggregates: Vec<AggregateRow>,
    pub averaging: Vec<AveragingRow>,
    pub sign_tests: Vec<SignTestRow>,
    /// `(gold kind, rows)`, per-unit rows first and the pooled row last.
    pub fusion: Vec<(String, Vec<FusionRow>)>,
}

/// Writes the non-empty tables under `dir` and returns the paths written.
pub fn emit_tables(dir: &Path, t: &Tables) -> std::io::Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut put = |name: &str, body: String| -> std::io::Result<()> {
        let p = dir.join(name);
        write_atomic(&p, body.as_bytes())?;
        written.push(p);
        Ok(())
    };
    if !t.correlations.is_empty() {
        put("correlations.csv", correlation_csv(&t.correlations))?;
    }
    if !t.aggregates.is_empty() {
        put("unit_aggregates.csv", aggregate_csv(&t.aggregates))?;
    }
    if !t.averaging.is_empty() {
        put("averaging.csv", averaging_csv(&t.averaging))?;
    }
    if !t.sign_tests.is_empty() {
        put("sign_tests.csv", sign_test_csv(&t.sign_tests))?;
    }
    if !t.fusion.is_empty() {
        let mut summary = String::from("# Fusion summary\n");
        for (kind, rows) in &t.fusion {
            put(&format!("fusion_{kind}.csv"), fusion::fusion_csv(rows))?;
            put(&format!("fusion_{kind}_weights.json"), fusion::weights_json(rows))?;
            summary.push('\n');
            summary.push_str(&fusion_summary(&format!("Gold: {kind}"), rows));
        }
        put("summary.md", summary)?;
    }
    Ok(written)
}
