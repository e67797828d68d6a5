//! Summary tables rendered from run records. Every function here is a pure
//! function of the records it is given.

use std::fmt::Write as _;

use super::RunRecord;
use crate::error::{Error, Result};
use crate::heads::{HeadKind, ModelSpec};
use crate::metrics::{summarize, EvalReport, Metric};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub title: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(title: &str, header: &[&str]) -> Self {
        Self {
            title: title.to_string(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    /// File-name form of the title.
    pub fn slug(&self) -> String {
        self.title
            .to_lowercase()
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c } else { '-' })
            .collect::<String>()
            .split('-')
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join("-")
    }

    pub fn to_csv(&self) -> String {
        let quote = |s: &String| {
            if s.contains([',', '"']) {
                format!("\"{}\"", s.replace('"', "\"\""))
            } else {
                s.clone()
            }
        };
        let mut out = String::new();
        for row in std::iter::once(&self.header).chain(&self.rows) {
            let cells: Vec<String> = row.iter().map(quote).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// Left-aligned columns separated by two spaces, under a title line.
    pub fn to_text(&self) -> String {
        let mut widths: Vec<usize> = self.header.iter().map(|h| h.chars().count()).collect();
        for row in &self.rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let mut out = format!("{}\n", self.title);
        for row in std::iter::once(&self.header).chain(&self.rows) {
            let cells: Vec<String> = row.iter().zip(&widths).map(|(c, &w)| format!("{c:<w$}")).collect();
            writeln!(out, "{}", cells.join("  ").trim_end()).expect("write to string");
        }
        out
    }
}

const NA: &str = "n/a";

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    match values.len() {
        0 => (None, None),
        1 => (Some(values[0]), None),
        _ => {
            let s = summarize("x", &vec![0; values.len()], values).expect("two or more values");
            (Some(s.mean), Some(s.std))
        }
    }
}

fn num(v: Option<f64>) -> String {
    v.map_or_else(|| NA.to_string(), |v| format!("{v:.4}"))
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// "mean (lo-hi)" over seeds: seed means of the point estimate and of the
/// bootstrap bounds.
fn ci_cell(reports: &[&EvalReport], metric: Metric) -> String {
    let pick = |f: fn(&crate::metrics::MetricEstimate) -> f64| -> Vec<f64> {
        reports.iter().filter_map(|r| r.get(metric).map(f)).collect()
    };
    match (mean(&pick(|m| m.point)), mean(&pick(|m| m.ci_lower)), mean(&pick(|m| m.ci_upper))) {
        (Some(p), Some(lo), Some(hi)) => format!("{p:.4} ({lo:.4}-{hi:.4})"),
        _ => NA.to_string(),
    }
}

/// Distinct values in order of first appearance.
fn ordered<'a>(items: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut out: Vec<&str> = Vec::new();
    for i in items {
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

fn reports<'a>(records: &[&'a RunRecord], test_set: &str) -> Vec<&'a EvalReport> {
    records.iter().filter_map(|r| r.report_for(test_set)).collect()
}

fn points(reports: &[&EvalReport], metric: Metric) -> Vec<f64> {
    reports.iter().filter_map(|r| r.point(metric)).collect()
}

/// Methods ranked by seed-mean balanced accuracy on the `test` split.
pub fn benchmark_table(records: &[RunRecord]) -> Table {
    let mut t = Table::new(
        "Benchmark summary",
        &["rank", "method", "runs", "bal_acc", "bal_acc_std", "roc_auc", "weighted_f1"],
    );
    let mut rows: Vec<(Option<f64>, Vec<String>)> = Vec::new();
    for method in ordered(records.iter().map(|r| r.method.as_str())) {
        let runs: Vec<&RunRecord> = records.iter().filter(|r| r.method == method).collect();
        let reps = reports(&runs, "test");
        let (m, sd) = mean_std(&points(&reps, Metric::BalancedAccuracy));
        rows.push((
            m,
            vec![
                String::new(),
                method.to_string(),
                format!("{}/{}", reps.len(), runs.len()),
                ci_cell(&reps, Metric::BalancedAccuracy),
                num(sd),
                ci_cell(&reps, Metric::RocAuc),
                ci_cell(&reps, Metric::WeightedF1),
            ],
        ));
    }
    // Stable sort keeps first-appearance order among ties; gaps go last.
    rows.sort_by(|a, b| match (a.0, b.0) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    for (i, (m, mut row)) in rows.into_iter().enumerate() {
        row[0] = if m.is_some() { (i + 1).to_string() } else { NA.to_string() };
        t.rows.push(row);
    }
    t
}

/// Balanced accuracy per method and seed, for paired comparisons.
pub fn per_seed_table(records: &[RunRecord]) -> Table {
    let mut seeds: Vec<u64> = records.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let seed_headers: Vec<String> = seeds.iter().map(|s| format!("seed{s}")).collect();
    let mut header = vec!["method"];
    header.extend(seed_headers.iter().map(String::as_str));
    let mut t = Table::new("Balanced accuracy per seed", &header);
    for method in ordered(records.iter().map(|r| r.method.as_str())) {
        let mut row = vec![method.to_string()];
        for &s in &seeds {
            let v = records
                .iter()
                .find(|r| r.method == method && r.seed == s)
                .and_then(|r| r.report_for("test"))
                .and_then(|r| r.point(Metric::BalancedAccuracy));
            row.push(num(v));
        }
        t.rows.push(row);
    }
    t
}

/// Seed mean and std of each metric per (method, K).
pub fn fewshot_table(records: &[RunRecord]) -> Table {
    let mut t = Table::new(
        "Few-shot curve",
        &["method", "k", "runs", "bal_acc_mean", "bal_acc_std", "roc_auc_mean", "weighted_f1_mean"],
    );
    let mut cells = ordered(records.iter().map(|r| r.cell.as_str()));
    cells.sort_by_key(|c| c.trim_start_matches("k=").parse::<usize>().unwrap_or(usize::MAX));
    for method in ordered(records.iter().map(|r| r.method.as_str())) {
        for &cell in &cells {
            let runs: Vec<&RunRecord> = records.iter().filter(|r| r.method == method && r.cell == cell).collect();
            if runs.is_empty() {
                continue;
            }
            let reps = reports(&runs, "test");
            let (m, sd) = mean_std(&points(&reps, Metric::BalancedAccuracy));
            t.rows.push(vec![
                method.to_string(),
                cell.trim_start_matches("k=").to_string(),
                format!("{}/{}", reps.len(), runs.len()),
                num(m),
                num(sd),
                num(mean(&points(&reps, Metric::RocAuc))),
                num(mean(&points(&reps, Metric::WeightedF1))),
            ]);
        }
    }
    t
}

/// Seed mean and std per (method, test set).
pub fn transfer_table(records: &[RunRecord]) -> Table {
    let mut t = Table::new(
        "Transfer stability",
        &["method", "test_set", "runs", "bal_acc_mean", "bal_acc_std", "roc_auc_mean", "roc_auc_std"],
    );
    let sets = ordered(records.iter().flat_map(|r| r.test_splits.iter().map(|s| s.name.as_str())));
    for method in ordered(records.iter().map(|r| r.method.as_str())) {
        let runs: Vec<&RunRecord> = records.iter().filter(|r| r.method == method).collect();
        for &set in &sets {
            let reps = reports(&runs, set);
            let (bm, bs) = mean_std(&points(&reps, Metric::BalancedAccuracy));
            let (am, as_) = mean_std(&points(&reps, Metric::RocAuc));
            t.rows.push(vec![
                method.to_string(),
                set.to_string(),
                format!("{}/{}", reps.len(), runs.len()),
                num(bm),
                num(bs),
                num(am),
                num(as_),
            ]);
        }
    }
    t
}

fn grid_label(spec: &str, fallback: &str) -> String {
    match spec.parse::<ModelSpec>() {
        Ok(ModelSpec {
            aggregator,
            head: HeadKind::Mlp { activation, .. },
            ..
        }) => {
            let pool = aggregator.to_string();
            let mut chars = pool.chars();
            let pool = chars.next().map(|c| c.to_uppercase().collect::<String>() + chars.as_str()).unwrap_or_default();
            let act = match activation.to_string().as_str() {
                "relu" => "ReLU".to_string(),
                "gelu" => "GeLU".to_string(),
                "swiglu" => "SwiGLU".to_string(),
                other => other.to_string(),
            };
            format!("{pool} + {act}")
        }
        _ => fallback.to_string(),
    }
}

/// One row per pooling x activation cell with seed-mean metrics.
pub fn ablation_table(records: &[RunRecord]) -> Table {
    let mut t = Table::new("Ablation", &["setting", "runs", "bal_acc", "roc_auc", "weighted_f1"]);
    for method in ordered(records.iter().map(|r| r.method.as_str())) {
        let runs: Vec<&RunRecord> = records.iter().filter(|r| r.method == method).collect();
        let reps = reports(&runs, "test");
        t.rows.push(vec![
            grid_label(&runs[0].spec, method),
            format!("{}/{}", reps.len(), runs.len()),
            ci_cell(&reps, Metric::BalancedAccuracy),
            ci_cell(&reps, Metric::RocAuc),
            ci_cell(&reps, Metric::WeightedF1),
        ]);
    }
    t
}

/// The tables for one plan's records, chosen by their protocol.
pub fn render_tables(records: &[RunRecord]) -> Result<Vec<Table>> {
    let first = records.first().ok_or_else(|| Error::Config("no records".into()))?;
    if let Some(r) = records.iter().find(|r| r.protocol != first.protocol || r.plan_hash != first.plan_hash) {
        return Err(Error::Config(format!(
            "records mix plans or protocols ({} vs {})",
            first.protocol, r.protocol
        )));
    }
    Ok(match first.protocol.as_str() {
        "benchmark" => vec![benchmark_table(records), per_seed_table(records)],
        "fewshot" => vec![fewshot_table(records)],
        "transfer" => vec![transfer_table(records)],
        "ablation" => vec![ablation_table(records)],
        other => return Err(Error::Config(format!("unknown protocol `{other}` in records"))),
    })
}
