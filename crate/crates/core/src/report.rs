//! Result rows and comparison tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pruning::{PruneRecord, PruneSpec};

/// Strategy label of unpruned rows.
pub const NO_PRUNING: &str = "—";

/// One (model, strategy, dataset) result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    /// `"Top 6"`, `"Middle 10"`, … or [`NO_PRUNING`].
    pub strategy: String,
    pub dataset: String,
    /// Percent.
    pub validation_accuracy: f64,
    /// Percent.
    pub test_accuracy: f64,
    pub layers: usize,
    pub total_params: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prune: Option<PruneRecord>,
}

impl EvalReport {
    pub fn check(&self) -> Result<()> {
        for (what, v) in [("validation", self.validation_accuracy), ("test", self.test_accuracy)] {
            if !(0.0..=100.0).contains(&v) {
                return Err(Error::Data(format!("{what} accuracy {v} outside [0, 100]")));
            }
        }
        let expected = self
            .prune
            .as_ref()
            .map_or_else(|| NO_PRUNING.to_string(), |r| r.spec.label());
        if self.strategy != expected {
            return Err(Error::Data(format!(
                "strategy label {:?} does not match its prune record ({expected:?})",
                self.strategy
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableFormat {
    Tsv,
    Markdown,
}

impl FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(TableFormat::Tsv),
            "markdown" | "md" => Ok(TableFormat::Markdown),
            other => Err(Error::Data(format!("unknown table format {other:?}"))),
        }
    }
}

fn spec_of(label: &str) -> Option<PruneSpec> {
    label.parse().ok()
}

/// Rows sharing a model and a removal count compete for "best".
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct GroupKey {
    model_rank: usize,
    /// `None` (unpruned) sorts after every pruned group.
    removed: (bool, usize),
}

#[derive(Clone, Debug)]
struct Row {
    model: String,
    strategy: String,
    group: GroupKey,
    order: (usize, String),
    layers: usize,
    params: usize,
    /// dataset → (mean validation %, mean test %)
    cells: BTreeMap<usize, (f64, f64)>,
}

/// Collapses seeds (mean) and orders rows: by model in first-appearance
/// order, then removal count, then top/middle/bottom.
fn build_rows(rows: &[EvalReport]) -> (Vec<String>, Vec<Row>) {
    let mut models: Vec<&str> = Vec::new();
    let mut datasets: Vec<String> = Vec::new();
    let mut acc: BTreeMap<(String, String), (Row, BTreeMap<usize, (f64, f64, usize)>)> = BTreeMap::new();
    for r in rows {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
        let d = match datasets.iter().position(|d| d == &r.dataset) {
            Some(i) => i,
            None => {
                datasets.push(r.dataset.clone());
                datasets.len() - 1
            }
        };
        let model_rank = models.iter().position(|m| *m == r.model).unwrap();
        let spec = spec_of(&r.strategy);
        let entry = acc.entry((r.model.clone(), r.strategy.clone())).or_insert_with(|| {
            (
                Row {
                    model: r.model.clone(),
                    strategy: r.strategy.clone(),
                    group: GroupKey {
                        model_rank,
                        removed: spec.map_or((true, 0), |s| (false, s.k)),
                    },
                    order: (spec.map_or(usize::MAX, |s| s.strategy as usize), r.strategy.clone()),
                    layers: r.layers,
                    params: r.total_params,
                    cells: BTreeMap::new(),
                },
                BTreeMap::new(),
            )
        });
        let cell = entry.1.entry(d).or_insert((0.0, 0.0, 0));
        cell.0 += r.validation_accuracy;
        cell.1 += r.test_accuracy;
        cell.2 += 1;
    }
    let mut out: Vec<Row> = acc
        .into_values()
        .map(|(mut row, sums)| {
            row.cells = sums
                .into_iter()
                .map(|(d, (v, t, n))| (d, (v / n as f64, t / n as f64)))
                .collect();
            row
        })
        .collect();
    out.sort_by(|a, b| (&a.group, &a.order).cmp(&(&b.group, &b.order)));
    (datasets, out)
}

/// Marks, per group, the rows holding the best rendered value of `metric`.
fn best_flags(rows: &[Row], cols: usize, metric: impl Fn(&(f64, f64)) -> f64) -> Vec<Vec<bool>> {
    let mut flags = vec![vec![false; cols]; rows.len()];
    let rounded = |x: f64| (x * 100.0).round() as i64;
    for d in 0..cols {
        let mut start = 0;
        while start < rows.len() {
            let mut end = start;
            while end < rows.len() && rows[end].group == rows[start].group {
                end += 1;
            }
            let best = rows[start..end]
                .iter()
                .filter_map(|r| r.cells.get(&d).map(|c| rounded(metric(c))))
                .max();
            for (i, r) in rows[start..end].iter().enumerate() {
                if let (Some(b), Some(c)) = (best, r.cells.get(&d)) {
                    flags[start + i][d] = rounded(metric(c)) == b;
                }
            }
            start = end;
        }
    }
    flags
}

fn render(format: TableFormat, header: &[String], body: &[Vec<(String, bool)>]) -> String {
    let mut out = String::new();
    match format {
        TableFormat::Tsv => {
            out.push_str(&header.join("\t"));
            out.push('\n');
            for row in body {
                let cells: Vec<String> = row
                    .iter()
                    .map(|(c, best)| if *best { format!("{c}*") } else { c.clone() })
                    .collect();
                out.push_str(&cells.join("\t"));
                out.push('\n');
            }
        }
        TableFormat::Markdown => {
            let _ = writeln!(out, "| {} |", header.join(" | "));
            let align: Vec<&str> = header
                .iter()
                .enumerate()
                .map(|(i, _)| if i < 2 { "---" } else { "---:" })
                .collect();
            let _ = writeln!(out, "|{}|", align.join("|"));
            for row in body {
                let cells: Vec<String> = row
                    .iter()
                    .map(|(c, best)| if *best { format!("**{c}**") } else { c.clone() })
                    .collect();
                let _ = writeln!(out, "| {} |", cells.join(" | "));
            }
        }
    }
    out
}

fn plain(s: impl Into<String>) -> (String, bool) {
    (s.into(), false)
}

/// Test accuracy per dataset, one row per (model, strategy), best value in
/// each (dataset, model, removal-count) group flagged: `*` suffix in TSV,
/// bold in markdown. Repeated seeds are averaged.
pub fn comparison_report(rows: &[EvalReport], format: TableFormat) -> String {
    let (datasets, table) = build_rows(rows);
    let flags = best_flags(&table, datasets.len(), |c| c.1);
    let mut header = vec!["Model".to_string(), "Pruning Strategy".to_string()];
    header.extend(datasets.iter().cloned());
    header.extend(["Layers".to_string(), "Params".to_string()]);
    let body: Vec<Vec<(String, bool)>> = table
        .iter()
        .zip(&flags)
        .map(|(r, f)| {
            let mut cells = vec![plain(&r.model), plain(&r.strategy)];
            for (d, &best) in f.iter().enumerate() {
                cells.push(match r.cells.get(&d) {
                    Some(c) => (format!("{:.2}", c.1), best),
                    None => plain("-"),
                });
            }
            cells.push(plain(r.layers.to_string()));
            cells.push(plain(r.params.to_string()));
            cells
        })
        .collect();
    render(format, &header, &body)
}

/// Validation and test accuracy on one dataset.
pub fn split_report(rows: &[EvalReport], dataset: &str, format: TableFormat) -> String {
    let subset: Vec<EvalReport> = rows.iter().filter(|r| r.dataset == dataset).cloned().collect();
    let (_, table) = build_rows(&subset);
    let val_flags = best_flags(&table, 1, |c| c.0);
    let test_flags = best_flags(&table, 1, |c| c.1);
    let header: Vec<String> = ["Model", "Pruning Strategy", "Validation Accuracy", "Testing Accuracy"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let body: Vec<Vec<(String, bool)>> = table
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let c = r.cells[&0];
            vec![
                plain(&r.model),
                plain(&r.strategy),
                (format!("{:.2}", c.0), val_flags[i][0]),
                (format!("{:.2}", c.1), test_flags[i][0]),
            ]
        })
        .collect();
    render(format, &header, &body)
}

pub fn write_reports_jsonl(path: impl AsRef<Path>, rows: &[EvalReport]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_reports_jsonl(path: impl AsRef<Path>) -> Result<Vec<EvalReport>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: EvalReport = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        r.check()?;
        rows.push(r);
    }
    Ok(rows)
}

/// Every `*.jsonl` report file directly inside `dir`, in file-name order.
pub fn read_reports_dir(dir: impl AsRef<Path>) -> Result<Vec<EvalReport>> {
    let mut files: Vec<_> = fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .filter(|p| p.file_name().is_some_and(|n| n != "experiments.jsonl"))
        .collect();
    files.sort();
    let mut rows = Vec::new();
    for f in files {
        rows.extend(read_reports_jsonl(f)?);
    }
    Ok(rows)
}
