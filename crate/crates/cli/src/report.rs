//! Comparison tables: methods by {clean, node, topology, hybrid} ROC-AUC,
//! mean ± std over runs, best mean per column marked.

use std::path::{Path, PathBuf};

use agp_core::attack::AttackMode;
use anyhow::Result;
use serde::{Deserialize, Serialize};

use crate::commands::{eval_file, method_label, EvalReport};
use crate::rundir::Meta;
use crate::Failure;

pub const COLUMNS: [&str; 4] = ["clean", "node", "topology", "hybrid"];
const MODES: [AttackMode; 3] = [AttackMode::Node, AttackMode::Topology, AttackMode::Hybrid];

/// One run's values per column; `None` where no evaluation was stored.
#[derive(Debug, Clone, PartialEq)]
pub struct RunValues {
    pub dir: PathBuf,
    pub method: String,
    pub dataset_hash: String,
    pub values: [Option<f64>; 4],
}

pub fn read_run(dir: &Path) -> Result<RunValues> {
    let meta = Meta::read(dir)?;
    let mut values = [None; 4];
    for (k, mode) in MODES.iter().enumerate() {
        let path = dir.join(eval_file(*mode));
        if !path.exists() {
            continue;
        }
        let text = std::fs::read_to_string(&path)?;
        let r: EvalReport = serde_json::from_str(&text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
        values[0].get_or_insert(r.clean_auc);
        values[k + 1] = Some(r.attacked_auc);
    }
    Ok(RunValues { dir: dir.to_path_buf(), method: method_label(&meta), dataset_hash: meta.dataset_hash, values })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn summarize(values: &[f64]) -> Option<Cell> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    if values.iter().all(|v| *v == values[0]) {
        return Some(Cell { mean: values[0], std: 0.0, n });
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(Cell { mean, std, n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub method: String,
    pub runs: usize,
    pub cells: [Option<Cell>; 4],
    pub best: [bool; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub dataset_hash: String,
    pub rows: Vec<Row>,
}

/// Groups runs by method in first-seen order. All runs must share one
/// dataset hash.
pub fn aggregate(runs: &[RunValues]) -> Result<Table> {
    let first = runs.first().ok_or_else(|| Failure::config("report needs at least one run directory"))?;
    if let Some(bad) = runs.iter().find(|r| r.dataset_hash != first.dataset_hash) {
        return Err(Failure::data(format!(
            "{} was run on dataset {} but {} on {}",
            bad.dir.display(),
            bad.dataset_hash,
            first.dir.display(),
            first.dataset_hash
        ))
        .into());
    }
    let mut methods: Vec<String> = Vec::new();
    for r in runs {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    let mut rows: Vec<Row> = methods
        .into_iter()
        .map(|method| {
            let group: Vec<&RunValues> = runs.iter().filter(|r| r.method == method).collect();
            let cells = std::array::from_fn(|c| summarize(&group.iter().filter_map(|r| r.values[c]).collect::<Vec<_>>()));
            Row { method, runs: group.len(), cells, best: [false; 4] }
        })
        .collect();
    for c in 0..4 {
        let best = rows.iter().filter_map(|r| r.cells[c].map(|x| x.mean)).fold(f64::NEG_INFINITY, f64::max);
        for row in &mut rows {
            row.best[c] = row.cells[c].is_some_and(|x| x.mean == best);
        }
    }
    Ok(Table { dataset_hash: first.dataset_hash.clone(), rows })
}

pub fn to_csv(table: &Table) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["method".to_string(), "runs".to_string()];
    for c in COLUMNS {
        header.extend([format!("{c}_mean"), format!("{c}_std"), format!("{c}_best")]);
    }
    w.write_record(&header)?;
    for row in &table.rows {
        let mut rec = vec![row.method.clone(), row.runs.to_string()];
        for c in 0..4 {
            match row.cells[c] {
                Some(cell) => rec.extend([format!("{:.6}", cell.mean), format!("{:.6}", cell.std), row.best[c].to_string()]),
                None => rec.extend([String::new(), String::new(), String::new()]),
            }
        }
        w.write_record(&rec)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// Fixed-width text table; best entries carry a trailing `*`.
pub fn to_text(table: &Table) -> String {
    let cell = |row: &Row, c: usize| match row.cells[c] {
        Some(x) => format!("{:.2} ± {:.2}{}", 100.0 * x.mean, 100.0 * x.std, if row.best[c] { "*" } else { "" }),
        None => "-".to_string(),
    };
    let width = table.rows.iter().map(|r| r.method.chars().count()).max().unwrap_or(0).max("method".len());
    let mut out = format!("{:<width$}  {:>4}", "method", "runs");
    for c in COLUMNS {
        out += &format!("  {c:>16}");
    }
    out.push('\n');
    for row in &table.rows {
        out += &format!("{:<width$}  {:>4}", row.method, row.runs);
        for c in 0..4 {
            out += &format!("  {:>16}", cell(row, c));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(method: &str, hash: &str, values: [Option<f64>; 4]) -> RunValues {
        RunValues { dir: PathBuf::from(method), method: method.into(), dataset_hash: hash.into(), values }
    }

    #[test]
    fn single_run_gives_single_row() {
        let t = aggregate(&[run("agp", "h", [Some(0.9), Some(0.8), None, Some(0.7)])]).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.rows[0].cells[2], None);
        assert_eq!(t.rows[0].best, [true, true, false, true]);
    }

    #[test]
    fn identical_runs_have_zero_std() {
        let r = run("agp", "h", [Some(0.9), Some(0.8), Some(0.6), Some(0.7)]);
        let t = aggregate(&[r.clone(), r.clone(), r]).unwrap();
        for c in t.rows[0].cells.iter().flatten() {
            assert_eq!(c.std, 0.0);
            assert_eq!(c.n, 3);
        }
    }

    #[test]
    fn best_is_marked_per_column() {
        let t = aggregate(&[
            run("agp", "h", [Some(0.90), Some(0.8), Some(0.7), Some(0.6)]),
            run("gpf", "h", [Some(0.95), Some(0.5), Some(0.4), Some(0.3)]),
        ])
        .unwrap();
        assert_eq!(t.rows[0].best, [false, true, true, true]);
        assert_eq!(t.rows[1].best, [true, false, false, false]);
        let text = to_text(&t);
        assert!(text.contains("95.00 ± 0.00*"));
        let csv = to_csv(&t).unwrap();
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn mixed_datasets_are_refused() {
        let err = aggregate(&[run("a", "h1", [None; 4]), run("b", "h2", [None; 4])]).unwrap_err();
        assert_eq!(crate::exit_code(&err), crate::exit::DATA);
    }

    #[test]
    fn sample_std() {
        let c = summarize(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(c.mean, 2.5);
        assert!((c.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }
}
