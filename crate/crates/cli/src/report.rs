//! CSV and markdown outputs, and merging of several runs.
//!
//! Numbers are written with Rust's shortest round-trip formatting so a CSV
//! reproduces bit-exactly from the same inputs. Undefined values (no
//! boundary, empty ground truth) are empty cells.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use prompt_ttt_core::metrics::{AggregateRow, MetricsRecord, MetricsTable};
use prompt_ttt_core::synth::Anatomy;
use prompt_ttt_core::trainer::TrainHistory;

use crate::error::{CliError, CliResult};

pub const METRICS_CSV: &str = "metrics.csv";
pub const PER_ANATOMY_CSV: &str = "per_anatomy.csv";
pub const COMPARISON_CSV: &str = "comparison.csv";
pub const TRACE_CSV: &str = "trace.csv";
pub const HISTORY_CSV: &str = "history.csv";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const REPORT_MD: &str = "report.md";

/// Reference DSC per prompt count from the original study, printed beside
/// the ablation rows and never compared against.
pub const ABLATION_REFERENCE: [(usize, f64); 3] = [(1, 0.881), (3, 0.875), (5, 0.867)];

const METRIC_COLUMNS: [&str; 4] = ["dsc", "hd95", "asd", "sensitivity"];

pub fn num(v: f64) -> String {
    format!("{v}")
}

pub fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn anatomy_name(code: u8) -> String {
    Anatomy::from_code(code).map(|a| a.name().to_string()).unwrap_or_else(|_| code.to_string())
}

/// An in-memory CSV table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(headers: &[&str]) -> Self {
        Self { headers: headers.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.headers.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(&self.headers).map_err(|e| csv_err(path, e))?;
        for r in &self.rows {
            w.write_record(r).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| CliError::io(path, e))
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        if !path.is_file() {
            return Err(CliError::format(path, "file is missing"));
        }
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let headers = r.headers().map_err(|e| csv_err(path, e))?.iter().map(String::from).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|x| x.iter().map(String::from).collect()))
            .collect::<Result<Vec<Vec<String>>, _>>()
            .map_err(|e| csv_err(path, e))?;
        Ok(Self { headers, rows })
    }

    pub fn markdown(&self) -> String {
        let mut s = format!("| {} |\n|{}\n", self.headers.join(" | "), "---|".repeat(self.headers.len()));
        for r in &self.rows {
            s.push_str(&format!("| {} |\n", r.join(" | ")));
        }
        s
    }
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::format(path, format!("{other:?}")),
    }
}

pub fn metrics_table(records: &[MetricsRecord], seed: u64) -> Table {
    let mut t = Table::new(&["video", "frame", "anatomy", "seed", "dsc", "hd95", "asd", "sensitivity"]);
    for r in records {
        t.push(vec![
            r.video.to_string(),
            r.frame.to_string(),
            anatomy_name(r.anatomy),
            seed.to_string(),
            num(r.dsc),
            opt(r.hd95),
            opt(r.asd),
            opt(r.sensitivity),
        ]);
    }
    t
}

fn metric_cells(r: &AggregateRow) -> Vec<String> {
    vec![num(r.dsc), opt(r.hd95), opt(r.asd), opt(r.sensitivity)]
}

fn row_label(r: &AggregateRow) -> String {
    r.anatomy.map(anatomy_name).unwrap_or_else(|| r.label.to_lowercase())
}

/// One row per (method, anatomy) plus each method's average row.
pub fn per_anatomy_table(tables: &[(String, &MetricsTable)]) -> Table {
    let mut t = Table::new(&[
        "method",
        "anatomy",
        "count",
        "dsc",
        "hd95",
        "asd",
        "sensitivity",
        "distance_undefined",
        "sensitivity_undefined",
    ]);
    for (method, table) in tables {
        for r in &table.rows {
            let mut row = vec![method.clone(), row_label(r), r.count.to_string()];
            row.extend(metric_cells(r));
            row.extend([r.distance_undefined.to_string(), r.sensitivity_undefined.to_string()]);
            t.push(row);
        }
    }
    t
}

/// One summary row per method: the macro average over anatomies.
pub fn comparison_table(tables: &[(String, &MetricsTable)], seed: u64) -> Table {
    let mut t = Table::new(&["method", "seed", "dsc", "hd95", "asd", "sensitivity"]);
    for (method, table) in tables {
        let mut row = vec![method.clone(), seed.to_string()];
        row.extend(metric_cells(table.average()));
        t.push(row);
    }
    t
}

pub fn ablation_table(rows: &[(usize, &MetricsTable)], seed: u64) -> Table {
    let mut t = Table::new(&["n_points", "seed", "dsc", "hd95", "asd", "sensitivity", "reference_dsc"]);
    for (n, table) in rows {
        let mut row = vec![n.to_string(), seed.to_string()];
        row.extend(metric_cells(table.average()));
        row.push(ABLATION_REFERENCE.iter().find(|(k, _)| k == n).map(|(_, v)| num(*v)).unwrap_or_default());
        t.push(row);
    }
    t
}

pub struct TraceRow<'a> {
    pub video: usize,
    pub trace: &'a prompt_ttt_core::ttt::TttTrace,
}

pub fn trace_table(traces: &[TraceRow<'_>]) -> Table {
    let mut t = Table::new(&["video", "loop", "frame", "step", "loss", "lr"]);
    for tr in traces {
        for e in &tr.trace.entries {
            t.push(vec![
                tr.video.to_string(),
                e.loop_index.to_string(),
                e.frame.to_string(),
                e.step.to_string(),
                num(e.loss),
                num(e.lr),
            ]);
        }
    }
    t
}

pub fn history_table(h: &TrainHistory) -> Table {
    let mut t = Table::new(&["epoch", "l_train", "l_main", "l_aux", "l_rot", "l_recon", "lr", "lr_dropped"]);
    for e in &h.epochs {
        t.push(vec![
            e.epoch.to_string(),
            num(e.l_train),
            num(e.l_main),
            num(e.l_aux),
            opt(e.l_rot),
            opt(e.l_recon),
            num(e.lr),
            h.lr_drops.contains(&e.epoch).to_string(),
        ]);
    }
    t
}

/// Tables understood by [`merge_runs`], with the columns that identify a row.
const MERGEABLE: [(&str, &str, &[&str]); 3] = [
    (COMPARISON_CSV, "Summary per method", &["method"]),
    (PER_ANATOMY_CSV, "Per-anatomy results", &["method", "anatomy"]),
    (ABLATION_CSV, "Number of point prompts", &["n_points"]),
];

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn header_diff(a: &Table, b: &Table) -> String {
    let sa: BTreeSet<&String> = a.headers.iter().collect();
    let sb: BTreeSet<&String> = b.headers.iter().collect();
    let only_a: Vec<&&String> = sa.difference(&sb).collect();
    let only_b: Vec<&&String> = sb.difference(&sa).collect();
    if only_a.is_empty() && only_b.is_empty() {
        format!("same columns in a different order: {:?} vs {:?}", a.headers, b.headers)
    } else {
        format!("only in first: {only_a:?}; only in second: {only_b:?}")
    }
}

/// Merges one table kind across runs. With a single run the cells are
/// copied verbatim; otherwise numeric metric cells become `mean ± std`
/// (sample std over the runs that define the value) and the seed column is
/// replaced by the number of runs.
pub fn merge_tables(tables: &[(PathBuf, Table)], keys: &[&str]) -> CliResult<Table> {
    let (first_path, first) = tables.first().ok_or_else(|| CliError::Usage("no run directories given".into()))?;
    for (p, t) in &tables[1..] {
        if t.headers != first.headers {
            return Err(CliError::Usage(format!(
                "column mismatch between {} and {}: {}",
                first_path.display(),
                p.display(),
                header_diff(first, t)
            )));
        }
    }
    if tables.len() == 1 {
        return Ok(first.clone());
    }
    let key_idx: Vec<usize> = keys
        .iter()
        .map(|k| first.column(k).ok_or_else(|| CliError::format(first_path, format!("missing key column {k}"))))
        .collect::<CliResult<_>>()?;
    let seed_idx = first.column("seed");
    let mut out = Table { headers: first.headers.clone(), rows: Vec::new() };
    if let Some(i) = seed_idx {
        out.headers[i] = "runs".into();
    }
    for row in &first.rows {
        let key: Vec<&String> = key_idx.iter().map(|&i| &row[i]).collect();
        let mut matches = Vec::with_capacity(tables.len());
        for (p, t) in tables {
            let m = t
                .rows
                .iter()
                .find(|r| key_idx.iter().map(|&i| &r[i]).eq(key.iter().copied()))
                .ok_or_else(|| CliError::Usage(format!("{} has no row for {key:?}", p.display())))?;
            matches.push(m);
        }
        let mut merged = Vec::with_capacity(row.len());
        for (c, h) in first.headers.iter().enumerate() {
            let cell = if Some(c) == seed_idx {
                tables.len().to_string()
            } else if key_idx.contains(&c) || !METRIC_COLUMNS.contains(&h.as_str()) {
                row[c].clone()
            } else {
                let mut vals = Vec::new();
                for (m, (p, _)) in matches.iter().zip(tables) {
                    if m[c].is_empty() {
                        continue;
                    }
                    vals.push(m[c].parse::<f64>().map_err(|_| CliError::format(p, format!("column {h}: {:?} is not a number", m[c])))?);
                }
                if vals.is_empty() {
                    String::new()
                } else {
                    let (mean, std) = mean_std(&vals);
                    format!("{mean:.4} ± {std:.4}")
                }
            };
            merged.push(cell);
        }
        out.push(merged);
    }
    Ok(out)
}

/// Consolidated markdown over `dirs`. Every directory must hold the same
/// set of result tables.
pub fn merge_runs(dirs: &[PathBuf]) -> CliResult<String> {
    if dirs.is_empty() {
        return Err(CliError::Usage("no run directories given".into()));
    }
    for d in dirs {
        if !d.is_dir() {
            return Err(CliError::Usage(format!("run directory {} does not exist", d.display())));
        }
    }
    let present = |d: &Path| -> Vec<&str> { MERGEABLE.iter().filter(|(f, ..)| d.join(f).is_file()).map(|(f, ..)| *f).collect() };
    let kinds = present(&dirs[0]);
    for d in &dirs[1..] {
        let k = present(d);
        if k != kinds {
            return Err(CliError::Usage(format!(
                "run directories hold different tables: {} has {kinds:?}, {} has {k:?}",
                dirs[0].display(),
                d.display()
            )));
        }
    }
    if kinds.is_empty() {
        return Err(CliError::Usage(format!("{} holds no result tables", dirs[0].display())));
    }
    let mut md = format!("# Results over {} run(s)\n", dirs.len());
    for (file, title, keys) in MERGEABLE {
        if !kinds.contains(&file) {
            continue;
        }
        let tables = dirs.iter().map(|d| Ok((d.join(file), Table::read(&d.join(file))?))).collect::<CliResult<Vec<_>>>()?;
        let merged = merge_tables(&tables, keys)?;
        md.push_str(&format!("\n## {title}\n\n{}", merged.markdown()));
        if file == ABLATION_CSV {
            md.push_str("\nreference_dsc is the published value for each prompt count, shown for orientation only.\n");
        }
    }
    Ok(md)
}

pub fn write_text(path: &Path, s: &str) -> CliResult<()> {
    fs::write(path, s).map_err(|e| CliError::io(path, e))
}
