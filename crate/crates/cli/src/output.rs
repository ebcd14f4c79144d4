//! On-disk formats: commented CSV headers carrying the resolved config, the
//! trace and snapshot tables, and pretty-printed JSON.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nlfkpp::solver::{SnapshotKind, Status, TraceRecord};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

pub const TOOL: &str = concat!("nlfkpp ", env!("CARGO_PKG_VERSION"));
pub const TRACE_COLUMNS: &str = "t,dt,sup_u,m_beta_avg,ubar,K,min_u,u_at_half,monotone_ok";
const CONFIG_MARKER: &str = "# config:";

/// Comment block `# tool`, `# key = value` lines, then the resolved config.
pub fn header_block(config: &ExperimentConfig, extras: &[(&str, String)]) -> String {
    let mut out = format!("# {TOOL}\n");
    for (k, v) in extras {
        let _ = writeln!(out, "# {k} = {v}");
    }
    out.push_str(CONFIG_MARKER);
    out.push('\n');
    for line in config.to_toml().lines() {
        if line.is_empty() {
            out.push_str("#\n");
        } else {
            let _ = writeln!(out, "# {line}");
        }
    }
    out
}

/// Parsed comment block of one of our CSV files.
#[derive(Debug, Clone)]
pub struct Header {
    pub extras: Vec<(String, String)>,
    pub config: ExperimentConfig,
}

impl Header {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.extras.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

fn mismatch(path: &Path, reason: impl Into<String>) -> CliError {
    CliError::SchemaMismatch {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Splits a file into its header and the remaining (non-comment) lines.
fn split_header<'a>(path: &Path, text: &'a str) -> Result<(Header, Vec<&'a str>)> {
    let mut lines = text.lines();
    match lines.next() {
        Some(first) if first.strip_prefix("# ").is_some_and(|t| t.starts_with("nlfkpp ")) => {}
        _ => return Err(mismatch(path, "missing tool header")),
    }
    let mut extras = Vec::new();
    let mut config_text = String::new();
    let mut in_config = false;
    let mut body = Vec::new();
    for line in lines {
        if let Some(comment) = line.strip_prefix('#') {
            if !body.is_empty() {
                return Err(mismatch(path, "comment after data"));
            }
            if line == CONFIG_MARKER {
                in_config = true;
            } else if in_config {
                config_text.push_str(comment.strip_prefix(' ').unwrap_or(comment));
                config_text.push('\n');
            } else if let Some((k, v)) = comment.trim().split_once(" = ") {
                extras.push((k.to_string(), v.to_string()));
            }
        } else {
            body.push(line);
        }
    }
    if !in_config {
        return Err(mismatch(path, "missing config block"));
    }
    let config = ExperimentConfig::from_toml(&config_text).map_err(|e| mismatch(path, e.to_string()))?;
    Ok((Header { extras, config }, body))
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

pub fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn trace_csv(config: &ExperimentConfig, status: Status, records: &[TraceRecord]) -> String {
    let mut out = header_block(config, &[("status", status.to_string())]);
    out.push_str(&trace_table(records));
    out
}

/// Column header and one row per record.
pub fn trace_table(records: &[TraceRecord]) -> String {
    let mut out = String::with_capacity(200 * (records.len() + 1));
    out.push_str(TRACE_COLUMNS);
    out.push('\n');
    for r in records {
        let vals = [r.t, r.dt, r.sup_u, r.m_beta_avg, r.ubar, r.k, r.min_u, r.u_at_half];
        for v in vals {
            out.push_str(&fmt_f64(v));
            out.push(',');
        }
        out.push_str(if r.monotone_ok { "true" } else { "false" });
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct TraceFile {
    pub header: Header,
    pub status: Status,
    pub records: Vec<TraceRecord>,
    /// The file ended inside a row, which was dropped.
    pub truncated: bool,
}

fn parse_record(line: &str) -> Option<TraceRecord> {
    let cols: Vec<&str> = line.split(',').collect();
    if cols.len() != 9 {
        return None;
    }
    let mut v = [0.0; 8];
    for (slot, c) in v.iter_mut().zip(&cols) {
        *slot = c.trim().parse().ok()?;
    }
    let monotone_ok = match cols[8].trim() {
        "true" => true,
        "false" => false,
        _ => return None,
    };
    Some(TraceRecord {
        t: v[0],
        dt: v[1],
        sup_u: v[2],
        m_beta_avg: v[3],
        ubar: v[4],
        k: v[5],
        min_u: v[6],
        u_at_half: v[7],
        monotone_ok,
    })
}

pub fn read_trace(path: &Path) -> Result<TraceFile> {
    let text = read_file(path)?;
    let (header, body) = split_header(path, &text)?;
    let status = header
        .get("status")
        .ok_or_else(|| mismatch(path, "missing status"))?
        .parse::<Status>()
        .map_err(|e| mismatch(path, e))?;
    let (columns, rows) = body.split_first().ok_or_else(|| mismatch(path, "missing column header"))?;
    if *columns != TRACE_COLUMNS {
        return Err(mismatch(path, format!("expected columns {TRACE_COLUMNS}, found {columns}")));
    }
    let ends_cleanly = text.ends_with('\n');
    let mut records = Vec::with_capacity(rows.len());
    let mut truncated = false;
    for (i, row) in rows.iter().enumerate() {
        match parse_record(row) {
            Some(r) => records.push(r),
            // a file cut mid-write loses at most its final, unterminated row
            None if i + 1 == rows.len() && !ends_cleanly => truncated = true,
            None => return Err(mismatch(path, format!("malformed row {}", i + 1))),
        }
    }
    if records.is_empty() {
        return Err(mismatch(path, "no data rows"));
    }
    Ok(TraceFile {
        header,
        status,
        records,
        truncated,
    })
}

pub fn snapshot_label(kind: &SnapshotKind) -> String {
    match kind {
        SnapshotKind::Initial => "initial".into(),
        SnapshotKind::Level(l) => format!("level {l:e}"),
        SnapshotKind::Time(t) => format!("time {t:e}"),
        SnapshotKind::Final => "final".into(),
    }
}

/// File name of a snapshot; time snapshots are numbered by `index`.
pub fn snapshot_file(kind: &SnapshotKind, index: usize) -> String {
    match kind {
        SnapshotKind::Initial => "snapshot_initial.csv".into(),
        SnapshotKind::Level(l) => format!("snapshot_level_{l:e}.csv"),
        SnapshotKind::Time(_) => format!("snapshot_time_{index:03}.csv"),
        SnapshotKind::Final => "snapshot_final.csv".into(),
    }
}

pub fn snapshot_csv(config: &ExperimentConfig, kind: &SnapshotKind, t: f64, nodes: &[f64], values: &[f64]) -> String {
    let mut out = header_block(config, &[("kind", snapshot_label(kind)), ("t", fmt_f64(t))]);
    out.push_str("r,u\n");
    for (r, u) in nodes.iter().zip(values) {
        let _ = writeln!(out, "{},{}", fmt_f64(*r), fmt_f64(*u));
    }
    out
}

#[derive(Debug, Clone)]
pub struct SnapshotFile {
    pub header: Header,
    pub t: f64,
    pub nodes: Vec<f64>,
    pub values: Vec<f64>,
}

pub fn read_snapshot(path: &Path) -> Result<SnapshotFile> {
    let text = read_file(path)?;
    let (header, body) = split_header(path, &text)?;
    let t = header
        .get("t")
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| mismatch(path, "missing snapshot time"))?;
    let (columns, rows) = body.split_first().ok_or_else(|| mismatch(path, "missing column header"))?;
    if *columns != "r,u" {
        return Err(mismatch(path, format!("expected columns r,u, found {columns}")));
    }
    let mut nodes = Vec::with_capacity(rows.len());
    let mut values = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let parsed = row
            .split_once(',')
            .and_then(|(r, u)| Some((r.parse::<f64>().ok()?, u.parse::<f64>().ok()?)));
        let (r, u) = parsed.ok_or_else(|| mismatch(path, format!("malformed row {}", i + 1)))?;
        nodes.push(r);
        values.push(u);
    }
    Ok(SnapshotFile {
        header,
        t,
        nodes,
        values,
    })
}

/// Time snapshots of a run directory, in file-name order.
pub fn time_snapshots(dir: &Path) -> Result<Vec<(PathBuf, SnapshotFile)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("snapshot_time_") && n.ends_with(".csv"))
        })
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| read_snapshot(&p).map(|s| (p, s)))
        .collect()
}

/// Provenance appended to every JSON output.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct JsonHeader<'a> {
    pub tool: &'static str,
    pub config: &'a ExperimentConfig,
}

impl<'a> JsonHeader<'a> {
    pub fn new(config: &'a ExperimentConfig) -> Self {
        Self { tool: TOOL, config }
    }
}

/// A JSON body followed by a `header` key.
#[derive(Debug, Serialize)]
pub struct WithHeader<'a, T: Serialize> {
    #[serde(flatten)]
    pub body: &'a T,
    pub header: JsonHeader<'a>,
}

pub fn json_string<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("outputs serialize to JSON");
    s.push('\n');
    s
}
