//! File writers shared by the subcommands. CSVs open with `#` comment lines
//! carrying the config hash and column units, then one header row.

use serde::Serialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum OutputError {
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

/// Provenance written at the top of every file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Stamp {
    pub tool: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Stamp {
    pub fn new(config_hash: &str, seed: u64) -> Self {
        Stamp { tool: format!("fracsource {}", env!("CARGO_PKG_VERSION")), config_hash: config_hash.into(), seed }
    }
}

/// Shortest round-trip form; exponent notation keeps tiny values compact.
pub fn fmt_f64(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.is_finite() {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

pub struct CsvTable {
    columns: Vec<(&'static str, &'static str)>,
    body: String,
    rows: usize,
}

pub enum Cell {
    F(f64),
    U(usize),
    B(bool),
    S(String),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::F(v)
    }
}
impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::U(v)
    }
}
impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::B(v)
    }
}
impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        match v {
            Some(v) => Cell::F(v),
            None => Cell::S(String::new()),
        }
    }
}

impl CsvTable {
    /// `columns` pairs each name with its unit.
    pub fn new(columns: &[(&'static str, &'static str)]) -> Self {
        CsvTable { columns: columns.to_vec(), body: String::new(), rows: 0 }
    }

    pub fn row(&mut self, cells: Vec<Cell>) {
        assert_eq!(cells.len(), self.columns.len(), "row width");
        let line: Vec<String> = cells
            .into_iter()
            .map(|c| match c {
                Cell::F(v) => fmt_f64(v),
                Cell::U(v) => v.to_string(),
                Cell::B(v) => v.to_string(),
                Cell::S(s) => s,
            })
            .collect();
        self.body.push_str(&line.join(","));
        self.body.push('\n');
        self.rows += 1;
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn render(&self, stamp: &Stamp, title: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {} {}", stamp.tool, title);
        let _ = writeln!(s, "# config_sha256={} seed={}", stamp.config_hash, stamp.seed);
        let units: Vec<String> = self.columns.iter().map(|(n, u)| format!("{n}={u}")).collect();
        let _ = writeln!(s, "# units: {}", units.join(","));
        let names: Vec<&str> = self.columns.iter().map(|(n, _)| *n).collect();
        s.push_str(&names.join(","));
        s.push('\n');
        s.push_str(&self.body);
        s
    }
}

/// Collects everything a run writes; files go out through one writer each.
pub struct OutputDir {
    pub root: PathBuf,
    pub stamp: Stamp,
    pub written: Vec<String>,
}

impl OutputDir {
    pub fn create(root: &Path, stamp: Stamp) -> Result<Self, OutputError> {
        std::fs::create_dir_all(root).map_err(|source| OutputError::Io { path: root.display().to_string(), source })?;
        Ok(OutputDir { root: root.to_path_buf(), stamp, written: Vec::new() })
    }

    fn put(&mut self, name: &str, text: &str) -> Result<(), OutputError> {
        let path = self.root.join(name);
        std::fs::write(&path, text).map_err(|source| OutputError::Io { path: path.display().to_string(), source })?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn csv(&mut self, name: &str, title: &str, table: &CsvTable) -> Result<(), OutputError> {
        let text = table.render(&self.stamp, title);
        self.put(name, &text)
    }

    /// `value` must serialize to an object; the stamp fields are prepended.
    pub fn json<T: Serialize>(&mut self, name: &str, schema: &str, value: &T) -> Result<(), OutputError> {
        let body = serde_json::to_value(value).map_err(|e| OutputError::Format { path: name.into(), message: e.to_string() })?;
        let serde_json::Value::Object(fields) = body else {
            return Err(OutputError::Format { path: name.into(), message: "expected a JSON object".into() });
        };
        let mut obj = serde_json::Map::new();
        obj.insert("schema".into(), schema.into());
        obj.insert("tool".into(), self.stamp.tool.clone().into());
        obj.insert("config_hash".into(), self.stamp.config_hash.clone().into());
        obj.insert("seed".into(), self.stamp.seed.into());
        obj.extend(fields);
        let mut text = serde_json::to_string_pretty(&serde_json::Value::Object(obj)).expect("json value serializes");
        text.push('\n');
        self.put(name, &text)
    }
}

/// Rows of a `t,x,value` file, comment lines skipped.
pub fn read_trace_csv(path: &Path) -> Result<Vec<[f64; 3]>, OutputError> {
    let p = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| OutputError::Io { path: p.clone(), source })?;
    let fmt = |line: usize, m: String| OutputError::Format { path: p.clone(), message: format!("line {line}: {m}") };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty());
    let (hl, header) = lines.next().ok_or_else(|| fmt(1, "empty file".into()))?;
    let names: Vec<&str> = header.split(',').map(str::trim).collect();
    if names.len() != 3 || names[0] != "t" || !names[1].starts_with('x') || names[2] != "value" {
        return Err(fmt(hl + 1, format!("expected header t,x,value, found '{header}'")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 3 {
            return Err(fmt(i + 1, format!("expected 3 fields, found {}", cells.len())));
        }
        let mut r = [0.0; 3];
        for (slot, c) in r.iter_mut().zip(&cells) {
            *slot = c.trim().parse().map_err(|_| fmt(i + 1, format!("'{c}' is not a number")))?;
        }
        rows.push(r);
    }
    Ok(rows)
}
