//! CSV and JSON artifacts with a metadata header.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Header shared by every file of one run.
#[derive(Clone, Debug, Serialize)]
pub struct Meta {
    pub toolkit: String,
    pub version: String,
    pub command: String,
    pub config_sha256: String,
    pub tolerances: String,
    pub config: serde_json::Value,
}

impl Meta {
    pub fn new(command: &str, config_json: &str, tolerances: String) -> Self {
        let hash = Sha256::digest(config_json.as_bytes());
        Meta {
            toolkit: "tsd".into(),
            version: VERSION.into(),
            command: command.into(),
            config_sha256: hash.iter().map(|b| format!("{b:02x}")).collect(),
            tolerances,
            config: serde_json::from_str(config_json).expect("canonical config is JSON"),
        }
    }

    fn csv_lines(&self) -> Vec<String> {
        vec![
            format!("# toolkit: {} {}", self.toolkit, self.version),
            format!("# command: {}", self.command),
            format!("# config_sha256: {}", self.config_sha256),
            format!("# tolerances: {}", self.tolerances),
            format!("# config: {}", self.config),
        ]
    }
}

/// 17 significant digits, so values round-trip exactly.
pub fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "nan".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

pub enum Cell {
    F(f64),
    I(i64),
    S(String),
    B(bool),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::F(x) => num(*x),
            Cell::I(i) => i.to_string(),
            Cell::S(s) => {
                if s.contains([',', '"', '\n']) {
                    format!("\"{}\"", s.replace('"', "\"\""))
                } else {
                    s.clone()
                }
            }
            Cell::B(b) => b.to_string(),
        }
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::F(x)
    }
}
impl From<i64> for Cell {
    fn from(x: i64) -> Self {
        Cell::I(x)
    }
}
impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::I(x as i64)
    }
}
impl From<bool> for Cell {
    fn from(x: bool) -> Self {
        Cell::B(x)
    }
}
impl From<&str> for Cell {
    fn from(x: &str) -> Self {
        Cell::S(x.into())
    }
}
impl From<String> for Cell {
    fn from(x: String) -> Self {
        Cell::S(x)
    }
}

#[macro_export]
macro_rules! row {
    ($($x:expr),* $(,)?) => { vec![$($crate::output::Cell::from($x)),*] };
}

/// Single writer for the artifacts of a run.
pub struct Writer {
    pub dir: PathBuf,
    pub meta: Meta,
    pub written: Vec<PathBuf>,
}

impl Writer {
    pub fn new(dir: &Path, meta: Meta) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
        let marker = dir.join(FAILED_MARKER);
        if marker.exists() {
            fs::remove_file(&marker).map_err(|e| CliError::Io(e.to_string()))?;
        }
        Ok(Writer { dir: dir.to_path_buf(), meta, written: Vec::new() })
    }

    fn write(&mut self, name: &str, body: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let mut f = fs::File::create(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        f.write_all(body.as_bytes()).map_err(|e| CliError::Io(e.to_string()))?;
        self.written.push(path);
        Ok(())
    }

    pub fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<Cell>]) -> Result<(), CliError> {
        let mut s = String::new();
        for l in self.meta.csv_lines() {
            s.push_str(&l);
            s.push('\n');
        }
        s.push_str(&header.join(","));
        s.push('\n');
        for r in rows {
            debug_assert_eq!(r.len(), header.len());
            let line: Vec<String> = r.iter().map(Cell::render).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        self.write(name, &s)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, data: &T) -> Result<(), CliError> {
        #[derive(Serialize)]
        struct Doc<'a, T> {
            meta: &'a Meta,
            data: &'a T,
        }
        let mut s = serde_json::to_string_pretty(&Doc { meta: &self.meta, data }).map_err(|e| CliError::Io(e.to_string()))?;
        s.push('\n');
        self.write(name, &s)
    }
}

pub const FAILED_MARKER: &str = "FAILED";

/// Marker left next to partial outputs when a run fails.
pub fn mark_failed(dir: &Path, err: &CliError) {
    if fs::create_dir_all(dir).is_ok() {
        let _ = fs::write(dir.join(FAILED_MARKER), format!("{err}\n"));
    }
}
