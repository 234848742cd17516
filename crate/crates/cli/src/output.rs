//! Artifact writing: CSV tables, JSON reports and the run manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::CliError;

/// One pass/fail line of a module report.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }
}

/// Report envelope shared by all pipelines.
#[derive(Debug, Clone, Serialize)]
pub struct ModuleReport<T: Serialize> {
    pub module: String,
    pub passes: bool,
    pub checks: Vec<Check>,
    pub details: T,
}

impl<T: Serialize> ModuleReport<T> {
    pub fn new(module: &str, checks: Vec<Check>, details: T) -> Self {
        Self {
            module: module.to_string(),
            passes: checks.iter().all(|c| c.passed),
            checks,
            details,
        }
    }
}

/// Output directory with a record of the files written into it.
pub struct Artifacts {
    pub dir: PathBuf,
    pub written: Vec<String>,
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime {
        module: "output",
        message: format!("{}: {e}", path.display()),
    }
}

impl Artifacts {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes a CSV table; every row must match the header width.
    pub fn csv<I, R>(&mut self, name: &str, header: &[&str], rows: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator<Item = String>,
    {
        let path = self.path(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| io_error(&path, e))?;
        w.write_record(header).map_err(|e| io_error(&path, e))?;
        for row in rows {
            w.write_record(row).map_err(|e| io_error(&path, e))?;
        }
        w.flush().map_err(|e| io_error(&path, e))?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(value).map_err(|e| io_error(Path::new(name), e))?;
        self.text(name, &(text + "\n"))
    }

    /// Writes one JSON value per line.
    pub fn jsonl<I: IntoIterator<Item = serde_json::Value>>(&mut self, name: &str, lines: I) -> Result<(), CliError> {
        let path = self.path(name);
        let file = fs::File::create(&path).map_err(|e| io_error(&path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for line in lines {
            serde_json::to_writer(&mut w, &line).map_err(|e| io_error(&path, e))?;
            w.write_all(b"\n").map_err(|e| io_error(&path, e))?;
        }
        w.flush().map_err(|e| io_error(&path, e))?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn text(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        let path = self.path(name);
        fs::write(&path, text).map_err(|e| io_error(&path, e))?;
        self.written.push(name.to_string());
        Ok(())
    }
}

/// Formats a float for CSV output (shortest round-trip representation).
pub fn num(v: f64) -> String {
    format!("{v}")
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub master_seed: u64,
    pub environment_seed: Option<u64>,
    pub threads: usize,
    pub started_unix_seconds: u64,
    pub wall_clock_seconds: f64,
    pub config: String,
    pub outputs: Vec<String>,
    pub exit_code: i32,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}
