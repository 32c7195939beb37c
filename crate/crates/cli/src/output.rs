//! CSV tables and run manifests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::sweep::SweepGrid;

/// Locale-independent shortest round-trip formatting.
pub fn num(x: f64) -> String {
    format!("{x}")
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

/// Writes a CSV table with `\n` line endings and quoting as needed.
pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Io { path: path.display().to_string(), source: e.into() };
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    let bytes =
        w.into_inner().map_err(|e| CliError::Io { path: path.display().to_string(), source: e.into_error() })?;
    fs::write(path, bytes).map_err(io(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Command-line arguments after the program name, enough to re-run.
    pub args: Vec<String>,
    pub scenario: Option<String>,
    pub seed: u64,
    pub jobs: usize,
    pub grid: Option<SweepGrid>,
    pub outputs: Vec<String>,
    pub status: String,
}

impl RunManifest {
    pub fn file_name(command: &str) -> String {
        format!("{command}_manifest.json")
    }

    pub fn write(&self, out_dir: &Path) -> Result<PathBuf, CliError> {
        let path = out_dir.join(Self::file_name(&self.command));
        let mut text = serde_json::to_string_pretty(self).expect("manifests always serialize");
        text.push('\n');
        fs::write(&path, text).map_err(io(&path))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io(path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Parse {
            path: path.display().to_string(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io(dir))
}
