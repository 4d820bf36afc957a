//! Report files: JSON summaries and CSV detail tables.
//!
//! Reports are deterministic: no timestamps, no environment-dependent
//! fields: so identical config + seed reproduce byte-identical files.
//! Every report embeds the config hash and the seed.

use crate::error::Result;
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};

/// Creates the output directory (and parents) if needed.
pub fn ensure_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Pretty JSON plus a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| crate::error::Error::InvalidArgument(format!("serialize: {e}")))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Minimal CSV writer: shortest-roundtrip float formatting, no quoting
/// (fields here are plain numbers and identifiers).
pub struct CsvTable {
    text: String,
    columns: usize,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        Self {
            text: format!("{}\n", header.join(",")),
            columns: header.len(),
        }
    }

    /// Header plus a `#` provenance comment (config hash and seed); the
    /// bundled CSV reader skips `#` lines.
    pub fn with_provenance(header: &[&str], config_hash: &str, seed: u64) -> Self {
        Self {
            text: format!(
                "# config_hash={config_hash} seed={seed}\n{}\n",
                header.join(",")
            ),
            columns: header.len(),
        }
    }

    pub fn row(&mut self, fields: &[String]) {
        assert_eq!(fields.len(), self.columns, "csv row width");
        self.text.push_str(&fields.join(","));
        self.text.push('\n');
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, &self.text)?;
        Ok(())
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }
}

pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::from("nan")
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn out_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}
