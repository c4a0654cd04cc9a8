use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use tempfile::NamedTempFile;

use crate::error::{CliError, CliResult};

/// CSV rows buffered in memory and written in one atomic rename.
pub struct CsvOut {
    path: PathBuf,
    writer: csv::Writer<Vec<u8>>,
}

impl CsvOut {
    pub fn new(path: &Path, header: &[&str]) -> CliResult<Self> {
        let mut out = Self {
            path: path.to_path_buf(),
            writer: csv::Writer::from_writer(Vec::new()),
        };
        out.row(header.iter().map(|h| h.to_string()))?;
        Ok(out)
    }

    pub fn row<I: IntoIterator<Item = String>>(&mut self, fields: I) -> CliResult<()> {
        let fields: Vec<String> = fields.into_iter().collect();
        self.writer.write_record(&fields).map_err(|source| CliError::Csv {
            path: self.path.clone(),
            source,
        })
    }

    pub fn finish(self) -> CliResult<PathBuf> {
        let path = self.path;
        let bytes = self.writer.into_inner().map_err(|e| CliError::Io {
            path: path.clone(),
            source: e.into_error(),
        })?;
        write_atomic(&path, &bytes)?;
        Ok(path)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = NamedTempFile::new_in(dir).map_err(CliError::io(dir))?;
    tmp.write_all(bytes).map_err(CliError::io(path))?;
    tmp.as_file().sync_all().map_err(CliError::io(path))?;
    tmp.persist(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

/// `<csv>.manifest.json`.
pub fn manifest_path(csv: &Path) -> PathBuf {
    let mut name = csv.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

pub struct Manifest<'a> {
    pub subcommand: &'a str,
    pub config: Value,
    pub config_file: Option<&'a Path>,
    pub seed: u64,
    pub threads: usize,
    pub wall_time_s: f64,
    pub csv: &'a Path,
    pub results: Value,
}

impl Manifest<'_> {
    pub fn write(&self) -> CliResult<PathBuf> {
        let path = manifest_path(self.csv);
        let doc = json!({
            "subcommand": self.subcommand,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.seed,
            "config": self.config,
            "config_file": self.config_file.map(|p| p.display().to_string()),
            "solver_threads": self.threads,
            "wall_time_s": self.wall_time_s,
            "outputs": { "csv": self.csv.display().to_string(), "manifest": path.display().to_string() },
            "results": self.results,
        });
        let mut text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Io {
            path: path.clone(),
            source: e.into(),
        })?;
        text.push('\n');
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}

/// Shortest round-trip decimal; NaN and infinities as `NaN`, `inf`, `-inf`.
pub fn num(v: f64) -> String {
    format!("{v}")
}
