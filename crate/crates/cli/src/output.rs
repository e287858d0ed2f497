//! Error classification and file writers.

use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use pairlink_core::rate::RateError;
use pairlink_core::sync::SyncError;
use pairlink_core::Error;

/// A failure tagged with its process exit code.
#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

pub mod code {
    pub const OTHER: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const SYNC: u8 = 3;
    pub const IO: u8 = 4;
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        CliError { code, message: message.into() }
    }

    pub fn exit_code(&self) -> u8 {
        self.code
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => code::CONFIG,
            Error::Sync(SyncError::Invalid(_)) => code::CONFIG,
            Error::Sync(_) => code::SYNC,
            Error::Ptag(_) | Error::Io(_) | Error::Tag(_) => code::IO,
            Error::Rate(RateError::Csv(_)) => code::IO,
            _ => code::OTHER,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<RateError> for CliError {
    fn from(e: RateError) -> Self {
        Error::from(e).into()
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::new(code::IO, e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::new(code::IO, e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::new(code::IO, e.to_string())
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::new(code::IO, format!("cannot create {}: {e}", dir.display())))
}

pub fn create(path: &Path) -> CliResult<BufWriter<fs::File>> {
    let f = fs::File::create(path).map_err(|e| CliError::new(code::IO, format!("cannot write {}: {e}", path.display())))?;
    Ok(BufWriter::new(f))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Writes serializable rows as CSV under `header`, which must list the
/// field names in order; an empty table still gets its header line.
pub fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> CliResult<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(create(path)?);
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs a writer that takes `impl Write` against a fresh file.
pub fn write_with<E>(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> Result<(), E>) -> CliResult<()>
where
    CliError: From<E>,
{
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

pub struct Written(Vec<PathBuf>);

impl Written {
    pub fn new() -> Self {
        Written(Vec::new())
    }

    pub fn push(&mut self, p: PathBuf) -> PathBuf {
        self.0.push(p.clone());
        p
    }

    pub fn report(&self) {
        for p in &self.0 {
            println!("wrote {}", p.display());
        }
    }
}
