use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use tilt_core::imaging::RNG_ALGORITHM;

use crate::CliError;

/// Version of every CSV schema written by this tool; bumped on any column
/// change.
pub const SCHEMA_VERSION: u32 = 1;

pub fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Output directory of one command run.
pub struct OutDir {
    root: PathBuf,
    command: &'static str,
    seed: u64,
}

impl OutDir {
    pub fn create(root: &Path, command: &'static str, seed: u64) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
        Ok(Self { root: root.to_path_buf(), command, seed })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<(), CliError> {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| io_err(&p, e))
    }

    /// CSV with a leading `#` comment naming the schema version, the
    /// command, the RNG and the seed.
    pub fn write_csv<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<(), CliError> {
        let p = self.path(name);
        let file = File::create(&p).map_err(|e| io_err(&p, e))?;
        let mut w = BufWriter::new(file);
        writeln!(
            w,
            "# tilt-results v{SCHEMA_VERSION} command={} rng={RNG_ALGORITHM} seed={}",
            self.command, self.seed
        )
        .map_err(|e| io_err(&p, e))?;
        let mut csv = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(w);
        for r in rows {
            csv.serialize(r).map_err(|e| io_err(&p, e))?;
        }
        csv.flush().map_err(|e| io_err(&p, e))
    }
}

/// Reads a CSV written by [`OutDir::write_csv`], skipping the comment line.
pub fn read_csv(path: &Path) -> Result<Vec<csv::StringRecord>, CliError> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).map_err(|e| io_err(path, e))?;
    r.records().collect::<Result<_, _>>().map_err(|e| io_err(path, e))
}
