//! Append-only JSON-lines log. Every record is flushed to disk before the
//! state change it describes is applied, so replaying the log after a crash
//! reproduces the state exactly. A torn final line (the process died while
//! writing it) is cut off on open; any other unreadable line is an error.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::FederationError;

#[derive(Debug)]
pub struct Wal {
    path: PathBuf,
    file: File,
    records: u64,
}

fn io(e: impl std::fmt::Display) -> FederationError {
    FederationError::Io(e.to_string())
}

impl Wal {
    /// Opens (creating if needed) and returns the intact records.
    pub fn open<R: DeserializeOwned>(path: &Path) -> Result<(Self, Vec<R>), FederationError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)
            .map_err(io)?;
        let mut reader = BufReader::new(&mut file);
        let mut records = Vec::new();
        let mut good_len: u64 = 0;
        let mut line = String::new();
        let mut line_no = 0usize;
        loop {
            line.clear();
            let n = reader.read_line(&mut line).map_err(io)?;
            if n == 0 {
                break;
            }
            line_no += 1;
            let parsed = if line.ends_with('\n') {
                serde_json::from_str::<R>(line.trim_end()).ok()
            } else {
                None
            };
            match parsed {
                Some(r) => {
                    records.push(r);
                    good_len += n as u64;
                }
                None if reader.fill_buf().map_err(io)?.is_empty() => {
                    tracing::warn!(path = %path.display(), line = line_no, "discarding torn log tail");
                    break;
                }
                None => {
                    return Err(FederationError::Wal {
                        line: line_no,
                        message: "unreadable record".into(),
                    })
                }
            }
        }
        drop(reader);
        let len = file.metadata().map_err(io)?.len();
        if len != good_len {
            file.set_len(good_len).map_err(io)?;
            file.seek(SeekFrom::End(0)).map_err(io)?;
            file.sync_all().map_err(io)?;
        }
        let count = records.len() as u64;
        Ok((
            Self {
                path: path.to_path_buf(),
                file,
                records: count,
            },
            records,
        ))
    }

    pub fn append<R: Serialize>(&mut self, record: &R) -> Result<(), FederationError> {
        let mut line = serde_json::to_string(record).map_err(io)?;
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(io)?;
        self.file.sync_data().map_err(io)?;
        self.records += 1;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> u64 {
        self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records == 0
    }
}
