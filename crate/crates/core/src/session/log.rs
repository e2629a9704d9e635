//! Append-only JSON-lines session log. Every record carries a SHA-256 over
//! its type, payload and timestamp, so a torn final line is detected and
//! dropped on load.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::SessionError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Start,
    Feedback,
    Episode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    #[serde(rename = "type")]
    pub kind: RecordKind,
    pub payload: Value,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
    pub checksum: String,
}

pub fn now_millis() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

fn checksum(kind: RecordKind, payload: &Value, timestamp: u64) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_string(&kind).unwrap_or_default());
    hasher.update(b"\n");
    hasher.update(payload.to_string());
    hasher.update(b"\n");
    hasher.update(timestamp.to_string());
    hex::encode(hasher.finalize())
}

impl LogRecord {
    pub fn new(kind: RecordKind, payload: Value, timestamp: u64) -> Self {
        let checksum = checksum(kind, &payload, timestamp);
        Self {
            kind,
            payload,
            timestamp,
            checksum,
        }
    }

    pub fn verify(&self) -> bool {
        checksum(self.kind, &self.payload, self.timestamp) == self.checksum
    }
}

/// Open log file positioned for appending.
#[derive(Debug)]
pub struct SessionLog {
    path: PathBuf,
    file: File,
}

impl SessionLog {
    /// Creates a new log; fails if `path` exists.
    pub fn create(path: impl AsRef<Path>) -> Result<Self, SessionError> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new().write(true).create_new(true).open(&path)?;
        Ok(Self { path, file })
    }

    /// Reads all intact records. A final line that is incomplete or fails its
    /// checksum is a torn write: it is dropped and truncated away so later
    /// appends start on a clean line. Damage anywhere else is an error.
    pub fn open(path: impl AsRef<Path>) -> Result<(Self, Vec<LogRecord>), SessionError> {
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new().read(true).write(true).open(&path)?;
        let mut records = Vec::new();
        let mut good_len = 0u64;
        let mut torn: Option<usize> = None;
        let mut reader = BufReader::new(&file);
        let mut line = String::new();
        let mut number = 0;
        loop {
            line.clear();
            let n = reader.read_line(&mut line)?;
            if n == 0 {
                break;
            }
            number += 1;
            if let Some(bad) = torn {
                return Err(SessionError::Log {
                    line: bad,
                    message: "corrupt record before the end of the log".into(),
                });
            }
            let complete = line.ends_with('\n');
            match serde_json::from_str::<LogRecord>(line.trim_end()) {
                Ok(record) if complete && record.verify() => {
                    records.push(record);
                    good_len += n as u64;
                }
                _ => torn = Some(number),
            }
        }
        drop(reader);
        if torn.is_some() {
            file.set_len(good_len)?;
        }
        file.seek(SeekFrom::End(0))?;
        Ok((Self { path, file }, records))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Writes one record as a single line and flushes it to disk.
    pub fn append(&mut self, record: &LogRecord) -> Result<(), SessionError> {
        let mut line = serde_json::to_string(record).map_err(|e| SessionError::Log {
            line: 0,
            message: e.to_string(),
        })?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.sync_data()?;
        Ok(())
    }
}
