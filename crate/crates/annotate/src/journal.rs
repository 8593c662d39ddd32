//! Judgments and their append-only log.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{AnnotateError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Correct,
    Incorrect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Templated {
    Yes,
    No,
    Unsure,
}

/// One annotator's answer on one task. `verdict` is present exactly when the
/// task's prediction is a concrete template.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub task_id: u64,
    pub annotator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    pub is_templated: Templated,
    /// Milliseconds since the Unix epoch; stamped by the server when absent.
    #[serde(default)]
    pub timestamp: u64,
}

/// Line-delimited JSON log, synced to disk after every record.
pub struct Journal {
    path: PathBuf,
    file: File,
}

impl Journal {
    /// Opens (creating if needed) the log and returns it with every record
    /// already in it. A final line without a newline is a write interrupted
    /// by a crash; it is dropped and truncated away.
    pub fn open(path: &Path) -> Result<(Self, Vec<Judgment>)> {
        let mut records = Vec::new();
        let mut keep_bytes = 0u64;
        if path.exists() {
            let mut reader = BufReader::new(File::open(path)?);
            let mut line = String::new();
            let mut line_no = 0;
            loop {
                line.clear();
                let n = reader.read_line(&mut line)?;
                if n == 0 {
                    break;
                }
                line_no += 1;
                if !line.ends_with('\n') {
                    log::warn!(
                        "dropping incomplete final record at line {line_no} of {}",
                        path.display()
                    );
                    break;
                }
                keep_bytes += n as u64;
                if line.trim().is_empty() {
                    continue;
                }
                let j = serde_json::from_str(&line).map_err(|e| AnnotateError::CorruptLog {
                    line: line_no,
                    reason: e.to_string(),
                })?;
                records.push(j);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        if file.metadata()?.len() != keep_bytes {
            file.set_len(keep_bytes)?;
        }
        Ok((
            Self {
                path: path.to_owned(),
                file,
            },
            records,
        ))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, j: &Judgment) -> Result<()> {
        let mut line = serde_json::to_vec(j)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()?;
        Ok(())
    }
}
