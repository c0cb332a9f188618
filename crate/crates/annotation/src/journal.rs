use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{AnnotationError, Result};

pub const JOURNAL_FILE: &str = "journal.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct Record<E> {
    pub seq: u64,
    pub event: E,
}

/// Append-only JSONL log. Each append is flushed and fsynced before it returns.
#[derive(Debug)]
pub struct Journal {
    dir: PathBuf,
    file: File,
    /// Number of bytes dropped from a torn final line when the journal was opened.
    pub truncated_bytes: u64,
}

pub struct Loaded<E, S> {
    pub journal: Journal,
    pub snapshot: Option<(u64, S)>,
    pub records: Vec<Record<E>>,
}

impl Journal {
    pub fn open<E: DeserializeOwned, S: DeserializeOwned>(dir: &Path) -> Result<Loaded<E, S>> {
        fs::create_dir_all(dir)?;
        let path = dir.join(JOURNAL_FILE);
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(&path)?;
        let mut records = Vec::new();
        let mut good_len = 0u64;
        let total = file.metadata()?.len();
        {
            let mut reader = BufReader::new(&file);
            let mut line = String::new();
            let mut lineno = 0usize;
            loop {
                line.clear();
                let n = reader.read_line(&mut line)?;
                if n == 0 {
                    break;
                }
                lineno += 1;
                let complete = line.ends_with('\n');
                let text = line.trim_end();
                if text.is_empty() && complete {
                    good_len += n as u64;
                    continue;
                }
                match serde_json::from_str::<Record<E>>(text) {
                    Ok(r) if complete => {
                        if let Some(prev) = records.last().map(|p: &Record<E>| p.seq) {
                            if r.seq != prev + 1 {
                                return Err(AnnotationError::Journal {
                                    line: lineno,
                                    message: format!("sequence jumps from {prev} to {}", r.seq),
                                });
                            }
                        }
                        records.push(r);
                        good_len += n as u64;
                    }
                    // An unterminated last line was never acknowledged.
                    _ if good_len + n as u64 == total => break,
                    Ok(_) => unreachable!("only the final line can lack a newline"),
                    Err(e) => return Err(AnnotationError::Journal { line: lineno, message: e.to_string() }),
                }
            }
        }
        let truncated_bytes = total - good_len;
        if truncated_bytes > 0 {
            file.set_len(good_len)?;
            file.sync_all()?;
        }
        file.seek(SeekFrom::End(0))?;
        let snapshot = read_snapshot(dir)?;
        Ok(Loaded { journal: Journal { dir: dir.to_path_buf(), file, truncated_bytes }, snapshot, records })
    }

    pub fn append<E: Serialize>(&mut self, record: &Record<E>) -> Result<()> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()?;
        Ok(())
    }

    /// Atomically replaces the snapshot: write to a temp file, fsync, rename.
    pub fn write_snapshot<S: Serialize>(&self, seq: u64, state: &S) -> Result<()> {
        let tmp = self.dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        {
            let mut f = File::create(&tmp)?;
            serde_json::to_writer(&mut f, &SnapshotRef { seq, state })?;
            f.write_all(b"\n")?;
            f.sync_all()?;
        }
        fs::rename(&tmp, self.dir.join(SNAPSHOT_FILE))?;
        if let Ok(d) = File::open(&self.dir) {
            let _ = d.sync_all();
        }
        Ok(())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

#[derive(Serialize)]
struct SnapshotRef<'a, S> {
    seq: u64,
    state: &'a S,
}

#[derive(Deserialize)]
struct SnapshotOwned<S> {
    seq: u64,
    state: S,
}

fn read_snapshot<S: DeserializeOwned>(dir: &Path) -> Result<Option<(u64, S)>> {
    let path = dir.join(SNAPSHOT_FILE);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    // A damaged snapshot is recoverable from the full journal.
    Ok(serde_json::from_str::<SnapshotOwned<S>>(&text).ok().map(|s| (s.seq, s.state)))
}
