//! Flat-file persistence: one immutable JSON file per session and an
//! append-only JSON-lines response log per session.
//!
//! ```text
//! <data-dir>/sessions/<id>.json
//! <data-dir>/responses/<id>.jsonl
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use cftraj::study::{Response, ResponseLog, StudySession, RESPONSE_VERSION};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: malformed record: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("invalid id `{0}`")]
    InvalidId(String),
}

/// One line of a response log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub version: u32,
    pub participant_id: String,
    pub question: usize,
    pub choice: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp_ms: Option<u64>,
}

pub struct Store {
    root: PathBuf,
    writers: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

/// Ids end up in file names, so only a conservative alphabet is allowed.
pub fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 128 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

fn sync_dir(dir: &Path) -> Result<(), StoreError> {
    File::open(dir).and_then(|d| d.sync_all()).map_err(io_err(dir))
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        for sub in ["sessions", "responses"] {
            let d = root.join(sub);
            fs::create_dir_all(&d).map_err(io_err(&d))?;
        }
        Ok(Store { root, writers: Mutex::new(HashMap::new()) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn session_path(&self, id: &str) -> PathBuf {
        self.root.join("sessions").join(format!("{id}.json"))
    }

    fn responses_path(&self, id: &str) -> PathBuf {
        self.root.join("responses").join(format!("{id}.jsonl"))
    }

    /// Persists `session` under a fresh id derived from its content id
    /// (`<content-id>-<n>`, smallest unused `n`) and returns that id. The
    /// file is written to a temporary name, synced, then linked into place,
    /// so a session file is either complete or absent.
    pub fn create_session(&self, session: &mut StudySession) -> Result<String, StoreError> {
        let base = session.session_id.clone();
        if !valid_id(&base) {
            return Err(StoreError::InvalidId(base));
        }
        let dir = self.root.join("sessions");
        for n in 0.. {
            let id = format!("{base}-{n}");
            let path = self.session_path(&id);
            if path.exists() {
                continue;
            }
            session.session_id = id.clone();
            let tmp = dir.join(format!(".{id}.tmp"));
            let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
            f.write_all(session.to_json().as_bytes()).map_err(io_err(&tmp))?;
            f.sync_all().map_err(io_err(&tmp))?;
            let linked = fs::hard_link(&tmp, &path);
            let _ = fs::remove_file(&tmp);
            match linked {
                Ok(()) => {
                    sync_dir(&dir)?;
                    return Ok(id);
                }
                // lost a race for this id
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(StoreError::Io { path, source: e }),
            }
        }
        unreachable!("session id space exhausted")
    }

    pub fn session(&self, id: &str) -> Result<Option<StudySession>, StoreError> {
        if !valid_id(id) {
            return Ok(None);
        }
        let path = self.session_path(id);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(StoreError::Io { path, source: e }),
        };
        serde_json::from_str(&text).map(Some).map_err(|e| StoreError::Corrupt { path, message: e.to_string() })
    }

    pub fn session_ids(&self) -> Result<Vec<String>, StoreError> {
        let dir = self.root.join("sessions");
        let mut ids: Vec<String> = fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".json")).map(str::to_owned))
            .filter(|n| !n.starts_with('.'))
            .collect();
        ids.sort();
        Ok(ids)
    }

    fn writer(&self, id: &str) -> Arc<Mutex<()>> {
        let mut w = self.writers.lock().unwrap_or_else(|e| e.into_inner());
        w.entry(id.to_owned()).or_default().clone()
    }

    /// Appends one batch of answers and syncs it to disk before returning.
    /// Writes to one session are serialized; a torn trailing line left by a
    /// crash is cut off before the next append. Returns how many distinct
    /// questions this participant has answered.
    pub fn append_responses(&self, id: &str, participant_id: &str, responses: &[Response]) -> Result<usize, StoreError> {
        if !valid_id(id) {
            return Err(StoreError::InvalidId(id.into()));
        }
        let lock = self.writer(id);
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        let path = self.responses_path(id);
        let mut f = OpenOptions::new().read(true).append(true).create(true).open(&path).map_err(io_err(&path))?;
        let mut existing = Vec::new();
        f.read_to_end(&mut existing).map_err(io_err(&path))?;
        if !existing.is_empty() && existing.last() != Some(&b'\n') {
            let keep = existing.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
            f.set_len(keep as u64).map_err(io_err(&path))?;
            f.seek(SeekFrom::End(0)).map_err(io_err(&path))?;
            existing.truncate(keep);
        }
        let mut batch = String::new();
        for r in responses {
            let rec = ResponseRecord {
                version: RESPONSE_VERSION,
                participant_id: participant_id.into(),
                question: r.question,
                choice: r.choice,
                timestamp_ms: r.timestamp_ms,
            };
            batch.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            batch.push('\n');
        }
        f.write_all(batch.as_bytes()).map_err(io_err(&path))?;
        f.sync_data().map_err(io_err(&path))?;
        existing.extend_from_slice(batch.as_bytes());
        let records = parse_records(&path, &existing)?;
        Ok(answered(&records, participant_id))
    }

    /// Response logs for session `id`, one per participant in id order.
    pub fn responses(&self, id: &str) -> Result<Vec<ResponseLog>, StoreError> {
        if !valid_id(id) {
            return Ok(vec![]);
        }
        let path = self.responses_path(id);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(vec![]),
            Err(e) => return Err(StoreError::Io { path, source: e }),
        };
        let mut logs: BTreeMap<String, ResponseLog> = BTreeMap::new();
        for rec in parse_records(&path, &bytes)? {
            logs.entry(rec.participant_id.clone())
                .or_insert_with(|| ResponseLog::new(id, rec.participant_id.clone()))
                .responses
                .push(Response { question: rec.question, choice: rec.choice, timestamp_ms: rec.timestamp_ms });
        }
        Ok(logs.into_values().collect())
    }
}

/// Complete lines only: a trailing fragment without a newline is an
/// in-flight or torn write and is ignored.
fn parse_records(path: &Path, bytes: &[u8]) -> Result<Vec<ResponseRecord>, StoreError> {
    let complete = bytes.iter().rposition(|b| *b == b'\n').map_or(&bytes[..0], |i| &bytes[..=i]);
    let text = std::str::from_utf8(complete).map_err(|e| StoreError::Corrupt { path: path.into(), message: e.to_string() })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| StoreError::Corrupt { path: path.into(), message: e.to_string() }))
        .collect()
}

fn answered(records: &[ResponseRecord], participant_id: &str) -> usize {
    let mut qs: Vec<usize> = records.iter().filter(|r| r.participant_id == participant_id).map(|r| r.question).collect();
    qs.sort_unstable();
    qs.dedup();
    qs.len()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resp(question: usize, choice: usize) -> Response {
        Response { question, choice, timestamp_ms: None }
    }

    #[test]
    fn ids_are_restricted() {
        assert!(valid_id("s-0123abcd-0"));
        assert!(!valid_id("../etc"));
        assert!(!valid_id("a.b"));
        assert!(!valid_id(""));
    }

    #[test]
    fn append_counts_and_groups() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        assert_eq!(store.append_responses("s-1", "p", &[resp(0, 1), resp(1, 2)]).unwrap(), 2);
        assert_eq!(store.append_responses("s-1", "p", &[resp(1, 2)]).unwrap(), 2);
        assert_eq!(store.append_responses("s-1", "q", &[resp(0, 0)]).unwrap(), 1);
        let logs = store.responses("s-1").unwrap();
        assert_eq!(logs.len(), 2);
        assert_eq!(logs[0].participant_id, "p");
        assert_eq!(logs[0].responses.len(), 3);
        assert!(store.responses("s-2").unwrap().is_empty());
    }

    #[test]
    fn torn_tail_is_ignored_then_repaired() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        store.append_responses("s-1", "p", &[resp(0, 1)]).unwrap();
        let path = dir.path().join("responses/s-1.jsonl");
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(br#"{"version":1,"partici"#).unwrap();
        assert_eq!(store.responses("s-1").unwrap()[0].responses.len(), 1);
        store.append_responses("s-1", "p", &[resp(1, 0)]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(store.responses("s-1").unwrap()[0].responses.len(), 2);
    }
}
