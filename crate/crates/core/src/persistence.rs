//! Append-only journal, snapshots and on-disk store directories.
//!
//! Journal lines look like
//!
//! ```text
//! {"seq":1,"ts":1712345678901,"op":"def_register","payload":{...}}
//! ```
//!
//! with the top-level keys in exactly that order and the payload in canonical
//! form. Snapshot files hold one canonical document followed by a
//! `#state_hash=<hex>` line. Timestamps are informational and never hashed.

use std::fs::{self, File, OpenOptions, TryLockError};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::canonical::to_canonical_string;
use crate::error::{Error, Result};
use crate::state::{Op, StateDoc};

pub const JOURNAL_FILE: &str = "journal.ndjson";
pub const SNAPSHOT_DIR: &str = "snapshots";
pub const LOCK_FILE: &str = "LOCK";
const HASH_PREFIX: &str = "#state_hash=";

#[derive(Debug, Clone, PartialEq)]
pub struct JournalRecord {
    pub seq: u64,
    pub ts: u64,
    pub op: Op,
}

#[derive(Deserialize)]
struct RawRecord {
    seq: u64,
    ts: u64,
    op: String,
    payload: serde_json::Value,
}

impl JournalRecord {
    pub fn to_line(&self) -> String {
        let tagged = serde_json::to_value(&self.op).expect("ops are always representable");
        let payload = tagged.get("payload").expect("adjacently tagged op");
        format!(
            "{{\"seq\":{},\"ts\":{},\"op\":{},\"payload\":{}}}",
            self.seq,
            self.ts,
            serde_json::to_string(self.op.kind()).expect("string"),
            to_canonical_string(payload)
        )
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| Error::MalformedRecord(format!("{e}: {line}")))?;
        let tagged = serde_json::json!({ "op": raw.op, "payload": raw.payload });
        let op: Op =
            serde_json::from_value(tagged).map_err(|e| Error::MalformedRecord(format!("seq {}: {e}", raw.seq)))?;
        Ok(JournalRecord { seq: raw.seq, ts: raw.ts, op })
    }
}

/// Reads a newline-delimited journal; blank lines are skipped.
pub fn read_journal(reader: impl BufRead) -> Result<Vec<JournalRecord>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::StorageFailure(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(JournalRecord::parse_line(&line)?);
    }
    Ok(out)
}

pub fn read_journal_file(path: &Path) -> Result<Vec<JournalRecord>> {
    match File::open(path) {
        Ok(f) => read_journal(BufReader::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(Error::StorageFailure(format!("{}: {e}", path.display()))),
    }
}

/// Checks that records are numbered 1, 2, 3, ... without gaps.
pub fn check_contiguous(records: &[JournalRecord]) -> Result<()> {
    for (i, r) in records.iter().enumerate() {
        let expected = i as u64 + 1;
        if r.seq != expected {
            return Err(Error::GapInJournal { expected, found: r.seq });
        }
    }
    Ok(())
}

/// Durable destination for journal lines.
pub trait JournalSink: Send {
    fn append(&mut self, line: &str) -> std::io::Result<()>;
}

/// Appends lines to a file, flushing after each one.
pub struct FileSink {
    file: File,
}

impl FileSink {
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::StorageFailure(format!("{}: {e}", path.display())))?;
        Ok(FileSink { file })
    }
}

impl JournalSink for FileSink {
    fn append(&mut self, line: &str) -> std::io::Result<()> {
        let mut buf = String::with_capacity(line.len() + 1);
        buf.push_str(line);
        buf.push('\n');
        self.file.write_all(buf.as_bytes())?;
        self.file.flush()
    }
}

/// The in-memory journal plus an optional durable sink.
pub struct Journal {
    /// Sequence number preceding the first held record (non-zero when the
    /// journal continues from a snapshot).
    base: u64,
    records: Vec<JournalRecord>,
    sink: Option<Box<dyn JournalSink>>,
}

impl Journal {
    pub fn new() -> Self {
        Journal { base: 0, records: Vec::new(), sink: None }
    }

    pub fn from_records(base: u64, records: Vec<JournalRecord>) -> Self {
        Journal { base, records, sink: None }
    }

    pub fn set_sink(&mut self, sink: Box<dyn JournalSink>) {
        self.sink = Some(sink);
    }

    pub fn last_seq(&self) -> u64 {
        self.base + self.records.len() as u64
    }

    pub fn records(&self) -> &[JournalRecord] {
        &self.records
    }

    /// Writes the next record through the sink first; only a durable record is
    /// added to memory.
    pub fn append(&mut self, op: Op) -> Result<u64> {
        let record = JournalRecord { seq: self.last_seq() + 1, ts: now_millis(), op };
        if let Some(sink) = self.sink.as_mut() {
            sink.append(&record.to_line()).map_err(|e| Error::StorageFailure(e.to_string()))?;
        }
        let seq = record.seq;
        self.records.push(record);
        Ok(seq)
    }
}

impl Default for Journal {
    fn default() -> Self {
        Self::new()
    }
}

fn now_millis() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub as_of_seq: u64,
    pub state: StateDoc,
    #[serde(skip)]
    pub state_hash: String,
}

impl Snapshot {
    pub fn new(as_of_seq: u64, state: StateDoc) -> Self {
        let state_hash = state.hash();
        Snapshot { as_of_seq, state, state_hash }
    }

    /// Canonical document line followed by the hash line.
    pub fn encode(&self) -> String {
        format!("{}\n{HASH_PREFIX}{}\n", to_canonical_string(self), self.state_hash)
    }

    /// Parses an encoded snapshot and checks the recorded hash.
    pub fn decode(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.is_empty());
        let body = lines.next().ok_or_else(|| Error::MalformedRecord("empty snapshot".into()))?;
        let recorded = lines
            .next()
            .and_then(|l| l.strip_prefix(HASH_PREFIX))
            .ok_or_else(|| Error::MalformedRecord("snapshot lacks a state_hash line".into()))?;
        let mut snapshot: Snapshot = serde_json::from_str(body).map_err(|e| Error::MalformedRecord(e.to_string()))?;
        snapshot.state_hash = snapshot.state.hash();
        if snapshot.state_hash != recorded {
            return Err(Error::MalformedRecord(format!(
                "snapshot hash {recorded} does not match content {}",
                snapshot.state_hash
            )));
        }
        Ok(snapshot)
    }
}

/// A store directory: journal file, snapshot folder and an advisory lock held
/// for the lifetime of this value.
pub struct StoreDir {
    root: PathBuf,
    _lock: File,
}

impl StoreDir {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::StorageFailure(format!("{}: {e}", root.display())))?;
        let lock_path = root.join(LOCK_FILE);
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(|e| Error::StorageFailure(format!("{}: {e}", lock_path.display())))?;
        match lock.try_lock() {
            Ok(()) => {}
            Err(TryLockError::WouldBlock) => return Err(Error::StoreLocked(root.display().to_string())),
            Err(TryLockError::Error(e)) => return Err(Error::StorageFailure(e.to_string())),
        }
        Ok(StoreDir { root, _lock: lock })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn journal_path(&self) -> PathBuf {
        self.root.join(JOURNAL_FILE)
    }

    pub fn read_journal(&self) -> Result<Vec<JournalRecord>> {
        read_journal_file(&self.journal_path())
    }

    pub fn sink(&self) -> Result<FileSink> {
        FileSink::open(&self.journal_path())
    }

    /// True when the directory has no journal records yet.
    pub fn is_fresh(&self) -> Result<bool> {
        Ok(self.read_journal()?.is_empty())
    }

    /// Writes records verbatim, replacing any journal file. Used to seed a
    /// fresh directory from a replayed prefix.
    pub fn write_journal(&self, records: &[JournalRecord]) -> Result<()> {
        let mut text = String::new();
        for r in records {
            text.push_str(&r.to_line());
            text.push('\n');
        }
        fs::write(self.journal_path(), text).map_err(|e| Error::StorageFailure(e.to_string()))
    }

    pub fn write_snapshot(&self, snapshot: &Snapshot) -> Result<PathBuf> {
        let dir = self.root.join(SNAPSHOT_DIR);
        fs::create_dir_all(&dir).map_err(|e| Error::StorageFailure(e.to_string()))?;
        let path = dir.join(format!("snapshot-{:010}.json", snapshot.as_of_seq));
        fs::write(&path, snapshot.encode()).map_err(|e| Error::StorageFailure(e.to_string()))?;
        Ok(path)
    }
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot> {
    let text = fs::read_to_string(path).map_err(|e| Error::StorageFailure(format!("{}: {e}", path.display())))?;
    Snapshot::decode(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::{InstanceId, LayerId, OverlayId};
    use crate::value::Value;
    use proptest::prelude::*;

    #[test]
    fn line_layout() {
        let r = JournalRecord {
            seq: 3,
            ts: 42,
            op: Op::LayerWrite {
                layer_id: LayerId::from_counter(1),
                key: "policy.max".into(),
                value: Some(Value::Integer(5)),
                layer_version: 1,
            },
        };
        assert_eq!(
            r.to_line(),
            r#"{"seq":3,"ts":42,"op":"layer_write","payload":{"key":"policy.max","layer_id":"L00000001","layer_version":1,"value":5}}"#
        );
        assert_eq!(JournalRecord::parse_line(&r.to_line()).unwrap(), r);
    }

    #[test]
    fn gaps_and_garbage() {
        let rec =
            |seq| JournalRecord { seq, ts: 0, op: Op::InstanceRetire { instance_id: InstanceId::from_counter(1) } };
        assert!(check_contiguous(&[rec(1), rec(2)]).is_ok());
        assert_eq!(check_contiguous(&[rec(1), rec(3)]).unwrap_err().code(), "GAP_IN_JOURNAL");
        assert_eq!(check_contiguous(&[rec(2)]).unwrap_err().code(), "GAP_IN_JOURNAL");
        assert_eq!(JournalRecord::parse_line("{nope").unwrap_err().code(), "MALFORMED_RECORD");
        assert_eq!(
            JournalRecord::parse_line(r#"{"seq":1,"ts":0,"op":"teleport","payload":{}}"#).unwrap_err().code(),
            "MALFORMED_RECORD"
        );
    }

    struct Failing;
    impl JournalSink for Failing {
        fn append(&mut self, _: &str) -> std::io::Result<()> {
            Err(std::io::Error::other("disk full"))
        }
    }

    #[test]
    fn failed_sink_appends_nothing() {
        let mut j = Journal::new();
        j.set_sink(Box::new(Failing));
        let err = j.append(Op::InstanceRetire { instance_id: InstanceId::from_counter(1) }).unwrap_err();
        assert_eq!(err.code(), "STORAGE_FAILURE");
        assert_eq!(j.last_seq(), 0);
    }

    #[test]
    fn store_dir_lock_is_exclusive() {
        let tmp = tempfile::tempdir().unwrap();
        let first = StoreDir::open(tmp.path()).unwrap();
        assert_eq!(StoreDir::open(tmp.path()).err().unwrap().code(), "STORE_LOCKED");
        drop(first);
        StoreDir::open(tmp.path()).unwrap();
    }

    fn arb_value() -> impl Strategy<Value = Value> {
        prop_oneof![
            any::<i64>().prop_map(Value::Integer),
            (-1e9f64..1e9).prop_map(Value::Decimal),
            "[ -~]{0,12}".prop_map(Value::Text),
            any::<bool>().prop_map(Value::Boolean),
        ]
    }

    proptest! {
        #[test]
        fn record_lines_round_trip_bit_exact(
            seq in 1u64..1_000_000,
            ts in any::<u64>(),
            key in "[a-z]{1,5}(\\.[a-z]{1,5}){0,2}",
            value in prop::option::of(arb_value()),
        ) {
            let r = JournalRecord {
                seq,
                ts,
                op: Op::OverlayApply {
                    instance_id: InstanceId::from_counter(7),
                    overlay_id: OverlayId::from_counter(7),
                    key,
                    value,
                },
            };
            let line = r.to_line();
            let back = JournalRecord::parse_line(&line).unwrap();
            prop_assert_eq!(back.to_line(), line);
            prop_assert_eq!(back, r);
        }
    }
}
