//! Content-addressed, append-only dataset per study.
//!
//! Layout under the store root:
//!
//! ```text
//! data/{study_id}/objects/{aa}/{remaining 62 hex chars}
//! data/{study_id}/log
//! ```
//!
//! Objects are addressed by the SHA-256 of their bytes. The log is a
//! sequence of length-prefixed commit records:
//!
//! ```text
//! commit {commit_id} {record_len}\n
//! {record bytes}
//! ```
//!
//! A record is UTF-8 text with one `key value` field per line, keys in
//! sorted order, every line newline-terminated:
//!
//! ```text
//! added {logical_path} {object_id}      ("added -" for the root commit)
//! message {text, with \ as \\ and newline as \n}
//! parent {commit_id}                    ("parent -" for the root commit)
//! timestamp {RFC 3339, UTC, Z suffix}
//! ```
//!
//! `commit_id` is the lowercase hex SHA-256 of the record bytes. Each commit
//! adds exactly one manifest entry; the manifest at a commit is the set of
//! entries added along its parent chain, so the id of a commit transitively
//! covers its whole manifest.

use chrono::{DateTime, SecondsFormat, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("dataset {0} is already initialized")]
    AlreadyInitialized(String),
    #[error("dataset {0} is not initialized")]
    NotInitialized(String),
    #[error("refusing to store an empty object")]
    EmptyObject,
    #[error("unknown object {0}")]
    UnknownObject(ObjectId),
    #[error("logical path {0} is already committed")]
    PathCollision(String),
    #[error("invalid logical path {0:?}")]
    InvalidPath(String),
    #[error("invalid object id {0:?}")]
    InvalidObjectId(String),
    #[error("commit log for {study} is corrupt: {detail}")]
    CorruptLog { study: String, detail: String },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl StoreError {
    pub fn code(&self) -> &'static str {
        match self {
            StoreError::AlreadyInitialized(_) => "AlreadyInitialized",
            StoreError::NotInitialized(_) => "NotInitialized",
            StoreError::EmptyObject => "EmptyObject",
            StoreError::UnknownObject(_) => "UnknownObject",
            StoreError::PathCollision(_) => "PathCollision",
            StoreError::InvalidPath(_) => "InvalidPath",
            StoreError::InvalidObjectId(_) => "InvalidObjectId",
            StoreError::CorruptLog { .. } => "CorruptLog",
            StoreError::Io(_) => "Internal",
        }
    }
}

type Result<T> = std::result::Result<T, StoreError>;

/// Hex SHA-256 digest of an object's bytes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ObjectId(String);

impl ObjectId {
    pub fn of(bytes: &[u8]) -> Self {
        ObjectId(hex::encode(Sha256::digest(bytes)))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s.len() == 64 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
            Ok(ObjectId(s.to_owned()))
        } else {
            Err(StoreError::InvalidObjectId(s.to_owned()))
        }
    }

    fn shard(&self) -> (&str, &str) {
        self.0.split_at(2)
    }
}

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for ObjectId {
    type Error = StoreError;
    fn try_from(s: String) -> Result<Self> {
        ObjectId::parse(&s)
    }
}

impl From<ObjectId> for String {
    fn from(o: ObjectId) -> String {
        o.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub object: ObjectId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Commit {
    pub commit_id: String,
    pub parent_id: Option<String>,
    pub added: Option<ManifestEntry>,
    pub timestamp: DateTime<Utc>,
    pub message: String,
}

fn escape_message(m: &str) -> String {
    m.replace('\\', "\\\\").replace('\n', "\\n")
}

fn unescape_message(m: &str) -> Option<String> {
    let mut out = String::with_capacity(m.len());
    let mut chars = m.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next()? {
                '\\' => out.push('\\'),
                'n' => out.push('\n'),
                _ => return None,
            }
        } else {
            out.push(c);
        }
    }
    Some(out)
}

/// Canonical record bytes for a commit (see module docs).
pub fn encode_commit_record(
    parent_id: Option<&str>,
    added: Option<&ManifestEntry>,
    timestamp: DateTime<Utc>,
    message: &str,
) -> String {
    let added = match added {
        Some(e) => format!("{} {}", e.path, e.object),
        None => "-".to_owned(),
    };
    format!(
        "added {}\nmessage {}\nparent {}\ntimestamp {}\n",
        added,
        escape_message(message),
        parent_id.unwrap_or("-"),
        timestamp.to_rfc3339_opts(SecondsFormat::AutoSi, true)
    )
}

fn hash_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn decode_commit_record(record: &[u8]) -> Option<Commit> {
    let text = std::str::from_utf8(record).ok()?;
    let body = text.strip_suffix('\n')?;
    let mut lines = body.split('\n');
    let added = lines.next()?.strip_prefix("added ")?;
    let message = lines.next()?.strip_prefix("message ")?;
    let parent = lines.next()?.strip_prefix("parent ")?;
    let timestamp = lines.next()?.strip_prefix("timestamp ")?;
    if lines.next().is_some() {
        return None;
    }
    let added = if added == "-" {
        None
    } else {
        let (path, oid) = added.rsplit_once(' ')?;
        Some(ManifestEntry {
            path: path.to_owned(),
            object: ObjectId::parse(oid).ok()?,
        })
    };
    let parent_id = if parent == "-" {
        None
    } else {
        Some(parent.to_owned())
    };
    let timestamp = DateTime::parse_from_rfc3339(timestamp).ok()?.with_timezone(&Utc);
    let message = unescape_message(message)?;
    let commit = Commit {
        commit_id: hash_hex(record),
        parent_id,
        added,
        timestamp,
        message,
    };
    // Reject non-canonical spellings of the same fields.
    let canonical = encode_commit_record(
        commit.parent_id.as_deref(),
        commit.added.as_ref(),
        commit.timestamp,
        &commit.message,
    );
    (canonical.as_bytes() == record).then_some(commit)
}

fn valid_logical_path(path: &str) -> bool {
    !path.is_empty()
        && !path.starts_with('/')
        && path.split('/').all(|seg| !seg.is_empty() && seg != "." && seg != "..")
        && path
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.' | '/'))
}

/// One parsed log record, or the position where parsing gave up.
enum LogItem {
    Record { header_id: String, bytes: Vec<u8> },
    Truncated { header_id: Option<String> },
}

fn scan_log(bytes: &[u8]) -> Vec<LogItem> {
    let mut items = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let Some(nl) = bytes[pos..].iter().position(|&b| b == b'\n') else {
            items.push(LogItem::Truncated { header_id: header_id_prefix(&bytes[pos..]) });
            break;
        };
        let header = &bytes[pos..pos + nl];
        let parsed = std::str::from_utf8(header).ok().and_then(|h| {
            let mut parts = h.split(' ');
            let tag = parts.next()?;
            let id = parts.next()?;
            let len: usize = parts.next()?.parse().ok()?;
            (tag == "commit" && parts.next().is_none()).then(|| (id.to_owned(), len))
        });
        let Some((header_id, len)) = parsed else {
            items.push(LogItem::Truncated { header_id: header_id_prefix(header) });
            break;
        };
        let start = pos + nl + 1;
        if start + len > bytes.len() {
            items.push(LogItem::Truncated { header_id: Some(header_id) });
            break;
        }
        items.push(LogItem::Record {
            header_id,
            bytes: bytes[start..start + len].to_vec(),
        });
        pos = start + len;
    }
    items
}

fn header_id_prefix(header: &[u8]) -> Option<String> {
    let h = std::str::from_utf8(header).ok()?;
    let id = h.strip_prefix("commit ")?.split(' ').next()?;
    (id.len() == 64).then(|| id.to_owned())
}

/// Result of an integrity check. Empty lists mean a clean dataset.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FsckReport {
    /// Object files whose bytes no longer hash to their name.
    pub corrupt_objects: Vec<ObjectId>,
    /// Commits that are truncated, unparsable, re-hash differently or break
    /// the parent chain.
    pub corrupt_commits: Vec<String>,
    /// Manifest entries whose object file is absent.
    pub missing_objects: Vec<ObjectId>,
    /// Files under objects/ that do not follow the layout.
    pub stray_files: Vec<String>,
    /// Set when the log ends in bytes that could not be attributed to any
    /// commit header.
    pub unreadable_tail: bool,
}

impl FsckReport {
    pub fn is_clean(&self) -> bool {
        self.corrupt_objects.is_empty()
            && self.corrupt_commits.is_empty()
            && self.missing_objects.is_empty()
            && self.stray_files.is_empty()
            && !self.unreadable_tail
    }
}

struct Dataset {
    dir: PathBuf,
    head: String,
    paths: HashMap<String, ObjectId>,
    log: File,
}

impl Dataset {
    fn object_path(&self, oid: &ObjectId) -> PathBuf {
        let (shard, rest) = oid.shard();
        self.dir.join("objects").join(shard).join(rest)
    }
}

/// Versioned content-addressed store. Cheap to share behind an `Arc`.
pub struct Datastore {
    root: PathBuf,
    datasets: Mutex<HashMap<String, Arc<Mutex<Dataset>>>>,
    /// Datasets whose log failed to load at open, with the reason. They
    /// refuse writes but can still be checked with [`Datastore::fsck`].
    damaged: BTreeMap<String, String>,
    tmp_counter: AtomicU64,
}

impl Datastore {
    /// Opens (or creates) a store rooted at `root`, loading any datasets
    /// already on disk.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("data"))?;
        let mut store = Datastore {
            root,
            datasets: Mutex::new(HashMap::new()),
            damaged: BTreeMap::new(),
            tmp_counter: AtomicU64::new(0),
        };
        let mut loaded = HashMap::new();
        for entry in fs::read_dir(store.root.join("data"))? {
            let entry = entry?;
            let study = entry.file_name().to_string_lossy().into_owned();
            if entry.path().join("log").is_file() {
                match store.load_dataset(&study) {
                    Ok(ds) => {
                        loaded.insert(study, Arc::new(Mutex::new(ds)));
                    }
                    Err(StoreError::CorruptLog { detail, .. }) => {
                        store.damaged.insert(study, detail);
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        *store.datasets.lock() = loaded;
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn study_dir(&self, study_id: &str) -> PathBuf {
        self.root.join("data").join(study_id)
    }

    fn load_dataset(&self, study_id: &str) -> Result<Dataset> {
        let dir = self.study_dir(study_id);
        let commits = self.read_history(study_id)?;
        let head = commits
            .last()
            .map(|c| c.commit_id.clone())
            .ok_or_else(|| StoreError::CorruptLog {
                study: study_id.to_owned(),
                detail: "empty log".into(),
            })?;
        let paths = commits
            .iter()
            .filter_map(|c| c.added.clone())
            .map(|e| (e.path, e.object))
            .collect();
        let log = OpenOptions::new().append(true).open(dir.join("log"))?;
        Ok(Dataset {
            dir,
            head,
            paths,
            log,
        })
    }

    fn dataset(&self, study_id: &str) -> Result<Arc<Mutex<Dataset>>> {
        if let Some(detail) = self.damaged.get(study_id) {
            return Err(StoreError::CorruptLog {
                study: study_id.to_owned(),
                detail: detail.clone(),
            });
        }
        self.datasets
            .lock()
            .get(study_id)
            .cloned()
            .ok_or_else(|| StoreError::NotInitialized(study_id.to_owned()))
    }

    /// Studies found on disk whose log could not be loaded.
    pub fn damaged_datasets(&self) -> Vec<&str> {
        self.damaged.keys().map(String::as_str).collect()
    }

    pub fn is_initialized(&self, study_id: &str) -> bool {
        self.datasets.lock().contains_key(study_id)
    }

    pub fn init_dataset(&self, study_id: &str, timestamp: DateTime<Utc>) -> Result<Commit> {
        let mut datasets = self.datasets.lock();
        let dir = self.study_dir(study_id);
        if datasets.contains_key(study_id) || dir.join("log").exists() {
            return Err(StoreError::AlreadyInitialized(study_id.to_owned()));
        }
        fs::create_dir_all(dir.join("objects"))?;
        fs::create_dir_all(dir.join("tmp"))?;
        let message = format!("init {study_id}");
        let record = encode_commit_record(None, None, timestamp, &message);
        let commit_id = hash_hex(record.as_bytes());
        let mut log = OpenOptions::new()
            .create_new(true)
            .append(true)
            .open(dir.join("log"))?;
        write_record(&mut log, &commit_id, record.as_bytes())?;
        datasets.insert(
            study_id.to_owned(),
            Arc::new(Mutex::new(Dataset {
                dir,
                head: commit_id.clone(),
                paths: HashMap::new(),
                log,
            })),
        );
        Ok(Commit {
            commit_id,
            parent_id: None,
            added: None,
            timestamp,
            message,
        })
    }

    /// Stores bytes under their content address. Idempotent and safe to
    /// call concurrently: writes go to a temp file that is renamed into
    /// place.
    pub fn put_object(&self, study_id: &str, bytes: &[u8]) -> Result<ObjectId> {
        if bytes.is_empty() {
            return Err(StoreError::EmptyObject);
        }
        let dir = self.dataset(study_id)?.lock().dir.clone();
        let oid = ObjectId::of(bytes);
        let (shard, rest) = oid.shard();
        let target = dir.join("objects").join(shard).join(rest);
        if target.exists() {
            return Ok(oid);
        }
        fs::create_dir_all(target.parent().expect("object path has a parent"))?;
        let tmp = dir.join("tmp").join(format!(
            "{}.{}.tmp",
            std::process::id(),
            self.tmp_counter.fetch_add(1, Ordering::Relaxed)
        ));
        {
            let mut f = File::create(&tmp)?;
            f.write_all(bytes)?;
        }
        fs::rename(&tmp, &target)?;
        Ok(oid)
    }

    pub fn get_object(&self, study_id: &str, oid: &ObjectId) -> Result<Vec<u8>> {
        let path = self.dataset(study_id)?.lock().object_path(oid);
        fs::read(&path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => StoreError::UnknownObject(oid.clone()),
            _ => StoreError::Io(e),
        })
    }

    pub fn has_object(&self, study_id: &str, oid: &ObjectId) -> bool {
        self.dataset(study_id)
            .map(|d| d.lock().object_path(oid).is_file())
            .unwrap_or(false)
    }

    /// Appends a commit adding `logical_path -> oid` on top of the head.
    /// Commits within a study are serialized.
    pub fn commit_batch(
        &self,
        study_id: &str,
        logical_path: &str,
        oid: &ObjectId,
        message: &str,
        timestamp: DateTime<Utc>,
    ) -> Result<Commit> {
        if !valid_logical_path(logical_path) {
            return Err(StoreError::InvalidPath(logical_path.to_owned()));
        }
        let dataset = self.dataset(study_id)?;
        let mut ds = dataset.lock();
        if ds.paths.contains_key(logical_path) {
            return Err(StoreError::PathCollision(logical_path.to_owned()));
        }
        if !ds.object_path(oid).is_file() {
            return Err(StoreError::UnknownObject(oid.clone()));
        }
        let entry = ManifestEntry {
            path: logical_path.to_owned(),
            object: oid.clone(),
        };
        let parent = ds.head.clone();
        let record = encode_commit_record(Some(&parent), Some(&entry), timestamp, message);
        let commit_id = hash_hex(record.as_bytes());
        write_record(&mut ds.log, &commit_id, record.as_bytes())?;
        ds.head = commit_id.clone();
        ds.paths.insert(entry.path.clone(), entry.object.clone());
        Ok(Commit {
            commit_id,
            parent_id: Some(parent),
            added: Some(entry),
            timestamp,
            message: message.to_owned(),
        })
    }

    pub fn head(&self, study_id: &str) -> Result<String> {
        Ok(self.dataset(study_id)?.lock().head.clone())
    }

    /// Commits from root to head.
    pub fn read_history(&self, study_id: &str) -> Result<Vec<Commit>> {
        let bytes = fs::read(self.study_dir(study_id).join("log")).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => StoreError::NotInitialized(study_id.to_owned()),
            _ => StoreError::Io(e),
        })?;
        let corrupt = |detail: String| StoreError::CorruptLog {
            study: study_id.to_owned(),
            detail,
        };
        let mut out: Vec<Commit> = Vec::new();
        for item in scan_log(&bytes) {
            match item {
                LogItem::Record { header_id, bytes } => {
                    let commit = decode_commit_record(&bytes)
                        .filter(|c| c.commit_id == header_id)
                        .ok_or_else(|| corrupt(format!("commit {header_id} does not verify")))?;
                    if commit.parent_id.as_deref() != out.last().map(|c| c.commit_id.as_str()) {
                        return Err(corrupt(format!("commit {header_id} breaks the chain")));
                    }
                    out.push(commit);
                }
                LogItem::Truncated { header_id } => {
                    return Err(corrupt(format!(
                        "truncated record {}",
                        header_id.unwrap_or_else(|| "<unknown>".into())
                    )))
                }
            }
        }
        Ok(out)
    }

    /// Sorted manifest at head.
    pub fn manifest(&self, study_id: &str) -> Result<Vec<ManifestEntry>> {
        let ds = self.dataset(study_id)?;
        let ds = ds.lock();
        let mut entries: Vec<_> = ds
            .paths
            .iter()
            .map(|(p, o)| ManifestEntry {
                path: p.clone(),
                object: o.clone(),
            })
            .collect();
        entries.sort();
        Ok(entries)
    }

    /// Sorted manifest as of any commit in the history.
    pub fn manifest_at(&self, study_id: &str, commit_id: &str) -> Result<Vec<ManifestEntry>> {
        let history = self.read_history(study_id)?;
        let idx = history
            .iter()
            .position(|c| c.commit_id == commit_id)
            .ok_or_else(|| StoreError::CorruptLog {
                study: study_id.to_owned(),
                detail: format!("no commit {commit_id}"),
            })?;
        let mut entries: Vec<_> = history[..=idx].iter().filter_map(|c| c.added.clone()).collect();
        entries.sort();
        Ok(entries)
    }

    /// Every object file currently on disk for the study.
    pub fn object_ids(&self, study_id: &str) -> Result<BTreeSet<ObjectId>> {
        let dir = self.dataset(study_id)?.lock().dir.join("objects");
        let mut out = BTreeSet::new();
        for (name, _) in list_object_files(&dir)? {
            if let Ok(oid) = ObjectId::parse(&name) {
                out.insert(oid);
            }
        }
        Ok(out)
    }

    /// Re-hashes every object and commit record of a dataset.
    pub fn fsck(&self, study_id: &str) -> Result<FsckReport> {
        let dir = self.study_dir(study_id);
        if !dir.join("log").is_file() {
            return Err(StoreError::NotInitialized(study_id.to_owned()));
        }
        let mut report = FsckReport::default();

        let mut present = BTreeSet::new();
        for (name, path) in list_object_files(&dir.join("objects"))? {
            match ObjectId::parse(&name) {
                Ok(oid) => {
                    let bytes = fs::read(&path)?;
                    if ObjectId::of(&bytes) != oid {
                        report.corrupt_objects.push(oid.clone());
                    }
                    present.insert(oid);
                }
                Err(_) => report.stray_files.push(path.display().to_string()),
            }
        }

        let log = fs::read(dir.join("log"))?;
        let mut previous: Option<String> = None;
        let mut manifest = BTreeMap::new();
        for item in scan_log(&log) {
            match item {
                LogItem::Record { header_id, bytes } => {
                    match decode_commit_record(&bytes) {
                        Some(c) if c.commit_id == header_id && c.parent_id == previous => {
                            if let Some(e) = c.added {
                                manifest.insert(e.path, e.object);
                            }
                        }
                        _ => report.corrupt_commits.push(header_id.clone()),
                    }
                    previous = Some(header_id);
                }
                LogItem::Truncated { header_id } => match header_id {
                    Some(id) => report.corrupt_commits.push(id),
                    None => report.unreadable_tail = true,
                },
            }
        }

        let missing: BTreeSet<_> = manifest
            .values()
            .filter(|o| !present.contains(*o))
            .cloned()
            .collect();
        report.missing_objects = missing.into_iter().collect();
        report.corrupt_objects.sort();
        Ok(report)
    }

    /// Rebuilds `study_id` in `self` from another store's log and objects.
    pub fn replay_from(&self, source: &Datastore, study_id: &str) -> Result<Vec<Commit>> {
        let history = source.read_history(study_id)?;
        let mut out = Vec::with_capacity(history.len());
        for commit in history {
            match commit.added {
                None => out.push(self.init_dataset(study_id, commit.timestamp)?),
                Some(entry) => {
                    let bytes = source.get_object(study_id, &entry.object)?;
                    let oid = self.put_object(study_id, &bytes)?;
                    out.push(self.commit_batch(
                        study_id,
                        &entry.path,
                        &oid,
                        &commit.message,
                        commit.timestamp,
                    )?);
                }
            }
        }
        Ok(out)
    }
}

fn write_record(log: &mut File, commit_id: &str, record: &[u8]) -> io::Result<()> {
    let mut buf = format!("commit {} {}\n", commit_id, record.len()).into_bytes();
    buf.extend_from_slice(record);
    log.write_all(&buf)?;
    log.flush()
}

/// (file name with shard prefix joined, full path) for every object file.
fn list_object_files(objects: &Path) -> io::Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    if !objects.is_dir() {
        return Ok(out);
    }
    for shard in fs::read_dir(objects)? {
        let shard = shard?;
        let shard_name = shard.file_name().to_string_lossy().into_owned();
        if !shard.file_type()?.is_dir() {
            out.push((shard_name, shard.path()));
            continue;
        }
        for obj in fs::read_dir(shard.path())? {
            let obj = obj?;
            let name = format!("{}{}", shard_name, obj.file_name().to_string_lossy());
            out.push((name, obj.path()));
        }
    }
    out.sort();
    Ok(out)
}
