//! Content-addressed embedding cache.
//!
//! Layout of a store directory:
//!
//! * `records.log`: append-only sequence of records,
//!   `b"PEBR" | body_len: u32 | body | crc32(body): u32`, all little-endian;
//! * `index.v1`: rebuildable map from hex key digest to record location,
//!   rewritten through a temporary file and an atomic rename.
//!
//! A record body holds the key digest, creation time, the full key, the
//! backend fingerprint and the vector as `f32` values. A torn record at the
//! end of the log is skipped with a warning and cut off when the store is
//! opened for writing.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const ENV_CACHE_DIR: &str = "PEB_CACHE_DIR";

const LOG_FILE: &str = "records.log";
const INDEX_FILE: &str = "index.v1";
const INDEX_HEADER: &str = "peb-store-index 1";
const MAGIC: &[u8; 4] = b"PEBR";
const FRAME_OVERHEAD: u64 = 4 + 4 + 4;
const MAX_BODY: u32 = 1 << 30;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("corrupt record at offset {offset}: {reason}")]
    CorruptRecord { offset: u64, reason: String },
    #[error("vector of length {got} for model `{model_id}`, store holds length {expected}")]
    DimensionMismatch {
        model_id: String,
        expected: usize,
        got: usize,
    },
    #[error("a different vector is already stored for this key")]
    ConflictingEntry,
    #[error("store opened read-only")]
    ReadOnly,
    #[error("field too long for record: {0}")]
    FieldTooLong(&'static str),
    #[error("store io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub type Digest256 = [u8; 32];

pub fn sha256(bytes: &[u8]) -> Digest256 {
    Sha256::digest(bytes).into()
}

/// Provenance of one cached embedding.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct CacheKey {
    pub model_id: String,
    pub template_id: String,
    pub layer: i32,
    pub rule: String,
    pub normalize: bool,
    #[serde(with = "hex_digest")]
    pub sentence_digest: Digest256,
}

mod hex_digest {
    pub fn serialize<S: serde::Serializer>(d: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(d))
    }
}

impl CacheKey {
    pub fn new(model_id: &str, template_id: &str, layer: i32, rule: &str, normalize: bool, sentence: &str) -> Self {
        Self {
            model_id: model_id.to_string(),
            template_id: template_id.to_string(),
            layer,
            rule: rule.to_string(),
            normalize,
            sentence_digest: sha256(sentence.as_bytes()),
        }
    }

    /// Length-prefixed encoding of every field; the digest is its SHA-256.
    fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for s in [&self.model_id, &self.template_id, &self.rule] {
            out.extend_from_slice(&(s.len() as u64).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        out.extend_from_slice(&self.layer.to_le_bytes());
        out.push(u8::from(self.normalize));
        out.extend_from_slice(&self.sentence_digest);
        out
    }

    pub fn digest(&self) -> Digest256 {
        sha256(&self.canonical_bytes())
    }

    pub fn hex(&self) -> String {
        hex::encode(self.digest())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub key: CacheKey,
    pub vector: Vec<f32>,
    /// Milliseconds since the Unix epoch.
    pub created_at: u64,
    pub fingerprint: String,
}

impl CacheEntry {
    pub fn new(key: CacheKey, vector: Vec<f32>, fingerprint: &str) -> Self {
        let created_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64);
        Self {
            key,
            vector,
            created_at,
            fingerprint: fingerprint.to_string(),
        }
    }
}

fn push_str(out: &mut Vec<u8>, s: &str, field: &'static str) -> Result<(), StoreError> {
    let len = u16::try_from(s.len()).map_err(|_| StoreError::FieldTooLong(field))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn encode_body(entry: &CacheEntry) -> Result<Vec<u8>, StoreError> {
    let k = &entry.key;
    let mut body = Vec::with_capacity(128 + entry.vector.len() * 4);
    body.extend_from_slice(&k.digest());
    body.extend_from_slice(&entry.created_at.to_le_bytes());
    body.extend_from_slice(&k.layer.to_le_bytes());
    body.push(u8::from(k.normalize));
    push_str(&mut body, &k.model_id, "model_id")?;
    push_str(&mut body, &k.template_id, "template_id")?;
    push_str(&mut body, &k.rule, "rule")?;
    body.extend_from_slice(&k.sentence_digest);
    push_str(&mut body, &entry.fingerprint, "fingerprint")?;
    body.extend_from_slice(&(entry.vector.len() as u32).to_le_bytes());
    for x in &entry.vector {
        body.extend_from_slice(&x.to_le_bytes());
    }
    Ok(body)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let out = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(out)
    }

    fn array<const N: usize>(&mut self) -> Option<[u8; N]> {
        self.take(N)?.try_into().ok()
    }

    fn string(&mut self) -> Option<String> {
        let len = u16::from_le_bytes(self.array()?) as usize;
        String::from_utf8(self.take(len)?.to_vec()).ok()
    }
}

fn decode_body(body: &[u8]) -> Option<(Digest256, CacheEntry)> {
    let mut c = Cursor { buf: body, pos: 0 };
    let digest: Digest256 = c.array()?;
    let created_at = u64::from_le_bytes(c.array()?);
    let layer = i32::from_le_bytes(c.array()?);
    let normalize = match c.array::<1>()?[0] {
        0 => false,
        1 => true,
        _ => return None,
    };
    let model_id = c.string()?;
    let template_id = c.string()?;
    let rule = c.string()?;
    let sentence_digest: Digest256 = c.array()?;
    let fingerprint = c.string()?;
    let dim = u32::from_le_bytes(c.array()?) as usize;
    let raw = c.take(dim.checked_mul(4)?)?;
    if c.pos != body.len() {
        return None;
    }
    let vector = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let key = CacheKey {
        model_id,
        template_id,
        layer,
        rule,
        normalize,
        sentence_digest,
    };
    Some((
        digest,
        CacheEntry {
            key,
            vector,
            created_at,
            fingerprint,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Location {
    offset: u64,
    /// Whole frame length including magic, length and checksum.
    len: u64,
}

/// One framed record as read from the log.
enum Frame {
    Ok {
        loc: Location,
        digest: Digest256,
        entry: CacheEntry,
    },
    Corrupt {
        loc: Location,
        reason: String,
    },
    /// Not enough bytes for a complete frame.
    Torn,
}

fn read_frame(log: &[u8], offset: u64) -> Frame {
    let start = offset as usize;
    let rest = &log[start..];
    if rest.len() < 8 {
        return Frame::Torn;
    }
    if &rest[..4] != MAGIC {
        return Frame::Torn;
    }
    let body_len = u32::from_le_bytes(rest[4..8].try_into().expect("4 bytes"));
    if body_len > MAX_BODY {
        return Frame::Torn;
    }
    let total = FRAME_OVERHEAD + u64::from(body_len);
    if (rest.len() as u64) < total {
        return Frame::Torn;
    }
    let loc = Location { offset, len: total };
    let body = &rest[8..8 + body_len as usize];
    let stored_crc = u32::from_le_bytes(rest[8 + body_len as usize..total as usize].try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored_crc {
        return Frame::Corrupt {
            loc,
            reason: "checksum mismatch".into(),
        };
    }
    match decode_body(body) {
        Some((digest, entry)) if digest == entry.key.digest() => Frame::Ok { loc, digest, entry },
        Some(_) => Frame::Corrupt {
            loc,
            reason: "key digest does not match key".into(),
        },
        None => Frame::Corrupt {
            loc,
            reason: "undecodable body".into(),
        },
    }
}

/// Result of scanning a log from some offset.
#[derive(Default)]
struct ScanOutcome {
    records: Vec<(Digest256, Location, CacheEntry)>,
    corrupt: Vec<(u64, String)>,
    /// Offset just past the last complete frame.
    good_end: u64,
    torn_bytes: u64,
}

fn scan_log(log: &[u8], from: u64) -> ScanOutcome {
    let mut out = ScanOutcome {
        good_end: from,
        ..Default::default()
    };
    let mut offset = from;
    while offset < log.len() as u64 {
        match read_frame(log, offset) {
            Frame::Ok { loc, digest, entry } => {
                out.records.push((digest, loc, entry));
                offset += loc.len;
            }
            Frame::Corrupt { loc, reason } => {
                out.corrupt.push((loc.offset, reason));
                offset += loc.len;
            }
            Frame::Torn => {
                out.torn_bytes = log.len() as u64 - offset;
                break;
            }
        }
        out.good_end = offset;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PutOutcome {
    Inserted,
    AlreadyPresent,
}

/// Filter for [`Store::scan`]; unset fields match everything.
#[derive(Debug, Clone, Default)]
pub struct ScanFilter {
    pub model_id: Option<String>,
    pub template_id: Option<String>,
    pub layer: Option<i32>,
}

impl ScanFilter {
    fn matches(&self, key: &CacheKey) -> bool {
        self.model_id.as_ref().is_none_or(|m| *m == key.model_id)
            && self.template_id.as_ref().is_none_or(|t| *t == key.template_id)
            && self.layer.is_none_or(|l| l == key.layer)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StoreStats {
    pub records: usize,
    pub log_bytes: u64,
    /// Records per `model_id/template_id@layer`.
    pub groups: BTreeMap<String, usize>,
    pub dimensions: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub records_ok: usize,
    pub corrupt: Vec<(u64, String)>,
    pub torn_tail_bytes: u64,
    pub duplicate_keys: usize,
    /// Whether the on-disk index agrees with a fresh scan.
    pub index_consistent: bool,
}

impl VerifyReport {
    pub fn is_clean(&self) -> bool {
        self.corrupt.is_empty() && self.torn_tail_bytes == 0 && self.index_consistent
    }
}

#[derive(Debug, Default)]
struct State {
    index: HashMap<Digest256, Location>,
    dims: HashMap<String, usize>,
    log_len: u64,
    dirty: bool,
}

/// Embedding cache rooted at one directory. Writes go through `&self` and
/// are serialized internally; readers see the index as of their call.
#[derive(Debug)]
pub struct Store {
    dir: PathBuf,
    writable: bool,
    state: RwLock<State>,
    log: Mutex<File>,
}

impl Store {
    /// Opens (creating if needed) a store for reading and writing.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        Self::open_with(dir.as_ref(), true)
    }

    pub fn open_read_only(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        Self::open_with(dir.as_ref(), false)
    }

    fn open_with(dir: &Path, writable: bool) -> Result<Self, StoreError> {
        let log_path = dir.join(LOG_FILE);
        if writable {
            fs::create_dir_all(dir).map_err(io_at(dir))?;
        }
        let mut file = OpenOptions::new()
            .read(true)
            .write(writable)
            .create(writable)
            .truncate(false)
            .open(&log_path)
            .map_err(io_at(&log_path))?;
        let mut log = Vec::new();
        file.read_to_end(&mut log).map_err(io_at(&log_path))?;

        let mut state = State::default();
        let scan_from = match load_index(&dir.join(INDEX_FILE), log.len() as u64) {
            Some((index, covered)) => {
                for loc in index.values() {
                    if let Frame::Ok { entry, .. } = read_frame(&log, loc.offset) {
                        state.dims.entry(entry.key.model_id).or_insert(entry.vector.len());
                    }
                }
                state.index = index;
                covered
            }
            None => {
                state.dirty = true;
                0
            }
        };
        let scan = scan_log(&log, scan_from);
        for (offset, reason) in &scan.corrupt {
            log::warn!(
                "{}: skipping corrupt record at offset {offset}: {reason}",
                log_path.display()
            );
        }
        if scan.torn_bytes > 0 {
            log::warn!(
                "{}: skipping {} bytes of truncated record at offset {}",
                log_path.display(),
                scan.torn_bytes,
                scan.good_end
            );
        }
        if !scan.records.is_empty() {
            state.dirty = true;
        }
        for (digest, loc, entry) in scan.records {
            state.dims.entry(entry.key.model_id).or_insert(entry.vector.len());
            state.index.entry(digest).or_insert(loc);
        }
        state.log_len = scan.good_end;
        if writable && scan.torn_bytes > 0 {
            file.set_len(scan.good_end).map_err(io_at(&log_path))?;
            state.dirty = true;
        }
        let store = Self {
            dir: dir.to_path_buf(),
            writable,
            state: RwLock::new(state),
            log: Mutex::new(file),
        };
        if writable {
            store.flush()?;
        }
        Ok(store)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> usize {
        self.state.read().expect("store lock").index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn read_at(&self, loc: Location) -> Result<CacheEntry, StoreError> {
        let mut buf = vec![0u8; loc.len as usize];
        {
            let mut file = self.log.lock().expect("log lock");
            file.seek(SeekFrom::Start(loc.offset)).map_err(io_at(&self.dir))?;
            file.read_exact(&mut buf).map_err(io_at(&self.dir))?;
        }
        match read_frame(&buf, 0) {
            Frame::Ok { entry, .. } => Ok(entry),
            Frame::Corrupt { reason, .. } => Err(StoreError::CorruptRecord {
                offset: loc.offset,
                reason,
            }),
            Frame::Torn => Err(StoreError::CorruptRecord {
                offset: loc.offset,
                reason: "incomplete record".into(),
            }),
        }
    }

    pub fn get_entry(&self, key: &CacheKey) -> Result<Option<CacheEntry>, StoreError> {
        let loc = self.state.read().expect("store lock").index.get(&key.digest()).copied();
        match loc {
            None => Ok(None),
            Some(loc) => {
                let entry = self.read_at(loc)?;
                if entry.key != *key {
                    return Err(StoreError::CorruptRecord {
                        offset: loc.offset,
                        reason: "stored key differs from requested key".into(),
                    });
                }
                Ok(Some(entry))
            }
        }
    }

    pub fn get(&self, key: &CacheKey) -> Result<Option<Vec<f32>>, StoreError> {
        Ok(self.get_entry(key)?.map(|e| e.vector))
    }

    /// Appends `entry` unless an identical vector is already stored under its key.
    pub fn put(&self, entry: &CacheEntry) -> Result<PutOutcome, StoreError> {
        if !self.writable {
            return Err(StoreError::ReadOnly);
        }
        let digest = entry.key.digest();
        let mut state = self.state.write().expect("store lock");
        if let Some(&loc) = state.index.get(&digest) {
            drop(state);
            let existing = self.read_at(loc)?;
            let same = existing.vector.len() == entry.vector.len()
                && existing
                    .vector
                    .iter()
                    .zip(&entry.vector)
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            return if same {
                Ok(PutOutcome::AlreadyPresent)
            } else {
                Err(StoreError::ConflictingEntry)
            };
        }
        if let Some(&dim) = state.dims.get(&entry.key.model_id) {
            if dim != entry.vector.len() {
                return Err(StoreError::DimensionMismatch {
                    model_id: entry.key.model_id.clone(),
                    expected: dim,
                    got: entry.vector.len(),
                });
            }
        }
        let body = encode_body(entry)?;
        let mut frame = Vec::with_capacity(body.len() + FRAME_OVERHEAD as usize);
        frame.extend_from_slice(MAGIC);
        frame.extend_from_slice(&(body.len() as u32).to_le_bytes());
        frame.extend_from_slice(&body);
        frame.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());

        let offset = state.log_len;
        {
            let mut file = self.log.lock().expect("log lock");
            let path = self.dir.join(LOG_FILE);
            file.seek(SeekFrom::Start(offset)).map_err(io_at(&path))?;
            file.write_all(&frame).map_err(io_at(&path))?;
        }
        let loc = Location {
            offset,
            len: frame.len() as u64,
        };
        state.index.insert(digest, loc);
        state
            .dims
            .entry(entry.key.model_id.clone())
            .or_insert(entry.vector.len());
        state.log_len += loc.len;
        state.dirty = true;
        Ok(PutOutcome::Inserted)
    }

    /// Entries matching `filter`, in log order, from a snapshot of the index.
    pub fn scan(&self, filter: &ScanFilter) -> impl Iterator<Item = Result<CacheEntry, StoreError>> + '_ {
        let mut locs: Vec<Location> = self.state.read().expect("store lock").index.values().copied().collect();
        locs.sort_by_key(|l| l.offset);
        let filter = filter.clone();
        locs.into_iter().filter_map(move |loc| match self.read_at(loc) {
            Ok(e) if filter.matches(&e.key) => Some(Ok(e)),
            Ok(_) => None,
            Err(e) => Some(Err(e)),
        })
    }

    pub fn stats(&self) -> Result<StoreStats, StoreError> {
        let mut groups = BTreeMap::new();
        let mut dimensions = BTreeMap::new();
        let mut records = 0;
        for entry in self.scan(&ScanFilter::default()) {
            let e = entry?;
            records += 1;
            *groups
                .entry(format!("{}/{}@{}", e.key.model_id, e.key.template_id, e.key.layer))
                .or_insert(0) += 1;
            dimensions.insert(e.key.model_id.clone(), e.vector.len());
        }
        Ok(StoreStats {
            records,
            log_bytes: self.state.read().expect("store lock").log_len,
            groups,
            dimensions,
        })
    }

    /// Re-reads the whole log, checking every checksum, and compares the
    /// result with the index on disk.
    pub fn verify(&self) -> Result<VerifyReport, StoreError> {
        let log_path = self.dir.join(LOG_FILE);
        let log = fs::read(&log_path).map_err(io_at(&log_path))?;
        let scan = scan_log(&log, 0);
        let mut fresh: HashMap<Digest256, Location> = HashMap::new();
        let mut duplicate_keys = 0;
        for (digest, loc, _) in &scan.records {
            if fresh.insert(*digest, *loc).is_some() {
                duplicate_keys += 1;
            }
        }
        let index_consistent = match load_index(&self.dir.join(INDEX_FILE), log.len() as u64) {
            Some((index, covered)) => {
                covered == scan.good_end && index.len() == fresh.len() && index.keys().all(|k| fresh.contains_key(k))
            }
            None => false,
        };
        Ok(VerifyReport {
            records_ok: scan.records.len(),
            corrupt: scan.corrupt,
            torn_tail_bytes: scan.torn_bytes,
            duplicate_keys,
            index_consistent,
        })
    }

    /// Syncs the log and rewrites the index if it changed.
    pub fn flush(&self) -> Result<(), StoreError> {
        if !self.writable {
            return Ok(());
        }
        let mut state = self.state.write().expect("store lock");
        self.log
            .lock()
            .expect("log lock")
            .sync_data()
            .map_err(io_at(&self.dir))?;
        if state.dirty {
            write_index(&self.dir, &state.index, state.log_len)?;
            state.dirty = false;
        }
        Ok(())
    }
}

impl Drop for Store {
    fn drop(&mut self) {
        if let Err(e) = self.flush() {
            log::warn!("failed to flush store {}: {e}", self.dir.display());
        }
    }
}

fn write_index(dir: &Path, index: &HashMap<Digest256, Location>, log_len: u64) -> Result<(), StoreError> {
    let mut rows: Vec<(&Digest256, &Location)> = index.iter().collect();
    rows.sort_by_key(|(_, l)| l.offset);
    let mut out = String::with_capacity(rows.len() * 90 + 32);
    out.push_str(&format!("{INDEX_HEADER} {log_len}\n"));
    for (digest, loc) in rows {
        out.push_str(&format!("{} {} {}\n", hex::encode(digest), loc.offset, loc.len));
    }
    let tmp = dir.join(format!("{INDEX_FILE}.tmp"));
    let path = dir.join(INDEX_FILE);
    let mut f = File::create(&tmp).map_err(io_at(&tmp))?;
    f.write_all(out.as_bytes()).map_err(io_at(&tmp))?;
    f.sync_all().map_err(io_at(&tmp))?;
    fs::rename(&tmp, &path).map_err(io_at(&path))
}

/// Index entries and the log length they cover, or `None` when the index is
/// missing, malformed or describes more log than exists.
fn load_index(path: &Path, log_len: u64) -> Option<(HashMap<Digest256, Location>, u64)> {
    let text = fs::read_to_string(path).ok()?;
    let mut lines = text.lines();
    let covered: u64 = lines.next()?.strip_prefix(INDEX_HEADER)?.trim().parse().ok()?;
    if covered > log_len {
        return None;
    }
    let mut index = HashMap::new();
    for line in lines {
        let mut parts = line.split(' ');
        let digest: Digest256 = hex::decode(parts.next()?).ok()?.try_into().ok()?;
        let offset: u64 = parts.next()?.parse().ok()?;
        let len: u64 = parts.next()?.parse().ok()?;
        if offset + len > covered {
            return None;
        }
        index.insert(digest, Location { offset, len });
    }
    Some((index, covered))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(sentence: &str) -> CacheKey {
        CacheKey::new("model", "prompt_eol", -1, "last_token", false, sentence)
    }

    #[test]
    fn put_then_get() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        assert_eq!(store.get(&key("a")).unwrap(), None);
        let e = CacheEntry::new(key("a"), vec![1.5, -0.0, f32::MIN_POSITIVE], "fp");
        assert_eq!(store.put(&e).unwrap(), PutOutcome::Inserted);
        let got = store.get(&key("a")).unwrap().unwrap();
        assert_eq!(
            got.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            e.vector.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(store.put(&e).unwrap(), PutOutcome::AlreadyPresent);
        let conflicting = CacheEntry::new(key("a"), vec![1.5, 0.0, 0.0], "fp");
        assert!(matches!(store.put(&conflicting), Err(StoreError::ConflictingEntry)));
        let wrong_dim = CacheEntry::new(key("b"), vec![1.0], "fp");
        assert!(matches!(
            store.put(&wrong_dim),
            Err(StoreError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn keys_distinguish_every_field() {
        let base = key("s");
        let variants = [
            CacheKey {
                model_id: "m2".into(),
                ..base.clone()
            },
            CacheKey {
                template_id: "prompt_sum".into(),
                ..base.clone()
            },
            CacheKey {
                layer: -2,
                ..base.clone()
            },
            CacheKey {
                rule: "mean_over_masks".into(),
                ..base.clone()
            },
            CacheKey {
                normalize: true,
                ..base.clone()
            },
            key("s "),
        ];
        for v in variants {
            assert_ne!(v.digest(), base.digest());
        }
        assert_eq!(key("s").digest(), base.digest());
    }

    #[test]
    fn survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = Store::open(dir.path()).unwrap();
            for i in 0..20 {
                store
                    .put(&CacheEntry::new(key(&i.to_string()), vec![i as f32; 4], "fp"))
                    .unwrap();
            }
        }
        let store = Store::open_read_only(dir.path()).unwrap();
        assert_eq!(store.len(), 20);
        assert_eq!(store.get(&key("7")).unwrap(), Some(vec![7.0; 4]));
        assert!(matches!(
            store.put(&CacheEntry::new(key("x"), vec![0.0; 4], "fp")),
            Err(StoreError::ReadOnly)
        ));
        assert!(store.verify().unwrap().is_clean());
    }

    #[test]
    fn rebuilds_missing_index() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = Store::open(dir.path()).unwrap();
            store.put(&CacheEntry::new(key("a"), vec![1.0, 2.0], "fp")).unwrap();
        }
        fs::remove_file(dir.path().join(INDEX_FILE)).unwrap();
        let store = Store::open(dir.path()).unwrap();
        assert_eq!(store.get(&key("a")).unwrap(), Some(vec![1.0, 2.0]));
        assert!(dir.path().join(INDEX_FILE).exists());
    }

    #[test]
    fn picks_up_records_past_a_stale_index() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = Store::open(dir.path()).unwrap();
            store.put(&CacheEntry::new(key("a"), vec![1.0], "fp")).unwrap();
        }
        let stale = fs::read(dir.path().join(INDEX_FILE)).unwrap();
        {
            let store = Store::open(dir.path()).unwrap();
            store.put(&CacheEntry::new(key("b"), vec![2.0], "fp")).unwrap();
        }
        fs::write(dir.path().join(INDEX_FILE), stale).unwrap();
        let store = Store::open_read_only(dir.path()).unwrap();
        assert_eq!(store.get(&key("b")).unwrap(), Some(vec![2.0]));
        assert!(!store.verify().unwrap().index_consistent);
    }

    #[test]
    fn truncated_tail_is_skipped_and_cut() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = Store::open(dir.path()).unwrap();
            for s in ["a", "b", "c"] {
                store.put(&CacheEntry::new(key(s), vec![0.5; 8], "fp")).unwrap();
            }
        }
        let log_path = dir.path().join(LOG_FILE);
        let len = fs::metadata(&log_path).unwrap().len();
        OpenOptions::new()
            .write(true)
            .open(&log_path)
            .unwrap()
            .set_len(len - 5)
            .unwrap();
        fs::remove_file(dir.path().join(INDEX_FILE)).unwrap();

        let ro = Store::open_read_only(dir.path()).unwrap();
        assert_eq!(ro.len(), 2);
        assert!(ro.verify().unwrap().torn_tail_bytes > 0);
        drop(ro);

        let store = Store::open(dir.path()).unwrap();
        assert_eq!(store.get(&key("c")).unwrap(), None);
        store.put(&CacheEntry::new(key("c"), vec![0.25; 8], "fp")).unwrap();
        drop(store);
        let store = Store::open_read_only(dir.path()).unwrap();
        assert_eq!(store.get(&key("c")).unwrap(), Some(vec![0.25; 8]));
        assert!(store.verify().unwrap().is_clean());
    }

    #[test]
    fn checksum_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = Store::open(dir.path()).unwrap();
            store.put(&CacheEntry::new(key("a"), vec![1.0; 4], "fp")).unwrap();
            store.put(&CacheEntry::new(key("b"), vec![2.0; 4], "fp")).unwrap();
        }
        let log_path = dir.path().join(LOG_FILE);
        let mut bytes = fs::read(&log_path).unwrap();
        // flip a byte inside the first record's vector
        let first_len = 8 + u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        bytes[first_len - 2] ^= 0xff;
        fs::write(&log_path, bytes).unwrap();

        let store = Store::open_read_only(dir.path()).unwrap();
        assert!(matches!(
            store.get(&key("a")),
            Err(StoreError::CorruptRecord { offset: 0, .. })
        ));
        assert_eq!(store.get(&key("b")).unwrap(), Some(vec![2.0; 4]));
        let report = store.verify().unwrap();
        assert_eq!(report.corrupt.len(), 1);
        assert_eq!(report.records_ok, 1);
    }

    #[test]
    fn scan_filters_and_stats() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        store.put(&CacheEntry::new(key("a"), vec![1.0], "fp")).unwrap();
        store
            .put(&CacheEntry::new(
                CacheKey::new("model", "prompt_sum", -2, "last_token", false, "a"),
                vec![1.0],
                "fp",
            ))
            .unwrap();
        let filter = ScanFilter {
            template_id: Some("prompt_sum".into()),
            ..Default::default()
        };
        let hits: Vec<_> = store.scan(&filter).collect::<Result<_, _>>().unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].key.layer, -2);
        let stats = store.stats().unwrap();
        assert_eq!(stats.records, 2);
        assert_eq!(stats.groups["model/prompt_eol@-1"], 1);
    }
}
