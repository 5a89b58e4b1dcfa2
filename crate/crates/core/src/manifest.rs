//! Append-only JSON Lines ledger of every artifact a stage produces.
//!
//! Each line is one [`ManifestRecord`]. Artifact paths are stored relative to
//! the manifest's directory together with their sha256 digests so a manifest
//! can be moved with its files and validated later. Writers take an advisory
//! lock on the manifest file; a record is written with a single `write` call
//! ending in a newline, so an interrupted run leaves at most one torn trailing
//! fragment, which readers ignore and the next append truncates.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    SourceImage,
    Depth,
    Caption,
    Triplet,
    GeneratedImage,
    Uncertainty,
    Mask,
    DatasetPair,
    EvalResult,
    Checkpoint,
}

impl RecordKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            RecordKind::SourceImage => "source_image",
            RecordKind::Depth => "depth",
            RecordKind::Caption => "caption",
            RecordKind::Triplet => "triplet",
            RecordKind::GeneratedImage => "generated_image",
            RecordKind::Uncertainty => "uncertainty",
            RecordKind::Mask => "mask",
            RecordKind::DatasetPair => "dataset_pair",
            RecordKind::EvalResult => "eval_result",
            RecordKind::Checkpoint => "checkpoint",
        }
    }
}

impl fmt::Display for RecordKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub kind: RecordKind,
    #[serde(default)]
    pub paths: BTreeMap<String, String>,
    #[serde(default)]
    pub sha256: BTreeMap<String, String>,
    #[serde(default)]
    pub params: Map<String, Value>,
    pub created_at: String,
}

impl ManifestRecord {
    pub fn new(id: impl Into<String>, kind: RecordKind, clock: Clock) -> Self {
        Self {
            id: id.into(),
            kind,
            paths: BTreeMap::new(),
            sha256: BTreeMap::new(),
            params: Map::new(),
            created_at: clock.now_rfc3339(),
        }
    }

    /// Registers an artifact under `role`, storing its path relative to
    /// `manifest_dir` and its digest.
    pub fn with_artifact(mut self, role: &str, file: &Path, manifest_dir: &Path) -> Result<Self> {
        let digest = sha256_file(file)?;
        self.paths.insert(role.to_string(), relative_path(file, manifest_dir));
        self.sha256.insert(role.to_string(), digest);
        Ok(self)
    }

    pub fn with_param(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.params.insert(key.to_string(), value.into());
        self
    }

    pub fn param_str(&self, key: &str) -> Option<&str> {
        self.params.get(key).and_then(Value::as_str)
    }

    pub fn param_f64(&self, key: &str) -> Option<f64> {
        self.params.get(key).and_then(Value::as_f64)
    }

    pub fn param_u64(&self, key: &str) -> Option<u64> {
        self.params.get(key).and_then(Value::as_u64)
    }

    /// Absolute location of the artifact registered under `role`.
    pub fn resolve(&self, role: &str, manifest_dir: &Path) -> Option<PathBuf> {
        self.paths.get(role).map(|p| resolve_path(p, manifest_dir))
    }
}

pub fn resolve_path(stored: &str, manifest_dir: &Path) -> PathBuf {
    let p = Path::new(stored);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_dir.join(p)
    }
}

/// `file` relative to `base` with forward slashes, falling back to the
/// absolute path when no relative route exists.
pub fn relative_path(file: &Path, base: &Path) -> String {
    let (file, base) = (canonical_prefix(file), canonical_prefix(base));
    match pathdiff::diff_paths(&file, &base) {
        Some(rel) => rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/"),
        None => file.to_string_lossy().into_owned(),
    }
}

/// Absolute form of `p` with its longest existing prefix canonicalized, so
/// paths that do not exist yet still compare against canonical ones.
fn canonical_prefix(p: &Path) -> PathBuf {
    let abs = std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
    let mut head = abs.as_path();
    let mut tail = Vec::new();
    loop {
        if let Ok(c) = fs::canonicalize(head) {
            return tail.iter().rev().fold(c, |acc: PathBuf, part| acc.join(part));
        }
        match (head.parent(), head.file_name()) {
            (Some(parent), Some(name)) => {
                tail.push(name.to_os_string());
                head = parent;
            }
            _ => return abs,
        }
    }
}

/// Source of `created_at` stamps. `Fixed` makes reruns byte-identical.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clock {
    System,
    Fixed(i64),
}

impl Clock {
    /// Honors `SOURCE_DATE_EPOCH` when set.
    pub fn from_env() -> Self {
        std::env::var("SOURCE_DATE_EPOCH")
            .ok()
            .and_then(|s| s.trim().parse().ok())
            .map(Clock::Fixed)
            .unwrap_or(Clock::System)
    }

    pub fn now_rfc3339(&self) -> String {
        let t = match self {
            Clock::System => chrono::Utc::now(),
            Clock::Fixed(secs) => chrono::DateTime::from_timestamp(*secs, 0).unwrap_or_default(),
        };
        t.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
    }
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Builds content-derived record ids: `<prefix>-<16 hex>` over a
/// length-prefixed field encoding, so distinct field lists never collide by
/// concatenation.
#[derive(Debug, Clone)]
pub struct ContentId {
    prefix: String,
    hasher: Sha256,
}

impl ContentId {
    pub fn new(prefix: &str, op_version: u32) -> Self {
        let mut id = Self { prefix: prefix.to_string(), hasher: Sha256::new() };
        id = id.field("op", &op_version.to_string());
        id
    }

    pub fn field(mut self, name: &str, value: &str) -> Self {
        for part in [name.as_bytes(), value.as_bytes()] {
            self.hasher.update((part.len() as u64).to_le_bytes());
            self.hasher.update(part);
        }
        self
    }

    pub fn finish(self) -> String {
        let digest = self.hasher.finalize();
        format!("{}-{}", self.prefix, hex::encode(&digest[..8]))
    }
}

/// In-memory view of a manifest file plus an append handle.
#[derive(Debug)]
pub struct Manifest {
    path: PathBuf,
    records: Vec<ManifestRecord>,
    index: HashMap<String, usize>,
    synced_len: u64,
    torn_tail: bool,
}

impl Manifest {
    /// Opens (or starts) a manifest. A missing file is an empty manifest.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut m = Self {
            path,
            records: Vec::new(),
            index: HashMap::new(),
            synced_len: 0,
            torn_tail: false,
        };
        if m.path.exists() {
            let bytes = fs::read(&m.path).map_err(|e| Error::io(&m.path, e))?;
            m.load_bytes(&bytes)?;
        }
        Ok(m)
    }

    /// Opens a stage output, creating an empty file so a stage where every
    /// item failed still leaves a readable manifest behind.
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        OpenOptions::new().append(true).create(true).open(path).map_err(|e| Error::io(path, e))?;
        Self::open(path)
    }

    /// Like [`Manifest::open`] but the file must already exist.
    pub fn open_existing(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::open(path)
    }

    fn load_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let parsed = parse_lines(&self.path, bytes)?;
        self.records.clear();
        self.index.clear();
        for rec in parsed.records {
            // first occurrence wins; validation reports the duplicate
            let next = self.records.len();
            self.index.entry(rec.id.clone()).or_insert(next);
            self.records.push(rec);
        }
        self.synced_len = bytes.len() as u64;
        self.torn_tail = parsed.torn_tail.is_some();
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Directory artifact paths are relative to.
    pub fn dir(&self) -> PathBuf {
        manifest_dir(&self.path)
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Option<&ManifestRecord> {
        self.index.get(id).map(|i| &self.records[*i])
    }

    pub fn of_kind(&self, kind: RecordKind) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.kind == kind)
    }

    /// Appends one record as a single line, under an exclusive advisory lock.
    pub fn append(&mut self, record: ManifestRecord) -> Result<()> {
        if let Some(parent) = self.path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let path = self.path.clone();
        let io = |e| Error::io(&path, e);
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)
            .map_err(io)?;
        file.lock().map_err(io)?;

        let len = file.metadata().map_err(io)?.len();
        if len != self.synced_len {
            let mut bytes = Vec::with_capacity(len as usize);
            file.seek(SeekFrom::Start(0)).map_err(io)?;
            file.read_to_end(&mut bytes).map_err(io)?;
            self.load_bytes(&bytes)?;
        }
        if self.index.contains_key(&record.id) {
            return Err(Error::DuplicateId(record.id));
        }
        if self.torn_tail {
            let bytes = fs::read(&path).map_err(io)?;
            let keep = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
            file.set_len(keep as u64).map_err(io)?;
            self.synced_len = keep as u64;
            self.torn_tail = false;
        }

        let mut line = serde_json::to_string(&record).expect("records serialize");
        line.push('\n');
        file.write_all(line.as_bytes()).map_err(io)?;
        file.flush().map_err(io)?;
        self.synced_len += line.len() as u64;
        self.index.insert(record.id.clone(), self.records.len());
        self.records.push(record);
        Ok(())
    }
}

pub fn manifest_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn manifest_append(manifest_path: impl AsRef<Path>, record: ManifestRecord) -> Result<()> {
    Manifest::open(manifest_path)?.append(record)
}

pub fn read_manifest(manifest_path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    Ok(Manifest::open_existing(manifest_path)?.records)
}

struct ParsedLines {
    records: Vec<ManifestRecord>,
    /// Line number of an incomplete trailing fragment.
    torn_tail: Option<usize>,
}

fn parse_lines(path: &Path, bytes: &[u8]) -> Result<ParsedLines> {
    let mut records = Vec::new();
    let mut torn_tail = None;
    let mut rest = bytes;
    let mut line_no = 0;
    while !rest.is_empty() {
        line_no += 1;
        let Some(end) = rest.iter().position(|b| *b == b'\n') else {
            if !rest.iter().all(u8::is_ascii_whitespace) {
                torn_tail = Some(line_no);
            }
            break;
        };
        let line = &rest[..end];
        rest = &rest[end + 1..];
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let rec = serde_json::from_slice(line).map_err(|e| Error::ParseFailure {
            path: path.to_path_buf(),
            line: line_no,
            reason: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(ParsedLines { records, torn_tail })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Violation {
    DuplicateId { id: String, line: usize },
    DanglingPath { id: String, role: String, path: String },
    DigestMismatch { id: String, role: String, expected: String, actual: String },
    MissingDigest { id: String, role: String },
    TruncatedTail { line: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub records: usize,
    pub counts: BTreeMap<String, usize>,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_consistent(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks ids are unique and every referenced artifact exists with the
/// recorded digest.
pub fn manifest_validate(manifest_path: impl AsRef<Path>) -> Result<ValidationReport> {
    let path = manifest_path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let parsed = parse_lines(path, &bytes)?;
    let dir = manifest_dir(path);
    let mut report = ValidationReport { records: parsed.records.len(), ..Default::default() };
    let mut seen = HashMap::new();
    for (i, rec) in parsed.records.iter().enumerate() {
        *report.counts.entry(rec.kind.to_string()).or_default() += 1;
        if seen.insert(rec.id.clone(), i).is_some() {
            report.violations.push(Violation::DuplicateId { id: rec.id.clone(), line: i + 1 });
        }
        for (role, stored) in &rec.paths {
            let file = resolve_path(stored, &dir);
            if !file.is_file() {
                report.violations.push(Violation::DanglingPath {
                    id: rec.id.clone(),
                    role: role.clone(),
                    path: stored.clone(),
                });
                continue;
            }
            match rec.sha256.get(role) {
                None => report
                    .violations
                    .push(Violation::MissingDigest { id: rec.id.clone(), role: role.clone() }),
                Some(expected) => {
                    let actual = sha256_file(&file)?;
                    if &actual != expected {
                        report.violations.push(Violation::DigestMismatch {
                            id: rec.id.clone(),
                            role: role.clone(),
                            expected: expected.clone(),
                            actual,
                        });
                    }
                }
            }
        }
    }
    if let Some(line) = parsed.torn_tail {
        report.violations.push(Violation::TruncatedTail { line });
    }
    Ok(report)
}

/// Validates and turns any violation into [`Error::ManifestInvalid`].
pub fn require_valid(manifest_path: impl AsRef<Path>) -> Result<()> {
    let path = manifest_path.as_ref();
    let report = manifest_validate(path)?;
    match report.violations.first() {
        None => Ok(()),
        Some(v) => Err(Error::ManifestInvalid {
            path: path.to_path_buf(),
            reason: format!("{} violation(s), first: {v:?}", report.violations.len()),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn rec(id: &str) -> ManifestRecord {
        ManifestRecord::new(id, RecordKind::Caption, Clock::Fixed(0))
    }

    #[test]
    fn create_leaves_an_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/out.jsonl");
        assert!(Manifest::create(&path).unwrap().is_empty());
        assert!(read_manifest(&path).unwrap().is_empty());
    }

    #[test]
    fn relative_path_to_base_that_does_not_exist_yet() {
        let dir = tempdir().unwrap();
        let file = dir.path().join("a/m.jsonl");
        std::fs::create_dir_all(file.parent().unwrap()).unwrap();
        std::fs::write(&file, "").unwrap();
        assert_eq!(relative_path(&file, &dir.path().join("b/c")), "../../a/m.jsonl");
    }

    #[test]
    fn append_to_empty_file_writes_one_line() {
        let dir = tempdir().unwrap();
        let m = dir.path().join("m.jsonl");
        manifest_append(&m, rec("a")).unwrap();
        let text = fs::read_to_string(&m).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.ends_with('\n'));
    }

    #[test]
    fn duplicate_id_rejected() {
        let dir = tempdir().unwrap();
        let m = dir.path().join("m.jsonl");
        manifest_append(&m, rec("a")).unwrap();
        assert!(matches!(manifest_append(&m, rec("a")), Err(Error::DuplicateId(id)) if id == "a"));
    }

    #[test]
    fn iteration_follows_append_order() {
        let dir = tempdir().unwrap();
        let m = dir.path().join("m.jsonl");
        for id in ["c", "a", "b"] {
            manifest_append(&m, rec(id)).unwrap();
        }
        let ids: Vec<_> = read_manifest(&m).unwrap().into_iter().map(|r| r.id).collect();
        assert_eq!(ids, ["c", "a", "b"]);
    }

    #[test]
    fn two_handles_see_each_others_writes() {
        let dir = tempdir().unwrap();
        let m = dir.path().join("m.jsonl");
        let mut a = Manifest::open(&m).unwrap();
        let mut b = Manifest::open(&m).unwrap();
        a.append(rec("x")).unwrap();
        assert!(matches!(b.append(rec("x")), Err(Error::DuplicateId(_))));
        b.append(rec("y")).unwrap();
        assert_eq!(Manifest::open(&m).unwrap().len(), 2);
    }

    #[test]
    fn validation_detects_dangling_and_bitflip() {
        let dir = tempdir().unwrap();
        let m = dir.path().join("m.jsonl");
        let f1 = dir.path().join("one.txt");
        let f2 = dir.path().join("two.txt");
        fs::write(&f1, b"hello").unwrap();
        fs::write(&f2, b"world").unwrap();
        manifest_append(&m, rec("1").with_artifact("text", &f1, dir.path()).unwrap()).unwrap();
        manifest_append(&m, rec("2").with_artifact("text", &f2, dir.path()).unwrap()).unwrap();
        let ok = manifest_validate(&m).unwrap();
        assert!(ok.is_consistent());
        assert_eq!(ok.counts["caption"], 2);

        fs::remove_file(&f1).unwrap();
        let mut bytes = fs::read(&f2).unwrap();
        bytes[0] ^= 0x01;
        fs::write(&f2, bytes).unwrap();
        let bad = manifest_validate(&m).unwrap();
        assert_eq!(bad.violations.len(), 2);
        assert!(matches!(bad.violations[0], Violation::DanglingPath { .. }));
        assert!(matches!(bad.violations[1], Violation::DigestMismatch { .. }));
    }

    #[test]
    fn garbage_line_is_parse_failure() {
        let dir = tempdir().unwrap();
        let m = dir.path().join("m.jsonl");
        fs::write(&m, "{not json}\n").unwrap();
        assert!(matches!(manifest_validate(&m), Err(Error::ParseFailure { line: 1, .. })));
    }

    #[test]
    fn crash_between_records_leaves_valid_prefix() {
        let dir = tempdir().unwrap();
        let m = dir.path().join("m.jsonl");
        for id in ["a", "b", "c"] {
            manifest_append(&m, rec(id)).unwrap();
        }
        let report = manifest_validate(&m).unwrap();
        assert!(report.is_consistent());
        assert_eq!(report.records, 3);
    }

    #[test]
    fn torn_tail_is_reported_then_repaired() {
        let dir = tempdir().unwrap();
        let m = dir.path().join("m.jsonl");
        manifest_append(&m, rec("a")).unwrap();
        let mut f = OpenOptions::new().append(true).open(&m).unwrap();
        f.write_all(br#"{"id":"b","kind":"cap"#).unwrap();
        drop(f);

        let report = manifest_validate(&m).unwrap();
        assert_eq!(report.records, 1);
        assert_eq!(report.violations, vec![Violation::TruncatedTail { line: 2 }]);

        manifest_append(&m, rec("b")).unwrap();
        let report = manifest_validate(&m).unwrap();
        assert!(report.is_consistent());
        assert_eq!(report.records, 2);
    }

    #[test]
    fn content_ids_are_stable_and_field_separated() {
        let a = ContentId::new("x", 1).field("k", "ab").field("l", "c").finish();
        let b = ContentId::new("x", 1).field("k", "a").field("l", "bc").finish();
        assert_ne!(a, b);
        assert_eq!(a, ContentId::new("x", 1).field("k", "ab").field("l", "c").finish());
        assert_ne!(a, ContentId::new("x", 2).field("k", "ab").field("l", "c").finish());
        assert!(a.starts_with("x-") && a.len() == 18);
    }

    #[test]
    fn fixed_clock_formats_epoch() {
        assert_eq!(Clock::Fixed(0).now_rfc3339(), "1970-01-01T00:00:00Z");
    }
}
