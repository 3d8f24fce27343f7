//! Transactional, content-addressed delivery repository.
//!
//! On-disk layout:
//!
//! ```text
//! <repo>/HEAD                       "<root_catalog_sha256> <revision> <job_id>\n"
//! <repo>/lock                       present while a transaction is open
//! <repo>/objects/<2 hex>/<62 hex>   file contents and catalogs, named by SHA-256
//! ```
//!
//! A single writer holds `lock` between [`Repository::begin_transaction`] and
//! publish/abort. Readers never lock: objects are immutable and written before
//! the HEAD swap (temp file + rename), so any HEAD a reader sees references a
//! complete object closure.

mod catalog;

pub use catalog::{valid_repo_path, Catalog, CatalogEntry, EntryMode};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};
use thiserror::Error;
use walkdir::WalkDir;

use crate::recipe::valid_sha256;

pub const HEAD_FILE: &str = "HEAD";
pub const LOCK_FILE: &str = "lock";
pub const OBJECTS_DIR: &str = "objects";
/// User-visible revision counter at the repository root.
pub const REVISION_FILE: &str = ".revision";

#[derive(Debug, Error)]
pub enum RepoError {
    #[error("repository at {0} is not initialized")]
    NotInitialized(PathBuf),
    #[error("a transaction is already open ({0})")]
    TransactionInProgress(String),
    #[error("transaction is {0}, not open")]
    TransactionClosed(TxState),
    #[error("path collision at {0:?}: staged twice with different content or as both file and directory")]
    PathCollision(String),
    #[error("invalid repository path {0:?}")]
    InvalidPath(String),
    #[error("{0:?} is managed by the repository and cannot be staged")]
    ReservedPath(String),
    #[error("invalid job id {0:?}: must be non-empty and free of whitespace")]
    InvalidJobId(String),
    #[error("store write failed at {path}: {source}")]
    StoreWriteFailure { path: PathBuf, source: std::io::Error },
    #[error("corrupt HEAD: {0}")]
    CorruptHead(String),
    #[error("corrupt catalog: {0}")]
    CorruptCatalog(String),
    #[error("object {0} failed its digest check")]
    DigestMismatch(String),
    #[error("object {0} is missing from the store")]
    MissingObject(String),
    #[error("HEAD moved during the transaction (expected revision {expected}, found {found})")]
    HeadMoved { expected: u64, found: u64 },
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ObjectRef {
    pub sha256: String,
    pub size: u64,
}

impl ObjectRef {
    pub fn of(bytes: &[u8]) -> Self {
        ObjectRef { sha256: sha256_hex(bytes), size: bytes.len() as u64 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RepoHead {
    pub root_catalog: ObjectRef,
    pub revision: u64,
    pub job_id: String,
}

impl RepoHead {
    fn to_line(&self) -> String {
        format!("{} {} {}\n", self.root_catalog.sha256, self.revision, self.job_id)
    }
}

impl fmt::Display for RepoHead {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "revision {} catalog {} job {}", self.revision, self.root_catalog.sha256, self.job_id)
    }
}

fn valid_job_id(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c.is_whitespace() || c.is_control())
}

/// Object path relative to a store root: `objects/<2 hex>/<62 hex>`.
pub fn object_rel_path(sha: &str) -> PathBuf {
    Path::new(OBJECTS_DIR).join(&sha[..2]).join(&sha[2..])
}

/// Writes `bytes` into `dir/name` atomically unless it already exists.
/// Returns whether a new file was created.
pub(crate) fn write_object_file(store_root: &Path, sha: &str, bytes: &[u8]) -> Result<bool, RepoError> {
    let path = store_root.join(object_rel_path(sha));
    if path.exists() {
        return Ok(false);
    }
    let dir = path.parent().expect("object has a parent");
    let fail = |p: &Path, source| RepoError::StoreWriteFailure { path: p.to_path_buf(), source };
    fs::create_dir_all(dir).map_err(|e| fail(dir, e))?;
    let mut tmp = tempfile::Builder::new().prefix(".tmp").tempfile_in(dir).map_err(|e| fail(dir, e))?;
    tmp.write_all(bytes).map_err(|e| fail(&path, e))?;
    tmp.as_file().sync_all().map_err(|e| fail(&path, e))?;
    tmp.persist(&path).map_err(|e| fail(&path, e.error))?;
    Ok(true)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IntegrityProblem {
    DigestMismatch,
    Missing,
    SizeMismatch { expected: u64, found: u64 },
    CorruptCatalog(String),
    RevisionMismatch { found: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntegrityFailure {
    pub object: String,
    pub problem: IntegrityProblem,
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub head: RepoHead,
    pub objects_checked: usize,
    pub failures: Vec<IntegrityFailure>,
}

impl VerifyReport {
    pub fn is_ok(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Repository {
    root: PathBuf,
}

impl Repository {
    /// Creates the layout and the revision-0 head (an empty tree apart from
    /// the revision file) if they are not there yet.
    pub fn init(root: &Path) -> Result<Self, RepoError> {
        let objects = root.join(OBJECTS_DIR);
        fs::create_dir_all(&objects).map_err(|e| RepoError::Io(objects.clone(), e))?;
        let repo = Repository { root: root.to_path_buf() };
        if !root.join(HEAD_FILE).exists() {
            let rev = b"0\n";
            let rev_ref = ObjectRef::of(rev);
            write_object_file(root, &rev_ref.sha256, rev)?;
            let catalog = Catalog::new(vec![CatalogEntry {
                path: REVISION_FILE.into(),
                mode: EntryMode::File,
                object: Some(rev_ref),
            }])?;
            let bytes = catalog.serialize();
            let cat_ref = ObjectRef::of(&bytes);
            write_object_file(root, &cat_ref.sha256, &bytes)?;
            repo.swap_head(&RepoHead { root_catalog: cat_ref, revision: 0, job_id: "init".into() })?;
        }
        Ok(repo)
    }

    pub fn open(root: &Path) -> Result<Self, RepoError> {
        if !root.join(HEAD_FILE).is_file() {
            return Err(RepoError::NotInitialized(root.to_path_buf()));
        }
        Ok(Repository { root: root.to_path_buf() })
    }

    pub fn open_or_init(root: &Path) -> Result<Self, RepoError> {
        match Self::open(root) {
            Err(RepoError::NotInitialized(_)) => Self::init(root),
            r => r,
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn object_path(&self, sha: &str) -> PathBuf {
        self.root.join(object_rel_path(sha))
    }

    pub fn read_head(&self) -> Result<RepoHead, RepoError> {
        let path = self.root.join(HEAD_FILE);
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            ErrorKind::NotFound => RepoError::NotInitialized(self.root.clone()),
            _ => RepoError::Io(path.clone(), e),
        })?;
        parse_head(&text, |sha| fs::metadata(self.object_path(sha)).ok().map(|m| m.len()))
    }

    fn swap_head(&self, head: &RepoHead) -> Result<(), RepoError> {
        let fail = |source| RepoError::StoreWriteFailure { path: self.root.join(HEAD_FILE), source };
        let mut tmp = tempfile::Builder::new().prefix(".HEAD").tempfile_in(&self.root).map_err(fail)?;
        tmp.write_all(head.to_line().as_bytes()).map_err(fail)?;
        tmp.as_file().sync_all().map_err(fail)?;
        tmp.persist(self.root.join(HEAD_FILE)).map_err(|e| fail(e.error))?;
        Ok(())
    }

    /// Raw object bytes, unverified.
    pub fn read_object(&self, sha: &str) -> Result<Vec<u8>, RepoError> {
        let path = self.object_path(sha);
        fs::read(&path).map_err(|e| match e.kind() {
            ErrorKind::NotFound => RepoError::MissingObject(sha.to_string()),
            _ => RepoError::Io(path, e),
        })
    }

    pub fn read_verified(&self, obj: &ObjectRef) -> Result<Vec<u8>, RepoError> {
        let bytes = self.read_object(&obj.sha256)?;
        if sha256_hex(&bytes) != obj.sha256 || bytes.len() as u64 != obj.size {
            return Err(RepoError::DigestMismatch(obj.sha256.clone()));
        }
        Ok(bytes)
    }

    pub fn load_catalog(&self, head: &RepoHead) -> Result<Catalog, RepoError> {
        Catalog::parse(&self.read_verified(&head.root_catalog)?)
    }

    /// Every object file name currently in the store.
    pub fn object_names(&self) -> Result<BTreeSet<String>, RepoError> {
        list_objects(&self.root)
    }

    pub fn begin_transaction(&self) -> Result<Transaction<'_>, RepoError> {
        let lock_path = self.root.join(LOCK_FILE);
        let id = format!(
            "tx-{}-{}",
            std::process::id(),
            SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos()).unwrap_or(0)
        );
        let mut f = match OpenOptions::new().write(true).create_new(true).open(&lock_path) {
            Ok(f) => f,
            Err(e) if e.kind() == ErrorKind::AlreadyExists => {
                let holder = fs::read_to_string(&lock_path).unwrap_or_default();
                return Err(RepoError::TransactionInProgress(holder.trim().to_string()));
            }
            Err(e) => return Err(RepoError::Io(lock_path, e)),
        };
        let lock = LockGuard { path: lock_path };
        f.write_all(format!("{id}\n").as_bytes()).map_err(|e| RepoError::Io(lock.path.clone(), e))?;

        let base = self.read_head()?;
        let catalog = self.load_catalog(&base)?;
        let mut files = BTreeMap::new();
        let mut dirs = BTreeSet::new();
        for e in catalog.entries() {
            match &e.object {
                _ if e.path == REVISION_FILE => {}
                Some(o) => {
                    files.insert(e.path.clone(), (e.mode, Content::Stored(o.clone())));
                }
                None => {
                    dirs.insert(e.path.clone());
                }
            }
        }
        Ok(Transaction {
            repo: self,
            id,
            base,
            files,
            dirs,
            staged_here: BTreeSet::new(),
            state: TxState::Open,
            lock: Some(lock),
        })
    }

    /// Object closure check for one head: catalog digest, every referenced
    /// object present with matching digest and size, revision file matching.
    pub fn verify_head(&self, head: &RepoHead) -> Vec<IntegrityFailure> {
        let mut failures = Vec::new();
        let fail = |object: &str, problem| IntegrityFailure { object: object.to_string(), problem };
        let cat_bytes = match self.read_object(&head.root_catalog.sha256) {
            Ok(b) => b,
            Err(_) => return vec![fail(&head.root_catalog.sha256, IntegrityProblem::Missing)],
        };
        if sha256_hex(&cat_bytes) != head.root_catalog.sha256 {
            return vec![fail(&head.root_catalog.sha256, IntegrityProblem::DigestMismatch)];
        }
        let catalog = match Catalog::parse(&cat_bytes) {
            Ok(c) => c,
            Err(e) => {
                return vec![fail(&head.root_catalog.sha256, IntegrityProblem::CorruptCatalog(e.to_string()))]
            }
        };
        let mut seen = BTreeSet::new();
        for (entry, obj) in catalog.files() {
            if !seen.insert(&obj.sha256) {
                continue;
            }
            match self.read_object(&obj.sha256) {
                Err(_) => failures.push(fail(&obj.sha256, IntegrityProblem::Missing)),
                Ok(bytes) if sha256_hex(&bytes) != obj.sha256 => {
                    failures.push(fail(&obj.sha256, IntegrityProblem::DigestMismatch))
                }
                Ok(bytes) if bytes.len() as u64 != obj.size => failures.push(fail(
                    &obj.sha256,
                    IntegrityProblem::SizeMismatch { expected: obj.size, found: bytes.len() as u64 },
                )),
                Ok(bytes) if entry.path == REVISION_FILE && bytes != format!("{}\n", head.revision).as_bytes() => {
                    failures.push(fail(
                        &obj.sha256,
                        IntegrityProblem::RevisionMismatch { found: String::from_utf8_lossy(&bytes).into_owned() },
                    ))
                }
                Ok(_) => {}
            }
        }
        if catalog.get(REVISION_FILE).is_none() {
            failures.push(fail(&head.root_catalog.sha256, IntegrityProblem::RevisionMismatch { found: String::new() }));
        }
        failures
    }

    /// Recomputes the digest of every stored object and checks the current
    /// head's closure. Integrity failures are reported, not raised.
    pub fn verify(&self) -> Result<VerifyReport, RepoError> {
        let head = self.read_head()?;
        let mut failures: BTreeMap<String, IntegrityProblem> = BTreeMap::new();
        let names = self.object_names()?;
        for sha in &names {
            let path = self.object_path(sha);
            let bytes = fs::read(&path).map_err(|e| RepoError::Io(path.clone(), e))?;
            if sha256_hex(&bytes) != *sha {
                failures.insert(sha.clone(), IntegrityProblem::DigestMismatch);
            }
        }
        for f in self.verify_head(&head) {
            failures.entry(f.object).or_insert(f.problem);
        }
        Ok(VerifyReport {
            head,
            objects_checked: names.len(),
            failures: failures.into_iter().map(|(object, problem)| IntegrityFailure { object, problem }).collect(),
        })
    }
}

pub(crate) fn list_objects(root: &Path) -> Result<BTreeSet<String>, RepoError> {
    let objects = root.join(OBJECTS_DIR);
    let mut out = BTreeSet::new();
    for entry in WalkDir::new(&objects).min_depth(2).max_depth(2) {
        let entry = entry.map_err(|e| RepoError::Io(objects.clone(), e.into()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let name = entry.file_name().to_string_lossy();
        let fan = entry.path().parent().and_then(Path::file_name).map(|f| f.to_string_lossy().into_owned());
        if let Some(fan) = fan {
            let sha = format!("{fan}{name}");
            if valid_sha256(&sha) {
                out.insert(sha);
            }
        }
    }
    Ok(out)
}

pub(crate) fn parse_head(text: &str, size_of: impl Fn(&str) -> Option<u64>) -> Result<RepoHead, RepoError> {
    let bad = |why: &str| RepoError::CorruptHead(format!("{why}: {text:?}"));
    let line = text.strip_suffix('\n').ok_or_else(|| bad("missing newline"))?;
    let parts: Vec<&str> = line.split(' ').collect();
    let [sha, rev, job] = parts.as_slice() else { return Err(bad("expected three fields")) };
    if !valid_sha256(sha) {
        return Err(bad("bad catalog hash"));
    }
    let revision: u64 = rev.parse().map_err(|_| bad("bad revision"))?;
    if !valid_job_id(job) {
        return Err(bad("bad job id"));
    }
    let size = size_of(sha).ok_or_else(|| bad("root catalog object missing"))?;
    Ok(RepoHead {
        root_catalog: ObjectRef { sha256: sha.to_string(), size },
        revision,
        job_id: job.to_string(),
    })
}

pub(crate) fn head_line(head: &RepoHead) -> String {
    head.to_line()
}

#[derive(Debug)]
struct LockGuard {
    path: PathBuf,
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxState {
    Open,
    Published,
    Aborted,
}

impl fmt::Display for TxState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TxState::Open => "open",
            TxState::Published => "published",
            TxState::Aborted => "aborted",
        })
    }
}

#[derive(Debug, Clone)]
enum Content {
    Stored(ObjectRef),
    New(ObjectRef, Vec<u8>),
}

impl Content {
    fn object(&self) -> &ObjectRef {
        match self {
            Content::Stored(o) | Content::New(o, _) => o,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PublishReport {
    pub head: RepoHead,
    /// object files created by this publication (content, revision file, catalog)
    pub objects_written: usize,
    pub entries: usize,
}

/// An open staging session. Dropping it without publishing aborts it.
#[derive(Debug)]
pub struct Transaction<'r> {
    repo: &'r Repository,
    id: String,
    base: RepoHead,
    files: BTreeMap<String, (EntryMode, Content)>,
    dirs: BTreeSet<String>,
    staged_here: BTreeSet<String>,
    state: TxState,
    lock: Option<LockGuard>,
}

fn join_repo_path(prefix: &str, rel: &str) -> String {
    match (prefix.trim_matches('/'), rel) {
        ("", r) => r.to_string(),
        (p, "") => p.to_string(),
        (p, r) => format!("{p}/{r}"),
    }
}

fn ancestors(path: &str) -> impl Iterator<Item = &str> {
    path.match_indices('/').map(move |(i, _)| &path[..i])
}

impl<'r> Transaction<'r> {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn state(&self) -> TxState {
        self.state
    }

    pub fn base(&self) -> &RepoHead {
        &self.base
    }

    /// Paths of every file in the staged view (excluding the revision file).
    pub fn staged_paths(&self) -> impl Iterator<Item = &str> {
        self.files.keys().map(String::as_str)
    }

    fn ensure_open(&self) -> Result<(), RepoError> {
        match self.state {
            TxState::Open => Ok(()),
            s => Err(RepoError::TransactionClosed(s)),
        }
    }

    fn add_dir(&mut self, path: &str) -> Result<(), RepoError> {
        if !valid_repo_path(path) {
            return Err(RepoError::InvalidPath(path.to_string()));
        }
        if self.files.contains_key(path) {
            return Err(RepoError::PathCollision(path.to_string()));
        }
        self.dirs.insert(path.to_string());
        Ok(())
    }

    /// Stages one file's bytes at `path`.
    pub fn stage_bytes(&mut self, path: &str, bytes: Vec<u8>, executable: bool) -> Result<(), RepoError> {
        self.ensure_open()?;
        if !valid_repo_path(path) {
            return Err(RepoError::InvalidPath(path.to_string()));
        }
        if path == REVISION_FILE {
            return Err(RepoError::ReservedPath(path.to_string()));
        }
        let mode = if executable { EntryMode::Executable } else { EntryMode::File };
        let obj = ObjectRef::of(&bytes);
        if self.staged_here.contains(path) {
            let (m, c) = &self.files[path];
            if *m == mode && *c.object() == obj {
                return Ok(());
            }
            return Err(RepoError::PathCollision(path.to_string()));
        }
        let file_is_dir = self.dirs.contains(path) || {
            let below = format!("{path}/");
            self.files.range(below.clone()..).next().is_some_and(|(k, _)| k.starts_with(&below))
        };
        if file_is_dir || ancestors(path).any(|a| self.files.contains_key(a)) {
            return Err(RepoError::PathCollision(path.to_string()));
        }
        for a in ancestors(path).map(str::to_string).collect::<Vec<_>>() {
            self.dirs.insert(a);
        }
        self.staged_here.insert(path.to_string());
        self.files.insert(path.to_string(), (mode, Content::New(obj, bytes)));
        Ok(())
    }

    pub fn stage_file(&mut self, source: &Path, path: &str) -> Result<(), RepoError> {
        self.ensure_open()?;
        let meta = fs::metadata(source).map_err(|e| RepoError::Io(source.to_path_buf(), e))?;
        let bytes = fs::read(source).map_err(|e| RepoError::Io(source.to_path_buf(), e))?;
        self.stage_bytes(path, bytes, meta.permissions().mode() & 0o111 != 0)
    }

    /// Stages every file below `source_tree` at `repo_prefix`. Executables are
    /// flagged from the source permission bits. Returns the number of files.
    pub fn stage(&mut self, source_tree: &Path, repo_prefix: &str) -> Result<usize, RepoError> {
        self.ensure_open()?;
        let prefix = repo_prefix.trim_matches('/');
        if !prefix.is_empty() {
            self.add_dir(prefix)?;
            for a in ancestors(prefix).map(str::to_string).collect::<Vec<_>>() {
                self.add_dir(&a)?;
            }
        }
        let mut count = 0;
        for entry in WalkDir::new(source_tree).follow_links(true).min_depth(1).sort_by_file_name() {
            let entry = entry.map_err(|e| RepoError::Io(source_tree.to_path_buf(), e.into()))?;
            let rel = entry.path().strip_prefix(source_tree).expect("below source tree");
            let rel = rel.to_str().ok_or_else(|| RepoError::InvalidPath(rel.display().to_string()))?;
            let path = join_repo_path(prefix, rel);
            if entry.file_type().is_dir() {
                self.add_dir(&path)?;
            } else if entry.file_type().is_file() {
                self.stage_file(entry.path(), &path)?;
                count += 1;
            }
        }
        Ok(count)
    }

    /// Writes new objects, the revision file and the catalog, then swaps HEAD.
    /// On failure the transaction stays open and HEAD is untouched.
    pub fn publish(&mut self, job_id: &str) -> Result<PublishReport, RepoError> {
        self.ensure_open()?;
        if !valid_job_id(job_id) {
            return Err(RepoError::InvalidJobId(job_id.to_string()));
        }
        let current = self.repo.read_head()?;
        if current.revision != self.base.revision || current.root_catalog != self.base.root_catalog {
            return Err(RepoError::HeadMoved { expected: self.base.revision, found: current.revision });
        }
        let revision = self.base.revision + 1;
        let root = self.repo.root();
        let mut written = 0;
        for (_, content) in self.files.values() {
            if let Content::New(obj, bytes) = content {
                written += usize::from(write_object_file(root, &obj.sha256, bytes)?);
            }
        }
        let rev_bytes = format!("{revision}\n").into_bytes();
        let rev_ref = ObjectRef::of(&rev_bytes);
        written += usize::from(write_object_file(root, &rev_ref.sha256, &rev_bytes)?);

        let mut entries: Vec<CatalogEntry> = self
            .files
            .iter()
            .map(|(p, (m, c))| CatalogEntry { path: p.clone(), mode: *m, object: Some(c.object().clone()) })
            .collect();
        entries.extend(self.dirs.iter().map(|d| CatalogEntry { path: d.clone(), mode: EntryMode::Directory, object: None }));
        entries.push(CatalogEntry { path: REVISION_FILE.into(), mode: EntryMode::File, object: Some(rev_ref) });
        let catalog = Catalog::new(entries)?;
        let bytes = catalog.serialize();
        let cat_ref = ObjectRef::of(&bytes);
        written += usize::from(write_object_file(root, &cat_ref.sha256, &bytes)?);

        let head = RepoHead { root_catalog: cat_ref, revision, job_id: job_id.to_string() };
        self.repo.swap_head(&head)?;
        self.state = TxState::Published;
        self.lock = None;
        Ok(PublishReport { head, objects_written: written, entries: catalog.entries().len() })
    }

    pub fn abort(mut self) {
        self.state = TxState::Aborted;
        self.lock = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn repo() -> (TempDir, Repository) {
        let tmp = TempDir::new().unwrap();
        let r = Repository::init(&tmp.path().join("repo")).unwrap();
        (tmp, r)
    }

    fn tree(dir: &Path, files: &[(&str, &str, bool)]) {
        for (p, content, exec) in files {
            let path = dir.join(p);
            fs::create_dir_all(path.parent().unwrap()).unwrap();
            fs::write(&path, content).unwrap();
            let mode = if *exec { 0o755 } else { 0o644 };
            fs::set_permissions(&path, fs::Permissions::from_mode(mode)).unwrap();
        }
    }

    #[test]
    fn fresh_repo_begins_over_empty_tree() {
        let (_t, r) = repo();
        let head = r.read_head().unwrap();
        assert_eq!(head.revision, 0);
        let tx = r.begin_transaction().unwrap();
        assert_eq!(tx.staged_paths().count(), 0);
        assert_eq!(r.load_catalog(&head).unwrap().entries().len(), 1);
    }

    #[test]
    fn single_writer() {
        let (_t, r) = repo();
        let tx = r.begin_transaction().unwrap();
        assert!(matches!(r.begin_transaction(), Err(RepoError::TransactionInProgress(_))));
        tx.abort();
        let tx = r.begin_transaction().unwrap();
        assert_eq!(tx.staged_paths().count(), 0);
        assert_eq!(*tx.base(), r.read_head().unwrap());
    }

    #[test]
    fn empty_publish_is_revision_one() {
        let (_t, r) = repo();
        let mut tx = r.begin_transaction().unwrap();
        let rep = tx.publish("job-1").unwrap();
        assert_eq!(rep.head.revision, 1);
        let cat = r.load_catalog(&rep.head).unwrap();
        assert_eq!(cat.entries().len(), 1);
        assert_eq!(cat.entries()[0].path, REVISION_FILE);
        assert_eq!(r.read_head().unwrap(), rep.head);
        assert!(!r.root().join(LOCK_FILE).exists());
        assert!(matches!(tx.publish("again"), Err(RepoError::TransactionClosed(TxState::Published))));
    }

    #[test]
    fn stage_counts_files_and_flags_executables() {
        let (t, r) = repo();
        let src = t.path().join("src");
        tree(&src, &[("bin/hello", "#!/bin/sh\n", true), ("lib/x.so", "x", false), ("README", "r", false)]);
        let mut tx = r.begin_transaction().unwrap();
        assert_eq!(tx.stage(&src, "a/b/hello/1.0").unwrap(), 3);
        assert_eq!(tx.stage(&src, "a/b/hello/1.0").unwrap(), 3);
        assert_eq!(tx.staged_paths().count(), 3);
        let head = tx.publish("j").unwrap().head;
        let cat = r.load_catalog(&head).unwrap();
        assert_eq!(cat.get("a/b/hello/1.0/bin/hello").unwrap().mode, EntryMode::Executable);
        assert_eq!(cat.get("a/b/hello/1.0/lib/x.so").unwrap().mode, EntryMode::File);
        assert_eq!(cat.get("a/b/hello/1.0/bin").unwrap().mode, EntryMode::Directory);
        assert_eq!(cat.get("a").unwrap().mode, EntryMode::Directory);
    }

    #[test]
    fn conflicting_stage_collides() {
        let (t, r) = repo();
        let one = t.path().join("one");
        let two = t.path().join("two");
        tree(&one, &[("f", "1", false)]);
        tree(&two, &[("f", "2", false)]);
        let mut tx = r.begin_transaction().unwrap();
        tx.stage(&one, "p").unwrap();
        assert!(matches!(tx.stage(&two, "p"), Err(RepoError::PathCollision(p)) if p == "p/f"));
        assert!(matches!(tx.stage_bytes("p/f/g", vec![], false), Err(RepoError::PathCollision(_))));
        assert!(matches!(tx.stage_bytes("p", vec![], false), Err(RepoError::PathCollision(_))));
        assert!(matches!(tx.stage_bytes(".revision", vec![], false), Err(RepoError::ReservedPath(_))));
        assert!(matches!(tx.stage_bytes("../x", vec![], false), Err(RepoError::InvalidPath(_))));
    }

    #[test]
    fn republishing_replaces_previous_content() {
        let (_t, r) = repo();
        let mut tx = r.begin_transaction().unwrap();
        tx.stage_bytes("app/f", b"v1".to_vec(), false).unwrap();
        tx.publish("j1").unwrap();
        let mut tx = r.begin_transaction().unwrap();
        tx.stage_bytes("app/f", b"v2".to_vec(), false).unwrap();
        tx.stage_bytes("other", b"o".to_vec(), false).unwrap();
        let head = tx.publish("j2").unwrap().head;
        let cat = r.load_catalog(&head).unwrap();
        assert_eq!(cat.get("app/f").unwrap().object, Some(ObjectRef::of(b"v2")));
        assert!(cat.get("other").is_some());
        assert!(r.verify().unwrap().is_ok());
    }

    #[test]
    fn identical_publish_adds_no_content_objects() {
        let (t, r) = repo();
        let src = t.path().join("src");
        tree(&src, &[("bin/a", "a", true), ("bin/b", "b", true)]);
        let mut tx = r.begin_transaction().unwrap();
        tx.stage(&src, "p").unwrap();
        let first = tx.publish("j1").unwrap();
        let before = r.object_names().unwrap();
        let mut tx = r.begin_transaction().unwrap();
        tx.stage(&src, "p").unwrap();
        let second = tx.publish("j2").unwrap();
        let after = r.object_names().unwrap();
        assert_eq!(second.head.revision, first.head.revision + 1);
        assert_eq!(second.head.job_id, "j2");
        // only the new revision-file object and the new catalog
        let new: Vec<_> = after.difference(&before).collect();
        assert_eq!(new.len(), 2);
        assert!(new.contains(&&second.head.root_catalog.sha256));
        assert!(new.contains(&&sha256_hex(b"2\n")));
    }

    #[test]
    fn store_write_failure_leaves_transaction_open() {
        let (_t, r) = repo();
        let mut tx = r.begin_transaction().unwrap();
        let bytes = b"payload".to_vec();
        let sha = sha256_hex(&bytes);
        tx.stage_bytes("f", bytes, false).unwrap();
        // a plain file where the fanout directory should go
        let fan = r.root().join(OBJECTS_DIR).join(&sha[..2]);
        fs::write(&fan, "blocker").unwrap();
        assert!(matches!(tx.publish("j"), Err(RepoError::StoreWriteFailure { .. })));
        assert_eq!(tx.state(), TxState::Open);
        assert_eq!(r.read_head().unwrap().revision, 0);
        fs::remove_file(&fan).unwrap();
        assert_eq!(tx.publish("j").unwrap().head.revision, 1);
    }

    #[test]
    fn revision_counts_publishes() {
        let (_t, r) = repo();
        for n in 1..=5u64 {
            let mut tx = r.begin_transaction().unwrap();
            tx.stage_bytes(&format!("f{n}"), vec![n as u8], false).unwrap();
            tx.publish(&format!("job{n}")).unwrap();
            let head = r.read_head().unwrap();
            assert_eq!(head.revision, n);
            let cat = r.load_catalog(&head).unwrap();
            let rev = cat.get(REVISION_FILE).unwrap().object.clone().unwrap();
            assert_eq!(r.read_verified(&rev).unwrap(), format!("{n}\n").into_bytes());
        }
    }

    #[test]
    fn verify_reports_exactly_the_flipped_object() {
        let (_t, r) = repo();
        let mut tx = r.begin_transaction().unwrap();
        tx.stage_bytes("a", b"aaaa".to_vec(), false).unwrap();
        tx.stage_bytes("b", b"bbbb".to_vec(), true).unwrap();
        tx.publish("j").unwrap();
        assert!(r.verify().unwrap().is_ok());
        let sha = sha256_hex(b"bbbb");
        let path = r.object_path(&sha);
        let mut bytes = fs::read(&path).unwrap();
        bytes[1] ^= 0x01;
        fs::write(&path, bytes).unwrap();
        let rep = r.verify().unwrap();
        assert_eq!(rep.failures, vec![IntegrityFailure { object: sha, problem: IntegrityProblem::DigestMismatch }]);
    }

    #[test]
    fn corrupt_head_detected() {
        let (_t, r) = repo();
        for bad in ["", "zz 1 j\n", &format!("{} x j\n", "a".repeat(64)), &format!("{} 1 j\n", "a".repeat(64))] {
            fs::write(r.root().join(HEAD_FILE), bad).unwrap();
            assert!(matches!(r.read_head(), Err(RepoError::CorruptHead(_))), "{bad:?}");
        }
    }

    #[test]
    fn open_requires_init() {
        let tmp = TempDir::new().unwrap();
        assert!(matches!(Repository::open(tmp.path()), Err(RepoError::NotInitialized(_))));
        Repository::init(tmp.path()).unwrap();
        let head = Repository::open(tmp.path()).unwrap().read_head().unwrap();
        // re-init keeps the existing head
        Repository::init(tmp.path()).unwrap();
        assert_eq!(Repository::open(tmp.path()).unwrap().read_head().unwrap(), head);
    }
}
