//! A simulated remote site: notices head changes, pulls missing objects into
//! a local cache, materializes the published tree and runs a recipe's
//! researcher tests against it.
//!
//! Cache layout:
//!
//! ```text
//! <cache>/HEAD               last synced head, same line format as the repo
//! <cache>/objects/xx/...     verified copies of fetched objects
//! <cache>/trees/<catalog>/   materialized tree for one head
//! <cache>/current            symlink to the tree of the last synced head
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{ErrorKind, Write};
use std::os::unix::fs::{symlink, PermissionsExt};
use std::path::{Path, PathBuf};
use std::time::Duration;

use thiserror::Error;

use crate::env::{env_var_stem, parse_modulefile, relative_modulefile, relative_prefix, EnvError, ModuleDirective};
use crate::pipeline::exec::{self, Invocation, ScriptStatus};
use crate::recipe::{Recipe, RecipeId};
use crate::repo::{
    head_line, list_objects, object_rel_path, parse_head, sha256_hex, write_object_file, Catalog, EntryMode,
    IntegrityProblem, ObjectRef, RepoError, RepoHead, Repository, HEAD_FILE, OBJECTS_DIR, REVISION_FILE,
};
use crate::target::Target;

const TREES_DIR: &str = "trees";
const CURRENT_LINK: &str = "current";

#[derive(Debug, Error)]
pub enum SiteError {
    #[error(transparent)]
    Repo(#[from] RepoError),
    #[error("integrity failure on object {object}: {problem:?}")]
    Integrity { object: String, problem: IntegrityProblem },
    #[error("{recipe} is not delivered for {target}: {missing} absent from the synced catalog")]
    NotDelivered { recipe: RecipeId, target: Target, missing: String },
    #[error("cache has not been synced yet")]
    NotSynced,
    #[error("cannot relocate modulefile {0}")]
    Unrelocatable(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SiteError + '_ {
    move |e| SiteError::Io(path.to_path_buf(), e)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PollResult {
    Unchanged,
    Changed(RepoHead),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyncReport {
    pub revision: u64,
    /// Content objects newly transferred; the root catalog and the revision
    /// counter are tallied separately in `metadata_fetched`.
    pub objects_fetched: usize,
    pub bytes_fetched: u64,
    pub metadata_fetched: usize,
    pub tree: PathBuf,
}

impl fmt::Display for SyncReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "revision {}: fetched {} objects, {} bytes", self.revision, self.objects_fetched, self.bytes_fetched)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MveOutcome {
    pub script: PathBuf,
    pub status: ScriptStatus,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MveReport {
    pub recipe: RecipeId,
    pub target: Target,
    pub revision: u64,
    pub outcomes: Vec<MveOutcome>,
}

impl MveReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.status.success())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for o in &self.outcomes {
            let verdict = if o.status.success() { "ok".to_string() } else { format!("FAIL ({})", o.status) };
            out.push_str(&format!("{} {verdict}\n", o.script.display()));
            if !o.status.success() {
                for line in o.output.lines() {
                    out.push_str(&format!("    {line}\n"));
                }
            }
        }
        let verdict = if self.passed() { "pass" } else { "fail" };
        out.push_str(&format!("mve {}@{} revision {}: {verdict}\n", self.recipe, self.target, self.revision));
        out
    }
}

#[derive(Debug)]
pub struct SiteCache {
    repo: Repository,
    root: PathBuf,
    last_head: Option<RepoHead>,
    lifetime_objects: usize,
    lifetime_bytes: u64,
}

impl SiteCache {
    /// Opens (creating if needed) a cache for `repo` at `cache_root`.
    pub fn open(repo: &Path, cache_root: &Path) -> Result<Self, SiteError> {
        let repo = Repository::open(repo)?;
        fs::create_dir_all(cache_root.join(OBJECTS_DIR)).map_err(io_err(cache_root))?;
        fs::create_dir_all(cache_root.join(TREES_DIR)).map_err(io_err(cache_root))?;
        let head_path = cache_root.join(HEAD_FILE);
        let last_head = match fs::read_to_string(&head_path) {
            Ok(text) => Some(parse_head(&text, |sha| {
                fs::metadata(cache_root.join(object_rel_path(sha))).ok().map(|m| m.len())
            })?),
            Err(e) if e.kind() == ErrorKind::NotFound => None,
            Err(e) => return Err(SiteError::Io(head_path, e)),
        };
        Ok(SiteCache { repo, root: cache_root.to_path_buf(), last_head, lifetime_objects: 0, lifetime_bytes: 0 })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn last_head(&self) -> Option<&RepoHead> {
        self.last_head.as_ref()
    }

    /// Content objects and bytes fetched by this instance.
    pub fn lifetime_fetched(&self) -> (usize, u64) {
        (self.lifetime_objects, self.lifetime_bytes)
    }

    /// Every object present in the cache store.
    pub fn cached_objects(&self) -> Result<BTreeSet<String>, SiteError> {
        Ok(list_objects(&self.root)?)
    }

    /// Tree of the last synced head.
    pub fn current_tree(&self) -> Option<PathBuf> {
        self.last_head.as_ref().map(|h| self.tree_dir(h))
    }

    fn tree_dir(&self, head: &RepoHead) -> PathBuf {
        self.root.join(TREES_DIR).join(&head.root_catalog.sha256)
    }

    fn cached_path(&self, sha: &str) -> PathBuf {
        self.root.join(object_rel_path(sha))
    }

    /// Compares the repository's root catalog hash with the last synced one.
    pub fn poll(&self) -> Result<PollResult, SiteError> {
        let head = self.repo.read_head()?;
        match &self.last_head {
            Some(last) if last.root_catalog.sha256 == head.root_catalog.sha256 => Ok(PollResult::Unchanged),
            _ => Ok(PollResult::Changed(head)),
        }
    }

    /// Polls and syncs if the head moved.
    pub fn update(&mut self) -> Result<Option<SyncReport>, SiteError> {
        match self.poll()? {
            PollResult::Unchanged => Ok(None),
            PollResult::Changed(head) => self.sync(&head).map(Some),
        }
    }

    /// Fetches and verifies one object unless already cached. Returns the
    /// number of bytes transferred (`None` if it was cached).
    fn fetch(&self, obj: &ObjectRef) -> Result<Option<u64>, SiteError> {
        if self.cached_path(&obj.sha256).is_file() {
            return Ok(None);
        }
        let bytes = self.repo.read_object(&obj.sha256).map_err(|e| match e {
            RepoError::MissingObject(object) => SiteError::Integrity { object, problem: IntegrityProblem::Missing },
            e => SiteError::Repo(e),
        })?;
        if sha256_hex(&bytes) != obj.sha256 {
            return Err(SiteError::Integrity { object: obj.sha256.clone(), problem: IntegrityProblem::DigestMismatch });
        }
        if bytes.len() as u64 != obj.size {
            return Err(SiteError::Integrity {
                object: obj.sha256.clone(),
                problem: IntegrityProblem::SizeMismatch { expected: obj.size, found: bytes.len() as u64 },
            });
        }
        write_object_file(&self.root, &obj.sha256, &bytes)?;
        Ok(Some(bytes.len() as u64))
    }

    fn read_cached(&self, sha: &str) -> Result<Vec<u8>, SiteError> {
        let p = self.cached_path(sha);
        fs::read(&p).map_err(io_err(&p))
    }

    /// Brings the cache to `head`: fetches the objects it lacks, verifies
    /// them, materializes the tree and switches `current` to it. On any
    /// failure the previous head stays in effect.
    pub fn sync(&mut self, head: &RepoHead) -> Result<SyncReport, SiteError> {
        let mut metadata_fetched = usize::from(self.fetch(&head.root_catalog)?.is_some());
        let catalog = Catalog::parse(&self.read_cached(&head.root_catalog.sha256)?).map_err(|e| {
            SiteError::Integrity {
                object: head.root_catalog.sha256.clone(),
                problem: IntegrityProblem::CorruptCatalog(e.to_string()),
            }
        })?;

        let mut objects_fetched = 0;
        let mut bytes_fetched = 0;
        let mut revision_seen = false;
        for (entry, obj) in catalog.files() {
            let fetched = self.fetch(obj)?;
            if entry.path == REVISION_FILE {
                revision_seen = true;
                metadata_fetched += usize::from(fetched.is_some());
                let content = self.read_cached(&obj.sha256)?;
                if content != format!("{}\n", head.revision).as_bytes() {
                    return Err(SiteError::Integrity {
                        object: obj.sha256.clone(),
                        problem: IntegrityProblem::RevisionMismatch {
                            found: String::from_utf8_lossy(&content).into_owned(),
                        },
                    });
                }
            } else if let Some(n) = fetched {
                objects_fetched += 1;
                bytes_fetched += n;
            }
        }
        if !revision_seen {
            return Err(SiteError::Integrity {
                object: head.root_catalog.sha256.clone(),
                problem: IntegrityProblem::RevisionMismatch { found: String::new() },
            });
        }

        let tree = self.tree_dir(head);
        if !tree.is_dir() {
            self.materialize(&catalog, &tree)?;
        }
        self.switch_current(head)?;
        self.write_head(head)?;
        self.prune_trees(head);
        self.last_head = Some(head.clone());
        self.lifetime_objects += objects_fetched;
        self.lifetime_bytes += bytes_fetched;
        log::info!("synced revision {} ({} new objects)", head.revision, objects_fetched);
        Ok(SyncReport { revision: head.revision, objects_fetched, bytes_fetched, metadata_fetched, tree })
    }

    fn materialize(&self, catalog: &Catalog, tree: &Path) -> Result<(), SiteError> {
        let trees = self.root.join(TREES_DIR);
        let staging = tempfile::Builder::new().prefix(".tmp").tempdir_in(&trees).map_err(io_err(&trees))?;
        for entry in catalog.entries() {
            let dest = staging.path().join(&entry.path);
            match (&entry.mode, &entry.object) {
                (EntryMode::Directory, _) => fs::create_dir_all(&dest).map_err(io_err(&dest))?,
                (mode, Some(obj)) => {
                    if let Some(parent) = dest.parent() {
                        fs::create_dir_all(parent).map_err(io_err(parent))?;
                    }
                    let mut f = File::create(&dest).map_err(io_err(&dest))?;
                    f.write_all(&self.read_cached(&obj.sha256)?).map_err(io_err(&dest))?;
                    let bits = if *mode == EntryMode::Executable { 0o755 } else { 0o644 };
                    fs::set_permissions(&dest, fs::Permissions::from_mode(bits)).map_err(io_err(&dest))?;
                }
                (_, None) => unreachable!("catalog files carry an object"),
            }
        }
        fs::set_permissions(staging.path(), fs::Permissions::from_mode(0o755)).map_err(io_err(staging.path()))?;
        let staged = staging.keep();
        fs::rename(&staged, tree).map_err(io_err(tree))
    }

    fn switch_current(&self, head: &RepoHead) -> Result<(), SiteError> {
        let link = self.root.join(CURRENT_LINK);
        let tmp = self.root.join(format!(".{CURRENT_LINK}.{}", std::process::id()));
        let _ = fs::remove_file(&tmp);
        let rel = Path::new(TREES_DIR).join(&head.root_catalog.sha256);
        symlink(&rel, &tmp).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &link).map_err(io_err(&link))
    }

    fn write_head(&self, head: &RepoHead) -> Result<(), SiteError> {
        let path = self.root.join(HEAD_FILE);
        let mut tmp = tempfile::Builder::new().prefix(".HEAD").tempfile_in(&self.root).map_err(io_err(&self.root))?;
        tmp.write_all(head_line(head).as_bytes()).map_err(io_err(&path))?;
        tmp.persist(&path).map_err(|e| SiteError::Io(path.clone(), e.error))?;
        Ok(())
    }

    /// Drops materialized trees other than `keep`; objects stay cached.
    fn prune_trees(&self, keep: &RepoHead) {
        let Ok(rd) = fs::read_dir(self.root.join(TREES_DIR)) else { return };
        for entry in rd.flatten() {
            if entry.file_name().to_string_lossy() != keep.root_catalog.sha256 {
                let _ = fs::remove_dir_all(entry.path());
            }
        }
    }

    /// Runs `recipe`'s researcher tests with its delivered modulefile for
    /// `target` applied, pointed at the synced tree.
    pub fn run_mve(
        &self,
        recipe: &Recipe,
        recipe_dir: &Path,
        target: &Target,
        timeout: Duration,
    ) -> Result<MveReport, SiteError> {
        let head = self.last_head.as_ref().ok_or(SiteError::NotSynced)?;
        let id = recipe.id();
        let catalog = Catalog::parse(&self.read_cached(&head.root_catalog.sha256)?)?;
        let rel_prefix = relative_prefix(target, &id).to_string_lossy().into_owned();
        let rel_module = relative_modulefile(target, &id).to_string_lossy().into_owned();
        for (path, dir) in [(&rel_prefix, true), (&rel_module, false)] {
            let present = catalog.get(path).is_some_and(|e| (e.mode == EntryMode::Directory) == dir);
            if !present {
                return Err(SiteError::NotDelivered { recipe: id, target: target.clone(), missing: path.clone() });
            }
        }

        let tree = self.tree_dir(head);
        let module_path = tree.join(&rel_module);
        let text = fs::read_to_string(&module_path).map_err(io_err(&module_path))?;
        let directives = parse_modulefile(&text)?;
        let dir_var = format!("{}_DIR", env_var_stem(&id.name));
        let built_root = directives
            .iter()
            .find_map(|d| match d {
                ModuleDirective::SetEnv { var, value } if *var == dir_var => value.strip_suffix(&rel_prefix),
                _ => None,
            })
            .map(|r| r.trim_end_matches('/').to_string())
            .ok_or_else(|| SiteError::Unrelocatable(module_path.display().to_string()))?;
        let tree_str = tree.to_string_lossy().into_owned();

        let scratch = tempfile::Builder::new().prefix("mve").tempdir_in(&self.root).map_err(io_err(&self.root))?;
        let run_dir = scratch.path().join("run");
        fs::create_dir_all(&run_dir).map_err(io_err(&run_dir))?;
        let mut env = BTreeMap::from([
            ("PATH".to_string(), exec::MINIMAL_PATH.to_string()),
            ("HOME".to_string(), run_dir.to_string_lossy().into_owned()),
            ("TMPDIR".to_string(), run_dir.to_string_lossy().into_owned()),
            ("ARCH".to_string(), target.arch().to_string()),
            ("OS".to_string(), target.os().to_string()),
            ("SITE".to_string(), target.site().to_string()),
        ]);
        for d in &directives {
            d.relocate(&built_root, &tree_str).apply(&mut env);
        }

        let mut outcomes = Vec::new();
        for (i, test) in recipe.researcher_tests.iter().enumerate() {
            let script = recipe_dir.join(test);
            let log_path = scratch.path().join(format!("{i}.log"));
            let mut log = File::create(&log_path).map_err(io_err(&log_path))?;
            let status = exec::run(&Invocation::Shell(script.clone()), &run_dir, &env, &mut log, timeout)
                .map_err(io_err(&script))?;
            let output = fs::read_to_string(&log_path).unwrap_or_default();
            outcomes.push(MveOutcome { script: test.into(), status, output });
        }
        Ok(MveReport { recipe: id, target: target.clone(), revision: head.revision, outcomes })
    }
}
