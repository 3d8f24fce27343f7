//! Recipe corpus indexing and commit-event handling.
//!
//! A corpus is a directory tree with one `rade.json` per recipe directory,
//! conventionally `<root>/<name>/<version>/rade.json`. A commit path maps to
//! the recipe whose directory contains it.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Component, Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

use crate::recipe::{parse_manifest, Recipe, RecipeError, RecipeId, MANIFEST_FILE};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus root {0} is not a readable directory")]
    BadRoot(PathBuf),
    #[error("{path}: {source}")]
    Manifest { path: PathBuf, source: RecipeError },
    #[error("duplicate recipe {id}: declared in {first} and {second}")]
    DuplicateRecipe { id: RecipeId, first: PathBuf, second: PathBuf },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Immutable index of a loaded corpus, keyed by (name, version).
#[derive(Debug, Clone)]
pub struct Corpus {
    root: PathBuf,
    recipes: BTreeMap<RecipeId, Recipe>,
    /// recipe -> directory, relative to root
    dirs: BTreeMap<RecipeId, PathBuf>,
}

impl Corpus {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.recipes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recipes.is_empty()
    }

    pub fn get(&self, id: &RecipeId) -> Option<&Recipe> {
        self.recipes.get(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &RecipeId> {
        self.recipes.keys()
    }

    pub fn recipes(&self) -> impl Iterator<Item = (&RecipeId, &Recipe)> {
        self.recipes.iter()
    }

    pub fn contains(&self, id: &RecipeId) -> bool {
        self.recipes.contains_key(id)
    }

    pub fn relative_dir(&self, id: &RecipeId) -> Option<&Path> {
        self.dirs.get(id).map(PathBuf::as_path)
    }

    /// Absolute directory holding the recipe's manifest and scripts.
    pub fn recipe_dir(&self, id: &RecipeId) -> Option<PathBuf> {
        self.dirs.get(id).map(|d| self.root.join(d))
    }

    pub fn versions_of<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a RecipeId> + 'a {
        self.recipes.keys().filter(move |id| id.name == name)
    }
}

fn check_referenced_files(recipe: &Recipe, dir: &Path) -> Result<(), RecipeError> {
    for (field, rel) in recipe.referenced_files() {
        let path = dir.join(rel);
        let meta = fs::metadata(&path).map_err(|_| RecipeError::InvariantViolation {
            field: field.clone(),
            reason: format!("{rel} does not exist in the recipe directory"),
        })?;
        if !meta.is_file() || meta.len() == 0 {
            return Err(RecipeError::InvariantViolation {
                field,
                reason: format!("{rel} must be a non-empty file"),
            });
        }
    }
    Ok(())
}

fn manifest_paths(root: &Path) -> Result<Vec<PathBuf>, CorpusError> {
    let meta = fs::metadata(root).map_err(|_| CorpusError::BadRoot(root.to_path_buf()))?;
    if !meta.is_dir() {
        return Err(CorpusError::BadRoot(root.to_path_buf()));
    }
    let mut out = Vec::new();
    let walker = WalkDir::new(root).sort_by_file_name().into_iter().filter_entry(|e| {
        e.depth() == 0 || !e.file_name().to_string_lossy().starts_with('.')
    });
    for entry in walker {
        let entry = entry.map_err(|e| CorpusError::Io {
            path: e.path().map(Path::to_path_buf).unwrap_or_else(|| root.to_path_buf()),
            source: e.into(),
        })?;
        if entry.file_type().is_file() && entry.file_name() == MANIFEST_FILE {
            out.push(entry.into_path());
        }
    }
    Ok(out)
}

fn load_one(root: &Path, manifest: &Path) -> Result<(Recipe, PathBuf), CorpusError> {
    let text = fs::read_to_string(manifest)
        .map_err(|source| CorpusError::Io { path: manifest.to_path_buf(), source })?;
    let dir = manifest.parent().expect("manifest has a parent");
    let annotate = |source| CorpusError::Manifest { path: manifest.to_path_buf(), source };
    let recipe = parse_manifest(&text).map_err(annotate)?;
    check_referenced_files(&recipe, dir).map_err(annotate)?;
    let rel = dir.strip_prefix(root).expect("walked below root").to_path_buf();
    Ok((recipe, rel))
}

/// Loads every manifest below `root`, failing on the first problem.
pub fn load_corpus(root: &Path) -> Result<Corpus, CorpusError> {
    let (corpus, mut errors) = load_corpus_lenient(root)?;
    if errors.is_empty() {
        Ok(corpus)
    } else {
        Err(errors.remove(0))
    }
}

/// Loads every manifest below `root`, returning the recipes that loaded
/// cleanly together with every error encountered.
pub fn load_corpus_lenient(root: &Path) -> Result<(Corpus, Vec<CorpusError>), CorpusError> {
    let mut corpus =
        Corpus { root: root.to_path_buf(), recipes: BTreeMap::new(), dirs: BTreeMap::new() };
    let mut errors = Vec::new();
    for manifest in manifest_paths(root)? {
        match load_one(root, &manifest) {
            Ok((recipe, rel)) => {
                let id = recipe.id();
                if let Some(first) = corpus.dirs.get(&id) {
                    errors.push(CorpusError::DuplicateRecipe {
                        id,
                        first: root.join(first).join(MANIFEST_FILE),
                        second: manifest,
                    });
                    continue;
                }
                corpus.dirs.insert(id.clone(), rel);
                corpus.recipes.insert(id, recipe);
            }
            Err(e) => errors.push(e),
        }
    }
    Ok((corpus, errors))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommitEvent {
    pub event_id: String,
    pub changed_paths: Vec<String>,
    pub timestamp: i64,
}

#[derive(Debug, Error)]
pub enum EventError {
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("{0}: malformed event: {1}")]
    Malformed(PathBuf, String),
    #[error("event {0:?} has no changed paths")]
    NoChangedPaths(String),
    #[error("event id must be non-empty and free of whitespace, got {0:?}")]
    BadEventId(String),
    #[error("event id {0:?} seen twice in one run")]
    DuplicateEventId(String),
}

impl CommitEvent {
    pub fn validate(&self) -> Result<(), EventError> {
        if self.event_id.is_empty() || self.event_id.chars().any(char::is_whitespace) {
            return Err(EventError::BadEventId(self.event_id.clone()));
        }
        if self.changed_paths.is_empty() {
            return Err(EventError::NoChangedPaths(self.event_id.clone()));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let ev: CommitEvent = serde_json::from_str(text).map_err(|e| e.to_string())?;
        Ok(ev)
    }

    pub fn load(path: &Path) -> Result<Self, EventError> {
        let text = fs::read_to_string(path).map_err(|e| EventError::Io(path.to_path_buf(), e))?;
        let ev = Self::parse(&text).map_err(|e| EventError::Malformed(path.to_path_buf(), e))?;
        ev.validate()?;
        Ok(ev)
    }
}

/// Normalizes a corpus-relative path; `None` if it escapes the root.
fn normalize(path: &str) -> Option<PathBuf> {
    let mut out = PathBuf::new();
    for c in Path::new(path).components() {
        match c {
            Component::Normal(p) => out.push(p),
            Component::CurDir => {}
            Component::ParentDir => {
                if !out.pop() {
                    return None;
                }
            }
            Component::RootDir | Component::Prefix(_) => return None,
        }
    }
    Some(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChangeSet {
    pub recipes: BTreeSet<RecipeId>,
    /// changed paths that belong to no recipe directory
    pub warnings: Vec<String>,
}

/// Recipes whose directory contains at least one changed path. A path under
/// nested recipe directories belongs to the innermost one.
pub fn changed_recipes(event: &CommitEvent, corpus: &Corpus) -> ChangeSet {
    let mut out = ChangeSet::default();
    for raw in &event.changed_paths {
        let owner = normalize(raw).and_then(|p| {
            corpus
                .dirs
                .iter()
                .filter(|(_, dir)| p.starts_with(dir) && p != **dir)
                .max_by_key(|(_, dir)| dir.components().count())
                .map(|(id, _)| id.clone())
        });
        match owner {
            Some(id) => {
                out.recipes.insert(id);
            }
            None => {
                warn!("event {}: path {raw:?} is outside every recipe directory", event.event_id);
                out.warnings.push(raw.clone());
            }
        }
    }
    out
}

/// A directory of pending commit events, one JSON file each. Processed
/// files are renamed with a `.done` suffix.
#[derive(Debug)]
pub struct EventSpool {
    dir: PathBuf,
    seen: BTreeSet<String>,
}

impl EventSpool {
    pub fn open(dir: &Path) -> Result<Self, EventError> {
        fs::create_dir_all(dir).map_err(|e| EventError::Io(dir.to_path_buf(), e))?;
        Ok(EventSpool { dir: dir.to_path_buf(), seen: BTreeSet::new() })
    }

    /// Pending event files in name order.
    pub fn pending(&self) -> Result<Vec<PathBuf>, EventError> {
        let rd = fs::read_dir(&self.dir).map_err(|e| EventError::Io(self.dir.clone(), e))?;
        let mut out = Vec::new();
        for entry in rd {
            let entry = entry.map_err(|e| EventError::Io(self.dir.clone(), e))?;
            let path = entry.path();
            let name = entry.file_name().to_string_lossy().into_owned();
            if path.is_file() && !name.ends_with(".done") && !name.starts_with('.') {
                out.push(path);
            }
        }
        out.sort();
        Ok(out)
    }

    /// Reads one event, rejecting ids already seen by this spool instance.
    pub fn read(&mut self, path: &Path) -> Result<CommitEvent, EventError> {
        let ev = CommitEvent::load(path)?;
        if !self.seen.insert(ev.event_id.clone()) {
            return Err(EventError::DuplicateEventId(ev.event_id));
        }
        Ok(ev)
    }

    pub fn mark_done(&self, path: &Path) -> Result<PathBuf, EventError> {
        let mut done = path.as_os_str().to_owned();
        done.push(".done");
        let done = PathBuf::from(done);
        fs::rename(path, &done).map_err(|e| EventError::Io(path.to_path_buf(), e))?;
        Ok(done)
    }
}
