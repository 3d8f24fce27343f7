//! Canonical catalog serialization.
//!
//! One line per entry, `path<TAB>mode<TAB>sha256<TAB>size<LF>`, sorted
//! bytewise by path. Directories carry `-` and `0` in the object columns.
//! A valid catalog has exactly one byte representation.

use std::fmt;
use std::str::FromStr;

use crate::recipe::valid_sha256;

use super::{ObjectRef, RepoError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EntryMode {
    File,
    Executable,
    Directory,
}

impl fmt::Display for EntryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EntryMode::File => "file",
            EntryMode::Executable => "executable",
            EntryMode::Directory => "directory",
        })
    }
}

impl FromStr for EntryMode {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "file" => Ok(EntryMode::File),
            "executable" => Ok(EntryMode::Executable),
            "directory" => Ok(EntryMode::Directory),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CatalogEntry {
    pub path: String,
    pub mode: EntryMode,
    /// `None` exactly for directories.
    pub object: Option<ObjectRef>,
}

/// Repo-relative path: `/`-separated non-empty components, no `.`/`..`,
/// no control characters.
pub fn valid_repo_path(p: &str) -> bool {
    !p.is_empty()
        && !p.chars().any(|c| c.is_control())
        && p.split('/').all(|c| !c.is_empty() && c != "." && c != "..")
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Catalog {
    entries: Vec<CatalogEntry>,
}

impl Catalog {
    /// Sorts entries and checks uniqueness and entry shape.
    pub fn new(mut entries: Vec<CatalogEntry>) -> Result<Self, RepoError> {
        entries.sort_by(|a, b| a.path.cmp(&b.path));
        for w in entries.windows(2) {
            if w[0].path == w[1].path {
                return Err(RepoError::CorruptCatalog(format!("duplicate path {:?}", w[0].path)));
            }
        }
        for e in &entries {
            if !valid_repo_path(&e.path) {
                return Err(RepoError::InvalidPath(e.path.clone()));
            }
            if (e.mode == EntryMode::Directory) != e.object.is_none() {
                return Err(RepoError::CorruptCatalog(format!("entry {:?} has the wrong shape", e.path)));
            }
        }
        Ok(Catalog { entries })
    }

    pub fn entries(&self) -> &[CatalogEntry] {
        &self.entries
    }

    pub fn get(&self, path: &str) -> Option<&CatalogEntry> {
        self.entries
            .binary_search_by(|e| e.path.as_str().cmp(path))
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn files(&self) -> impl Iterator<Item = (&CatalogEntry, &ObjectRef)> {
        self.entries.iter().filter_map(|e| e.object.as_ref().map(|o| (e, o)))
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = String::new();
        for e in &self.entries {
            match &e.object {
                Some(o) => out.push_str(&format!("{}\t{}\t{}\t{}\n", e.path, e.mode, o.sha256, o.size)),
                None => out.push_str(&format!("{}\t{}\t-\t0\n", e.path, e.mode)),
            }
        }
        out.into_bytes()
    }

    /// Strict inverse of [`Catalog::serialize`]: rejects anything that is
    /// not in canonical form.
    pub fn parse(bytes: &[u8]) -> Result<Self, RepoError> {
        let bad = |why: String| RepoError::CorruptCatalog(why);
        let text = std::str::from_utf8(bytes).map_err(|_| bad("not UTF-8".into()))?;
        if !text.is_empty() && !text.ends_with('\n') {
            return Err(bad("missing final newline".into()));
        }
        let mut entries: Vec<CatalogEntry> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let cols: Vec<&str> = line.split('\t').collect();
            let [path, mode, sha, size] = cols.as_slice() else {
                return Err(bad(format!("line {}: expected 4 columns", n + 1)));
            };
            let mode: EntryMode = mode.parse().map_err(|_| bad(format!("line {}: bad mode", n + 1)))?;
            let object = match (mode, *sha, *size) {
                (EntryMode::Directory, "-", "0") => None,
                (EntryMode::Directory, _, _) => return Err(bad(format!("line {}: directory with object", n + 1))),
                (_, sha, size) => {
                    let size_n: u64 = size.parse().map_err(|_| bad(format!("line {}: bad size", n + 1)))?;
                    if !valid_sha256(sha) || size_n.to_string() != size {
                        return Err(bad(format!("line {}: bad object reference", n + 1)));
                    }
                    Some(ObjectRef { sha256: sha.to_string(), size: size_n })
                }
            };
            if let Some(prev) = entries.last() {
                if prev.path.as_str() >= *path {
                    return Err(bad(format!("line {}: paths not strictly sorted", n + 1)));
                }
            }
            if !valid_repo_path(path) {
                return Err(RepoError::InvalidPath(path.to_string()));
            }
            entries.push(CatalogEntry { path: path.to_string(), mode, object });
        }
        Ok(Catalog { entries })
    }
}
