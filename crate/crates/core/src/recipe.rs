//! Recipe manifests (`rade.json`): parsing, validation and canonical
//! serialization.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Component, Path};

use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::target::TargetPattern;
use crate::version::{Version, VersionConstraint};

pub const MANIFEST_FILE: &str = "rade.json";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecipeError {
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("schema violation at `{field}`: {reason}")]
    SchemaViolation { field: String, reason: String },
    #[error("invariant violation at `{field}`: {reason}")]
    InvariantViolation { field: String, reason: String },
}

impl RecipeError {
    fn schema(field: &str, reason: impl Into<String>) -> Self {
        RecipeError::SchemaViolation { field: field.to_string(), reason: reason.into() }
    }

    fn invariant(field: &str, reason: impl Into<String>) -> Self {
        RecipeError::InvariantViolation { field: field.to_string(), reason: reason.into() }
    }
}

/// Identity of a recipe within a corpus.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RecipeId {
    pub name: String,
    pub version: Version,
}

impl RecipeId {
    pub fn new(name: impl Into<String>, version: Version) -> Self {
        RecipeId { name: name.into(), version }
    }

    /// Parses `name/version`.
    pub fn parse(s: &str) -> Option<Self> {
        let (name, version) = s.split_once('/')?;
        if !valid_name(name) {
            return None;
        }
        Some(RecipeId { name: name.to_string(), version: Version::parse(version).ok()? })
    }
}

impl fmt::Display for RecipeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.name, self.version)
    }
}

/// `[a-z0-9][a-z0-9._-]*`
pub fn valid_name(name: &str) -> bool {
    let mut bytes = name.bytes();
    match bytes.next() {
        Some(b) if b.is_ascii_lowercase() || b.is_ascii_digit() => {}
        _ => return false,
    }
    bytes.all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || matches!(b, b'.' | b'_' | b'-'))
}

pub fn valid_sha256(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Source {
    pub url: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dependency {
    pub name: String,
    pub constraint: VersionConstraint,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scripts {
    pub build: String,
    pub check: String,
    pub deploy: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TargetFilter {
    pub include: Vec<TargetPattern>,
    pub exclude: Vec<TargetPattern>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Recipe {
    pub name: String,
    pub version: Version,
    pub source: Source,
    pub dependencies: Vec<Dependency>,
    pub scripts: Scripts,
    pub researcher_tests: Vec<String>,
    pub target_filter: Option<TargetFilter>,
}

impl Recipe {
    pub fn id(&self) -> RecipeId {
        RecipeId::new(self.name.clone(), self.version.clone())
    }

    /// Every relative path the manifest references, with the field it came from.
    pub fn referenced_files(&self) -> Vec<(String, &str)> {
        let mut out = vec![
            ("scripts.build".to_string(), self.scripts.build.as_str()),
            ("scripts.check".to_string(), self.scripts.check.as_str()),
            ("scripts.deploy".to_string(), self.scripts.deploy.as_str()),
        ];
        for (i, t) in self.researcher_tests.iter().enumerate() {
            out.push((format!("researcher_tests[{i}]"), t.as_str()));
        }
        out
    }

    /// Canonical manifest text. Keys are sorted and every optional list is
    /// written out, so parsing the result yields an identical recipe.
    pub fn to_manifest(&self) -> String {
        let mut doc = Map::new();
        doc.insert("name".into(), json!(self.name));
        doc.insert("version".into(), json!(self.version.as_str()));
        doc.insert("source".into(), json!({"url": self.source.url, "sha256": self.source.sha256}));
        doc.insert(
            "scripts".into(),
            json!({"build": self.scripts.build, "check": self.scripts.check, "deploy": self.scripts.deploy}),
        );
        doc.insert(
            "dependencies".into(),
            Value::Array(
                self.dependencies
                    .iter()
                    .map(|d| json!({"name": d.name, "constraint": d.constraint.to_string()}))
                    .collect(),
            ),
        );
        doc.insert("researcher_tests".into(), json!(self.researcher_tests));
        if let Some(filter) = &self.target_filter {
            let pats = |ps: &[TargetPattern]| ps.iter().map(|p| p.to_string()).collect::<Vec<_>>();
            doc.insert(
                "targets".into(),
                json!({"include": pats(&filter.include), "exclude": pats(&filter.exclude)}),
            );
        }
        let mut text = serde_json::to_string_pretty(&Value::Object(doc)).expect("json value");
        text.push('\n');
        text
    }
}

const TOP_LEVEL_KEYS: &[&str] =
    &["name", "version", "source", "scripts", "dependencies", "researcher_tests", "targets"];

fn check_keys(obj: &Map<String, Value>, allowed: &[&str], ctx: &str) -> Result<(), RecipeError> {
    for key in obj.keys() {
        if !allowed.contains(&key.as_str()) {
            let field = if ctx.is_empty() { key.clone() } else { format!("{ctx}.{key}") };
            return Err(RecipeError::schema(&field, "unknown key"));
        }
    }
    Ok(())
}

fn req<'a>(obj: &'a Map<String, Value>, key: &str, field: &str) -> Result<&'a Value, RecipeError> {
    obj.get(key).ok_or_else(|| RecipeError::schema(field, "missing required field"))
}

fn as_str<'a>(v: &'a Value, field: &str) -> Result<&'a str, RecipeError> {
    v.as_str().ok_or_else(|| RecipeError::schema(field, "expected a string"))
}

fn as_obj<'a>(v: &'a Value, field: &str) -> Result<&'a Map<String, Value>, RecipeError> {
    v.as_object().ok_or_else(|| RecipeError::schema(field, "expected a map"))
}

fn as_list<'a>(v: &'a Value, field: &str) -> Result<&'a Vec<Value>, RecipeError> {
    v.as_array().ok_or_else(|| RecipeError::schema(field, "expected a list"))
}

fn relative_path(v: &Value, field: &str) -> Result<String, RecipeError> {
    let s = as_str(v, field)?;
    let p = Path::new(s);
    if s.is_empty() {
        return Err(RecipeError::invariant(field, "empty path"));
    }
    if !p.components().all(|c| matches!(c, Component::Normal(_) | Component::CurDir)) {
        return Err(RecipeError::invariant(field, "path must stay inside the recipe directory"));
    }
    Ok(s.to_string())
}

fn patterns(v: Option<&Value>, field: &str) -> Result<Vec<TargetPattern>, RecipeError> {
    let Some(v) = v else { return Ok(Vec::new()) };
    as_list(v, field)?
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let f = format!("{field}[{i}]");
            let s = as_str(p, &f)?;
            s.parse::<TargetPattern>().map_err(|e| RecipeError::invariant(&f, e.to_string()))
        })
        .collect()
}

/// Parses one manifest document.
pub fn parse_manifest(text: &str) -> Result<Recipe, RecipeError> {
    let doc: Value =
        serde_json::from_str(text).map_err(|e| RecipeError::MalformedManifest(e.to_string()))?;
    let top = doc
        .as_object()
        .ok_or_else(|| RecipeError::schema("", "manifest must be a single top-level map"))?;
    check_keys(top, TOP_LEVEL_KEYS, "")?;

    let name = as_str(req(top, "name", "name")?, "name")?;
    if !valid_name(name) {
        return Err(RecipeError::invariant("name", format!("{name:?} does not match [a-z0-9][a-z0-9._-]*")));
    }
    let version_s = as_str(req(top, "version", "version")?, "version")?;
    let version =
        Version::parse(version_s).map_err(|e| RecipeError::invariant("version", e.to_string()))?;

    let source = as_obj(req(top, "source", "source")?, "source")?;
    check_keys(source, &["url", "sha256"], "source")?;
    let url = as_str(req(source, "url", "source.url")?, "source.url")?;
    if url.is_empty() {
        return Err(RecipeError::invariant("source.url", "empty url"));
    }
    let sha256 = as_str(req(source, "sha256", "source.sha256")?, "source.sha256")?;
    if !valid_sha256(sha256) {
        return Err(RecipeError::invariant(
            "source.sha256",
            "must be exactly 64 lowercase hex characters",
        ));
    }

    let scripts = as_obj(req(top, "scripts", "scripts")?, "scripts")?;
    check_keys(scripts, &["build", "check", "deploy"], "scripts")?;
    let scripts = Scripts {
        build: relative_path(req(scripts, "build", "scripts.build")?, "scripts.build")?,
        check: relative_path(req(scripts, "check", "scripts.check")?, "scripts.check")?,
        deploy: relative_path(req(scripts, "deploy", "scripts.deploy")?, "scripts.deploy")?,
    };

    let mut dependencies = Vec::new();
    if let Some(deps) = top.get("dependencies") {
        let mut seen = BTreeSet::new();
        for (i, d) in as_list(deps, "dependencies")?.iter().enumerate() {
            let f = format!("dependencies[{i}]");
            let d = as_obj(d, &f)?;
            check_keys(d, &["name", "constraint"], &f)?;
            let nf = format!("{f}.name");
            let cf = format!("{f}.constraint");
            let dep_name = as_str(req(d, "name", &nf)?, &nf)?;
            if !valid_name(dep_name) {
                return Err(RecipeError::invariant(&nf, format!("invalid name {dep_name:?}")));
            }
            if dep_name == name {
                return Err(RecipeError::invariant(&nf, "recipe depends on itself"));
            }
            if !seen.insert(dep_name) {
                return Err(RecipeError::invariant(&nf, format!("duplicate dependency {dep_name:?}")));
            }
            let constraint = VersionConstraint::parse(as_str(req(d, "constraint", &cf)?, &cf)?)
                .map_err(|e| RecipeError::invariant(&cf, e.to_string()))?;
            dependencies.push(Dependency { name: dep_name.to_string(), constraint });
        }
    }

    let mut researcher_tests = Vec::new();
    if let Some(tests) = top.get("researcher_tests") {
        for (i, t) in as_list(tests, "researcher_tests")?.iter().enumerate() {
            researcher_tests.push(relative_path(t, &format!("researcher_tests[{i}]"))?);
        }
    }

    let target_filter = match top.get("targets") {
        None => None,
        Some(t) => {
            let t = as_obj(t, "targets")?;
            check_keys(t, &["include", "exclude"], "targets")?;
            Some(TargetFilter {
                include: patterns(t.get("include"), "targets.include")?,
                exclude: patterns(t.get("exclude"), "targets.exclude")?,
            })
        }
    };

    Ok(Recipe {
        name: name.to_string(),
        version,
        source: Source { url: url.to_string(), sha256: sha256.to_string() },
        dependencies,
        scripts,
        researcher_tests,
        target_filter,
    })
}
