//! Execution-environment coordinates and matrix expansion.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::recipe::Recipe;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TargetError {
    #[error("invalid target field {0:?}: expected [A-Za-z0-9_]+")]
    InvalidField(String),
    #[error("invalid target id {0:?}: expected <arch>-<os>-<site>")]
    InvalidId(String),
    #[error("invalid target pattern {0:?}: expected three `-`-separated fields, each a name or `*`")]
    InvalidPattern(String),
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),
    #[error("target filter of {0} eliminates every matrix combination")]
    EmptyTargetSet(String),
}

/// Target fields use `[A-Za-z0-9_]+`. `-` is excluded so that target ids
/// split unambiguously.
pub fn valid_field(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_')
}

/// One (ARCH, OS, SITE) coordinate.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Target {
    arch: String,
    os: String,
    site: String,
}

impl Target {
    pub fn new(arch: &str, os: &str, site: &str) -> Result<Self, TargetError> {
        for f in [arch, os, site] {
            if !valid_field(f) {
                return Err(TargetError::InvalidField(f.to_string()));
            }
        }
        Ok(Target { arch: arch.into(), os: os.into(), site: site.into() })
    }

    pub fn arch(&self) -> &str {
        &self.arch
    }

    pub fn os(&self) -> &str {
        &self.os
    }

    pub fn site(&self) -> &str {
        &self.site
    }

    /// `<arch>-<os>-<site>`
    pub fn id(&self) -> String {
        format!("{}-{}-{}", self.arch, self.os, self.site)
    }

    pub fn parse_id(id: &str) -> Result<Self, TargetError> {
        let parts: Vec<&str> = id.split('-').collect();
        match parts.as_slice() {
            [a, o, s] => Target::new(a, o, s).map_err(|_| TargetError::InvalidId(id.to_string())),
            _ => Err(TargetError::InvalidId(id.to_string())),
        }
    }
}

pub fn target_id(t: &Target) -> String {
    t.id()
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}-{}", self.arch, self.os, self.site)
    }
}

impl FromStr for Target {
    type Err = TargetError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Target::parse_id(s)
    }
}

impl TryFrom<String> for Target {
    type Error = TargetError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Target::parse_id(&s)
    }
}

impl From<Target> for String {
    fn from(t: Target) -> String {
        t.id()
    }
}

/// `ARCH-OS-SITE` with `*` allowed as a whole field.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TargetPattern {
    fields: [Option<String>; 3],
}

impl TargetPattern {
    pub fn matches(&self, t: &Target) -> bool {
        let values = [t.arch(), t.os(), t.site()];
        self.fields
            .iter()
            .zip(values)
            .all(|(p, v)| p.as_deref().is_none_or(|p| p == v))
    }
}

impl FromStr for TargetPattern {
    type Err = TargetError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || TargetError::InvalidPattern(s.to_string());
        let parts: Vec<&str> = s.split('-').collect();
        let [a, o, si] = parts.as_slice() else { return Err(bad()) };
        let field = |f: &str| -> Result<Option<String>, TargetError> {
            match f {
                "*" => Ok(None),
                f if valid_field(f) => Ok(Some(f.to_string())),
                _ => Err(bad()),
            }
        };
        Ok(TargetPattern { fields: [field(a)?, field(o)?, field(si)?] })
    }
}

impl fmt::Display for TargetPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = self.fields.iter().map(|p| p.as_deref().unwrap_or("*")).collect();
        f.write_str(&parts.join("-"))
    }
}

/// Axes of the simulated multi-site matrix, plus per-site extra environment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixConfig {
    pub arches: Vec<String>,
    pub oses: Vec<String>,
    pub sites: Vec<String>,
    /// site -> `NAME=value` bindings
    #[serde(default)]
    pub site_env: BTreeMap<String, Vec<String>>,
}

/// Variables the pipeline sets itself; sites may not override them.
pub const RESERVED_ENV: &[&str] = &[
    "ARCH",
    "OS",
    "SITE",
    "PATH",
    "SOURCE_DIR",
    "SOURCE_BUNDLE",
    "BUILD_DIR",
    "INSTALL_PREFIX",
    "DEPLOY_PREFIX",
    "DEP_MODULE_PATH",
    "RECIPE_DIR",
    "RECIPE_NAME",
    "RECIPE_VERSION",
];

fn valid_env_name(s: &str) -> bool {
    let mut b = s.bytes();
    matches!(b.next(), Some(c) if c.is_ascii_alphabetic() || c == b'_')
        && b.all(|c| c.is_ascii_alphanumeric() || c == b'_')
}

impl MatrixConfig {
    pub fn new(arches: &[&str], oses: &[&str], sites: &[&str]) -> Result<Self, TargetError> {
        let own = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        let m = MatrixConfig {
            arches: own(arches),
            oses: own(oses),
            sites: own(sites),
            site_env: BTreeMap::new(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), TargetError> {
        for (axis, values) in [("arches", &self.arches), ("oses", &self.oses), ("sites", &self.sites)] {
            if values.is_empty() {
                return Err(TargetError::InvalidMatrix(format!("`{axis}` is empty")));
            }
            let mut seen = BTreeSet::new();
            for v in values {
                if !valid_field(v) {
                    return Err(TargetError::InvalidField(v.clone()));
                }
                if !seen.insert(v) {
                    return Err(TargetError::InvalidMatrix(format!("duplicate {v:?} in `{axis}`")));
                }
            }
        }
        // Modulefiles live under `<root>/modulefiles/...`, next to `<root>/<arch>/...`.
        if self.arches.iter().any(|a| a == "modulefiles") {
            return Err(TargetError::InvalidMatrix("`modulefiles` is reserved as an arch name".into()));
        }
        for (site, bindings) in &self.site_env {
            if !self.sites.contains(site) {
                return Err(TargetError::InvalidMatrix(format!("site_env names unknown site {site:?}")));
            }
            for b in bindings {
                let Some((name, _)) = b.split_once('=') else {
                    return Err(TargetError::InvalidMatrix(format!("binding {b:?} is not NAME=value")));
                };
                if !valid_env_name(name) || RESERVED_ENV.contains(&name) {
                    return Err(TargetError::InvalidMatrix(format!(
                        "binding {b:?} uses an invalid or reserved variable name"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn cardinality(&self) -> usize {
        self.arches.len() * self.oses.len() * self.sites.len()
    }

    /// Full product, sorted by (arch, os, site).
    pub fn all_targets(&self) -> Vec<Target> {
        let mut out = Vec::with_capacity(self.cardinality());
        for a in &self.arches {
            for o in &self.oses {
                for s in &self.sites {
                    out.push(Target { arch: a.clone(), os: o.clone(), site: s.clone() });
                }
            }
        }
        out.sort();
        out
    }

    pub fn site_bindings(&self, site: &str) -> Vec<(String, String)> {
        self.site_env
            .get(site)
            .map(|bs| {
                bs.iter()
                    .filter_map(|b| b.split_once('='))
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Targets a recipe is built for: the product, kept if it matches any
    /// include pattern (all, when there are none) and no exclude pattern.
    pub fn expand(&self, recipe: &Recipe) -> Result<Vec<Target>, TargetError> {
        let targets: Vec<Target> = match &recipe.target_filter {
            None => self.all_targets(),
            Some(f) => self
                .all_targets()
                .into_iter()
                .filter(|t| f.include.is_empty() || f.include.iter().any(|p| p.matches(t)))
                .filter(|t| !f.exclude.iter().any(|p| p.matches(t)))
                .collect(),
        };
        if targets.is_empty() {
            return Err(TargetError::EmptyTargetSet(recipe.id().to_string()));
        }
        Ok(targets)
    }
}

pub fn expand(config: &MatrixConfig, recipe: &Recipe) -> Result<Vec<Target>, TargetError> {
    config.expand(recipe)
}
