//! Dotted version strings and the constraint grammar used in recipe
//! dependency lists.
//!
//! Ordering splits on `.`, compares two components numerically when both are
//! all digits and lexicographically otherwise, and pads the shorter tuple
//! with `0` components. `1.2` and `1.2.0` therefore compare equal under
//! [`Version::cmp_components`]; the total [`Ord`] falls back to the raw string
//! so that distinct spellings stay distinct map keys.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VersionError {
    #[error("invalid version string {0:?}")]
    InvalidVersion(String),
    #[error("invalid version constraint {0:?}: {1}")]
    InvalidConstraint(String, &'static str),
    #[error("empty range in constraint {0:?}: low bound must be below high bound")]
    EmptyRange(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Version(String);

fn valid_component(c: &str) -> bool {
    !c.is_empty()
        && c
            .chars()
            .all(|ch| ch.is_ascii_alphanumeric() || matches!(ch, '_' | '-' | '+' | '~'))
}

fn cmp_component(a: &str, b: &str) -> Ordering {
    let numeric = |s: &str| s.bytes().all(|b| b.is_ascii_digit());
    if numeric(a) && numeric(b) {
        // Arbitrary-length digit strings: strip leading zeros, then longer wins.
        let a = a.trim_start_matches('0');
        let b = b.trim_start_matches('0');
        a.len().cmp(&b.len()).then_with(|| a.cmp(b))
    } else {
        a.cmp(b)
    }
}

impl Version {
    pub fn parse(s: &str) -> Result<Self, VersionError> {
        if s.split('.').all(valid_component) {
            Ok(Version(s.to_string()))
        } else {
            Err(VersionError::InvalidVersion(s.to_string()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Component-wise comparison with zero padding. This is the ordering
    /// used for constraint satisfaction and "maximum version" selection.
    pub fn cmp_components(&self, other: &Version) -> Ordering {
        let mut a = self.0.split('.');
        let mut b = other.0.split('.');
        loop {
            match (a.next(), b.next()) {
                (None, None) => return Ordering::Equal,
                (x, y) => {
                    let ord = cmp_component(x.unwrap_or("0"), y.unwrap_or("0"));
                    if ord != Ordering::Equal {
                        return ord;
                    }
                }
            }
        }
    }
}

impl Ord for Version {
    fn cmp(&self, other: &Self) -> Ordering {
        self.cmp_components(other).then_with(|| self.0.cmp(&other.0))
    }
}

impl PartialOrd for Version {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for Version {
    type Err = VersionError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Version::parse(s)
    }
}

impl TryFrom<String> for Version {
    type Error = VersionError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Version::parse(&s)
    }
}

impl From<Version> for String {
    fn from(v: Version) -> String {
        v.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintKind {
    Exact,
    AtLeast,
    Range,
}

/// `=1.0`, `>=1.2` or `>=1.2 <2.0` (high bound exclusive).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct VersionConstraint {
    kind: ConstraintKind,
    low: Version,
    high: Option<Version>,
}

impl VersionConstraint {
    pub fn exact(v: Version) -> Self {
        VersionConstraint { kind: ConstraintKind::Exact, low: v, high: None }
    }

    pub fn at_least(v: Version) -> Self {
        VersionConstraint { kind: ConstraintKind::AtLeast, low: v, high: None }
    }

    pub fn range(low: Version, high: Version) -> Result<Self, VersionError> {
        if low.cmp_components(&high) != Ordering::Less {
            return Err(VersionError::EmptyRange(format!(">={low} <{high}")));
        }
        Ok(VersionConstraint { kind: ConstraintKind::Range, low, high: Some(high) })
    }

    pub fn parse(text: &str) -> Result<Self, VersionError> {
        let bad = |why| VersionError::InvalidConstraint(text.to_string(), why);
        let parts: Vec<&str> = text.split_whitespace().collect();
        match parts.as_slice() {
            [single] => {
                if let Some(v) = single.strip_prefix(">=") {
                    Ok(Self::at_least(Version::parse(v).map_err(|_| bad("bad version"))?))
                } else if let Some(v) = single.strip_prefix('=') {
                    Ok(Self::exact(Version::parse(v).map_err(|_| bad("bad version"))?))
                } else {
                    Err(bad("expected `=` or `>=` operator"))
                }
            }
            [lo, hi] => {
                let lo = lo.strip_prefix(">=").ok_or_else(|| bad("range must start with `>=`"))?;
                let hi = hi.strip_prefix('<').ok_or_else(|| bad("range must end with `<`"))?;
                if hi.starts_with('=') {
                    return Err(bad("range high bound is exclusive, use `<`"));
                }
                let lo = Version::parse(lo).map_err(|_| bad("bad low version"))?;
                let hi = Version::parse(hi).map_err(|_| bad("bad high version"))?;
                Self::range(lo, hi).map_err(|_| VersionError::EmptyRange(text.to_string()))
            }
            _ => Err(bad("expected one or two terms")),
        }
    }

    pub fn kind(&self) -> ConstraintKind {
        self.kind
    }

    pub fn low(&self) -> &Version {
        &self.low
    }

    pub fn high(&self) -> Option<&Version> {
        self.high.as_ref()
    }

    pub fn matches(&self, v: &Version) -> bool {
        match self.kind {
            ConstraintKind::Exact => v.cmp_components(&self.low) == Ordering::Equal,
            ConstraintKind::AtLeast => v.cmp_components(&self.low) != Ordering::Less,
            ConstraintKind::Range => {
                v.cmp_components(&self.low) != Ordering::Less
                    && self
                        .high
                        .as_ref()
                        .is_some_and(|h| v.cmp_components(h) == Ordering::Less)
            }
        }
    }
}

impl fmt::Display for VersionConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.kind, &self.high) {
            (ConstraintKind::Exact, _) => write!(f, "={}", self.low),
            (ConstraintKind::AtLeast, _) => write!(f, ">={}", self.low),
            (ConstraintKind::Range, Some(h)) => write!(f, ">={} <{}", self.low, h),
            (ConstraintKind::Range, None) => write!(f, ">={}", self.low),
        }
    }
}

impl FromStr for VersionConstraint {
    type Err = VersionError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        VersionConstraint::parse(s)
    }
}
