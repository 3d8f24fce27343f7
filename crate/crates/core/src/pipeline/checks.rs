//! Test specifications: internal tests from the source tree, ops checks from
//! the orchestrator config, and researcher tests from the recipe manifest.

use std::fmt;
use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestOrigin {
    Internal,
    Ops,
    Researcher,
}

impl fmt::Display for TestOrigin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TestOrigin::Internal => "internal",
            TestOrigin::Ops => "ops",
            TestOrigin::Researcher => "researcher",
        })
    }
}

/// Checks implemented in-process, referenced by id from the config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BuiltinCheck {
    /// No file or directory under the prefix is writable by others.
    NoWorldWritableFiles,
    /// Every regular file directly in `bin/` has an execute bit.
    ExecutablesInBin,
}

impl BuiltinCheck {
    pub const ALL: [BuiltinCheck; 2] = [BuiltinCheck::NoWorldWritableFiles, BuiltinCheck::ExecutablesInBin];

    pub fn id(&self) -> &'static str {
        match self {
            BuiltinCheck::NoWorldWritableFiles => "no-world-writable-files",
            BuiltinCheck::ExecutablesInBin => "executables-in-bin",
        }
    }

    /// Runs the check against an installation prefix; `Err` lists offenders.
    pub fn run(&self, prefix: &Path) -> Result<(), Vec<PathBuf>> {
        let mut offenders = Vec::new();
        match self {
            BuiltinCheck::NoWorldWritableFiles => {
                for entry in WalkDir::new(prefix).min_depth(1).into_iter().flatten() {
                    let is_link = entry.path_is_symlink();
                    if let Ok(meta) = entry.metadata() {
                        if !is_link && meta.permissions().mode() & 0o002 != 0 {
                            offenders.push(entry.into_path());
                        }
                    }
                }
            }
            BuiltinCheck::ExecutablesInBin => {
                if let Ok(rd) = fs::read_dir(prefix.join("bin")) {
                    for entry in rd.flatten() {
                        if let Ok(meta) = fs::metadata(entry.path()) {
                            if meta.is_file() && meta.permissions().mode() & 0o111 == 0 {
                                offenders.push(entry.path());
                            }
                        }
                    }
                }
            }
        }
        offenders.sort();
        if offenders.is_empty() {
            Ok(())
        } else {
            Err(offenders)
        }
    }
}

impl FromStr for BuiltinCheck {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        BuiltinCheck::ALL
            .into_iter()
            .find(|c| c.id() == s)
            .ok_or_else(|| format!("unknown built-in check {s:?}"))
    }
}

/// An ops check as written in `rade.config.json`: either a built-in id
/// string or `{"name": ..., "command": ...}` naming an executable that is
/// run with `INSTALL_PREFIX` set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OpsTestConfig {
    Builtin(String),
    Command { name: String, command: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OpsTest {
    Builtin(BuiltinCheck),
    Command { name: String, command: PathBuf },
}

impl OpsTest {
    pub fn from_config(c: &OpsTestConfig, base: &Path) -> Result<Self, String> {
        match c {
            OpsTestConfig::Builtin(id) => id.parse().map(OpsTest::Builtin),
            OpsTestConfig::Command { name, command } => {
                if name.is_empty() {
                    return Err("ops test name must be non-empty".into());
                }
                Ok(OpsTest::Command { name: name.clone(), command: base.join(command) })
            }
        }
    }

    pub fn name(&self) -> &str {
        match self {
            OpsTest::Builtin(b) => b.id(),
            OpsTest::Command { name, .. } => name,
        }
    }
}

/// What a test runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TestCommand {
    /// A script from the recipe directory, run with `/bin/sh`.
    Script(PathBuf),
    Builtin(BuiltinCheck),
    Exec { name: String, program: PathBuf },
}

impl fmt::Display for TestCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TestCommand::Script(p) => write!(f, "{}", p.display()),
            TestCommand::Builtin(b) => f.write_str(b.id()),
            TestCommand::Exec { name, .. } => f.write_str(name),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestSpec {
    pub origin: TestOrigin,
    pub command: TestCommand,
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    #[test]
    fn world_writable_detected() {
        let tmp = TempDir::new().unwrap();
        fs::create_dir_all(tmp.path().join("bin")).unwrap();
        let f = tmp.path().join("bin/tool");
        fs::write(&f, "x").unwrap();
        fs::set_permissions(&f, fs::Permissions::from_mode(0o755)).unwrap();
        fs::set_permissions(tmp.path().join("bin"), fs::Permissions::from_mode(0o755)).unwrap();
        assert!(BuiltinCheck::NoWorldWritableFiles.run(tmp.path()).is_ok());
        fs::set_permissions(&f, fs::Permissions::from_mode(0o757)).unwrap();
        assert_eq!(BuiltinCheck::NoWorldWritableFiles.run(tmp.path()), Err(vec![f]));
    }

    #[test]
    fn bin_executables() {
        let tmp = TempDir::new().unwrap();
        fs::create_dir_all(tmp.path().join("bin")).unwrap();
        let f = tmp.path().join("bin/tool");
        fs::write(&f, "x").unwrap();
        fs::set_permissions(&f, fs::Permissions::from_mode(0o644)).unwrap();
        assert!(BuiltinCheck::ExecutablesInBin.run(tmp.path()).is_err());
        fs::set_permissions(&f, fs::Permissions::from_mode(0o755)).unwrap();
        assert!(BuiltinCheck::ExecutablesInBin.run(tmp.path()).is_ok());
    }

    #[test]
    fn config_forms() {
        let cs: Vec<OpsTestConfig> =
            serde_json::from_str(r#"["no-world-writable-files", {"name": "lint", "command": "checks/lint.sh"}]"#).unwrap();
        let base = Path::new("/etc/rade");
        let tests: Vec<OpsTest> = cs.iter().map(|c| OpsTest::from_config(c, base).unwrap()).collect();
        assert_eq!(tests[0], OpsTest::Builtin(BuiltinCheck::NoWorldWritableFiles));
        assert_eq!(tests[1], OpsTest::Command { name: "lint".into(), command: "/etc/rade/checks/lint.sh".into() });
        assert!(OpsTest::from_config(&OpsTestConfig::Builtin("nope".into()), base).is_err());
    }
}
