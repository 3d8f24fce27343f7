//! Integration and deploy prefix trees, and the Environment Modules
//! modulefiles that expose installed applications to a shell.
//!
//! Layout below a tree root:
//!
//! ```text
//! <root>/<arch>/<os>/<site>/<name>/<version>/{bin,lib,...}
//! <root>/modulefiles/<arch>/<os>/<site>/<name>/<version>
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::graph::DependencyGraph;
use crate::recipe::RecipeId;
use crate::target::Target;

pub const MODULEFILE_MAGIC: &str = "#%Module1.0";
pub const MODULEFILES_DIR: &str = "modulefiles";

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("installation at {0} has neither bin/ nor lib/")]
    EmptyInstallation(PathBuf),
    #[error("dependency {dependency} is not installed for target {target} (expected {expected})")]
    MissingDependencyInstallation { dependency: RecipeId, target: Target, expected: PathBuf },
    #[error("prefix {0:?} cannot be written into a modulefile")]
    UnrepresentablePrefix(PathBuf),
    #[error("unsupported modulefile line {0:?}")]
    UnsupportedDirective(String),
    #[error("not a modulefile: missing `{MODULEFILE_MAGIC}` header")]
    MissingMagic,
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnvKind {
    Integration,
    Deploy,
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvKind::Integration => "integration",
            EnvKind::Deploy => "deploy",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvTree {
    pub kind: EnvKind,
    pub root: PathBuf,
}

/// `<arch>/<os>/<site>/<name>/<version>`
pub fn relative_prefix(target: &Target, id: &RecipeId) -> PathBuf {
    [target.arch(), target.os(), target.site(), id.name.as_str(), id.version.as_str()]
        .iter()
        .collect()
}

/// `modulefiles/<arch>/<os>/<site>/<name>/<version>`
pub fn relative_modulefile(target: &Target, id: &RecipeId) -> PathBuf {
    Path::new(MODULEFILES_DIR).join(relative_prefix(target, id))
}

impl EnvTree {
    pub fn new(kind: EnvKind, root: impl Into<PathBuf>) -> Self {
        EnvTree { kind, root: root.into() }
    }

    pub fn prefix_for(&self, target: &Target, id: &RecipeId) -> PathBuf {
        self.root.join(relative_prefix(target, id))
    }

    pub fn modulefile_path(&self, target: &Target, id: &RecipeId) -> PathBuf {
        self.root.join(relative_modulefile(target, id))
    }

    /// Directory a site would `module use` for one target.
    pub fn module_dir(&self, target: &Target) -> PathBuf {
        self.root.join(MODULEFILES_DIR).join(target.arch()).join(target.os()).join(target.site())
    }

    pub fn install_modulefile(&self, mf: &Modulefile) -> Result<PathBuf, EnvError> {
        let path = self.modulefile_path(&mf.target, &mf.recipe);
        let dir = path.parent().expect("modulefile has a parent");
        fs::create_dir_all(dir).map_err(|e| EnvError::Io(dir.to_path_buf(), e))?;
        fs::write(&path, &mf.text).map_err(|e| EnvError::Io(path.clone(), e))?;
        Ok(path)
    }
}

pub fn prefix_for(tree: &EnvTree, target: &Target, name: &str, version: &crate::version::Version) -> PathBuf {
    tree.prefix_for(target, &RecipeId::new(name, version.clone()))
}

/// `hello-world.x` -> `HELLO_WORLD_X`
pub fn env_var_stem(name: &str) -> String {
    name.chars()
        .map(|c| match c {
            '-' | '.' => '_',
            c => c.to_ascii_uppercase(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Modulefile {
    pub recipe: RecipeId,
    pub target: Target,
    pub prefix: PathBuf,
    pub text: String,
}

fn prefix_str(prefix: &Path) -> Result<&str, EnvError> {
    match prefix.to_str() {
        Some(s) if !s.is_empty() && !s.chars().any(|c| c.is_whitespace() || c == '"') => Ok(s),
        _ => Err(EnvError::UnrepresentablePrefix(prefix.to_path_buf())),
    }
}

pub fn render_modulefile(recipe: &RecipeId, target: &Target, prefix: &Path) -> Result<Modulefile, EnvError> {
    let p = prefix_str(prefix)?;
    let has_bin = prefix.join("bin").is_dir();
    let has_lib = prefix.join("lib").is_dir();
    if !has_bin && !has_lib {
        return Err(EnvError::EmptyInstallation(prefix.to_path_buf()));
    }
    let mut text = String::new();
    text.push_str(MODULEFILE_MAGIC);
    text.push('\n');
    text.push_str(&format!(
        "module-whatis \"{}/{} for {} (CODE-RADE pipeline)\"\n",
        recipe.name,
        recipe.version,
        target.id()
    ));
    if has_bin {
        text.push_str(&format!("prepend-path PATH {p}/bin\n"));
    }
    if has_lib {
        text.push_str(&format!("prepend-path LD_LIBRARY_PATH {p}/lib\n"));
    }
    text.push_str(&format!("setenv {}_DIR {p}\n", env_var_stem(&recipe.name)));
    Ok(Modulefile {
        recipe: recipe.clone(),
        target: target.clone(),
        prefix: prefix.to_path_buf(),
        text,
    })
}

/// The directive forms emitted by [`render_modulefile`]; nothing else is
/// understood.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModuleDirective {
    PrependPath { var: String, path: String },
    SetEnv { var: String, value: String },
}

pub fn parse_modulefile(text: &str) -> Result<Vec<ModuleDirective>, EnvError> {
    let mut lines = text.lines();
    if lines.next() != Some(MODULEFILE_MAGIC) {
        return Err(EnvError::MissingMagic);
    }
    let mut out = Vec::new();
    for line in lines {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') || trimmed.starts_with("module-whatis ") {
            continue;
        }
        let words: Vec<&str> = trimmed.split_whitespace().collect();
        match words.as_slice() {
            ["prepend-path", var @ ("PATH" | "LD_LIBRARY_PATH"), path] => out.push(ModuleDirective::PrependPath {
                var: var.to_string(),
                path: path.to_string(),
            }),
            ["setenv", var, value] if var.ends_with("_DIR") => out.push(ModuleDirective::SetEnv {
                var: var.to_string(),
                value: value.to_string(),
            }),
            _ => return Err(EnvError::UnsupportedDirective(line.to_string())),
        }
    }
    Ok(out)
}

impl ModuleDirective {
    pub fn apply(&self, env: &mut BTreeMap<String, String>) {
        match self {
            ModuleDirective::PrependPath { var, path } => {
                let next = match env.get(var) {
                    Some(cur) if !cur.is_empty() => format!("{path}:{cur}"),
                    _ => path.clone(),
                };
                env.insert(var.clone(), next);
            }
            ModuleDirective::SetEnv { var, value } => {
                env.insert(var.clone(), value.clone());
            }
        }
    }

    /// Rewrites a leading `from` path prefix to `to`, as when a tree is
    /// mounted somewhere other than where it was built.
    pub fn relocate(&self, from: &str, to: &str) -> ModuleDirective {
        let swap = |p: &str| match p.strip_prefix(from) {
            Some(rest) if rest.is_empty() || rest.starts_with('/') => format!("{to}{rest}"),
            _ => p.to_string(),
        };
        match self {
            ModuleDirective::PrependPath { var, path } => {
                ModuleDirective::PrependPath { var: var.clone(), path: swap(path) }
            }
            ModuleDirective::SetEnv { var, value } => {
                ModuleDirective::SetEnv { var: var.clone(), value: swap(value) }
            }
        }
    }
}

/// Loads a modulefile from disk and applies it to `env`.
pub fn load_module(path: &Path, env: &mut BTreeMap<String, String>) -> Result<(), EnvError> {
    let text = fs::read_to_string(path).map_err(|e| EnvError::Io(path.to_path_buf(), e))?;
    for d in parse_modulefile(&text)? {
        d.apply(env);
    }
    Ok(())
}

/// Modulefile paths of the direct dependencies of `recipe`, in build order,
/// each of which must already be installed in `tree` for `target`.
pub fn module_path_for_dependencies(
    graph: &DependencyGraph,
    recipe: &RecipeId,
    tree: &EnvTree,
    target: &Target,
) -> Result<Vec<PathBuf>, EnvError> {
    let Some(deps) = graph.direct_dependencies(recipe) else {
        return Ok(Vec::new());
    };
    let order = graph.build_order(deps).expect("dependencies are graph nodes");
    order
        .into_iter()
        .map(|dep| {
            let path = tree.modulefile_path(target, &dep);
            if path.is_file() {
                Ok(path)
            } else {
                Err(EnvError::MissingDependencyInstallation { dependency: dep, target: target.clone(), expected: path })
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::version::Version;
    use std::collections::BTreeSet;
    use tempfile::TempDir;

    fn rid(n: &str, v: &str) -> RecipeId {
        RecipeId::new(n, Version::parse(v).unwrap())
    }

    fn t(id: &str) -> Target {
        Target::parse_id(id).unwrap()
    }

    #[test]
    fn prefix_layout() {
        let tree = EnvTree::new(EnvKind::Deploy, "/srv/deploy");
        let a = tree.prefix_for(&t("x86_64-centos7-siteA"), &rid("hello", "1.0"));
        assert_eq!(a, Path::new("/srv/deploy/x86_64/centos7/siteA/hello/1.0"));
        let b = tree.prefix_for(&t("x86_64-centos7-siteB"), &rid("hello", "1.0"));
        assert_eq!(b, Path::new("/srv/deploy/x86_64/centos7/siteB/hello/1.0"));
        let c = tree.prefix_for(&t("x86_64-centos7-siteA"), &rid("hello2", "1.0"));
        assert_ne!(a, c);
        assert!(!c.starts_with(&a));
        assert_eq!(
            tree.modulefile_path(&t("x86_64-centos7-siteA"), &rid("hello", "1.0")),
            Path::new("/srv/deploy/modulefiles/x86_64/centos7/siteA/hello/1.0")
        );
    }

    #[test]
    fn stem_mapping() {
        assert_eq!(env_var_stem("hello"), "HELLO");
        assert_eq!(env_var_stem("py-numpy.mkl"), "PY_NUMPY_MKL");
    }

    #[test]
    fn bin_only_modulefile() {
        let tmp = TempDir::new().unwrap();
        let prefix = tmp.path().join("p");
        fs::create_dir_all(prefix.join("bin")).unwrap();
        let mf = render_modulefile(&rid("hello", "1.0"), &t("x86_64-centos7-siteA"), &prefix).unwrap();
        let p = prefix.display();
        assert_eq!(
            mf.text,
            format!(
                "#%Module1.0\nmodule-whatis \"hello/1.0 for x86_64-centos7-siteA (CODE-RADE pipeline)\"\n\
                 prepend-path PATH {p}/bin\nsetenv HELLO_DIR {p}\n"
            )
        );
        assert_eq!(mf.text.matches("prepend-path PATH").count(), 1);
        assert!(!mf.text.contains("LD_LIBRARY_PATH"));
    }

    #[test]
    fn bin_and_lib_order() {
        let tmp = TempDir::new().unwrap();
        fs::create_dir_all(tmp.path().join("bin")).unwrap();
        fs::create_dir_all(tmp.path().join("lib")).unwrap();
        let mf = render_modulefile(&rid("lib-demo", "2"), &t("a-o-s"), tmp.path()).unwrap();
        let path_at = mf.text.find("prepend-path PATH").unwrap();
        let ld_at = mf.text.find("prepend-path LD_LIBRARY_PATH").unwrap();
        assert!(path_at < ld_at);
        assert!(mf.text.ends_with(&format!("setenv LIB_DEMO_DIR {}\n", tmp.path().display())));
        let again = render_modulefile(&rid("lib-demo", "2"), &t("a-o-s"), tmp.path()).unwrap();
        assert_eq!(mf.text, again.text);
    }

    #[test]
    fn empty_prefix_rejected() {
        let tmp = TempDir::new().unwrap();
        assert!(matches!(
            render_modulefile(&rid("hello", "1.0"), &t("a-o-s"), tmp.path()),
            Err(EnvError::EmptyInstallation(_))
        ));
    }

    #[test]
    fn directives_round_trip_through_interpreter() {
        let tmp = TempDir::new().unwrap();
        fs::create_dir_all(tmp.path().join("bin")).unwrap();
        fs::create_dir_all(tmp.path().join("lib")).unwrap();
        let mf = render_modulefile(&rid("hello", "1.0"), &t("a-o-s"), tmp.path()).unwrap();
        let ds = parse_modulefile(&mf.text).unwrap();
        assert_eq!(ds.len(), 3);
        let mut env = BTreeMap::from([("PATH".to_string(), "/usr/bin".to_string())]);
        for d in &ds {
            d.apply(&mut env);
        }
        let p = tmp.path().display().to_string();
        assert_eq!(env["PATH"], format!("{p}/bin:/usr/bin"));
        assert_eq!(env["LD_LIBRARY_PATH"], format!("{p}/lib"));
        assert_eq!(env["HELLO_DIR"], p);

        let moved = ds[0].relocate(&p, "/cache/tree");
        assert_eq!(moved, ModuleDirective::PrependPath { var: "PATH".into(), path: "/cache/tree/bin".into() });
        // prefix match must end on a path boundary
        let d = ModuleDirective::SetEnv { var: "X_DIR".into(), value: format!("{p}2") };
        assert_eq!(d.relocate(&p, "/c"), d);
    }

    #[test]
    fn interpreter_is_closed() {
        assert!(matches!(parse_modulefile("prepend-path PATH /x\n"), Err(EnvError::MissingMagic)));
        assert!(matches!(
            parse_modulefile("#%Module1.0\nmodule load gcc\n"),
            Err(EnvError::UnsupportedDirective(_))
        ));
        assert!(matches!(
            parse_modulefile("#%Module1.0\nsetenv LD_PRELOAD /evil.so\n"),
            Err(EnvError::UnsupportedDirective(_))
        ));
    }

    #[test]
    fn dependency_modulefiles_per_target() {
        let tmp = TempDir::new().unwrap();
        let app = rid("app", "1.0");
        let fftw = rid("fftw", "3.3");
        let nodeps = rid("solo", "1");
        let g = DependencyGraph::new(
            BTreeSet::from([app.clone(), fftw.clone(), nodeps.clone()]),
            BTreeSet::from([(app.clone(), fftw.clone())]),
        )
        .unwrap();
        let tree = EnvTree::new(EnvKind::Integration, tmp.path());
        let here = t("x86_64-centos7-siteA");
        let there = t("x86_64-centos7-siteB");

        assert!(module_path_for_dependencies(&g, &nodeps, &tree, &here).unwrap().is_empty());

        let prefix = tree.prefix_for(&there, &fftw);
        fs::create_dir_all(prefix.join("lib")).unwrap();
        tree.install_modulefile(&render_modulefile(&fftw, &there, &prefix).unwrap()).unwrap();
        assert!(matches!(
            module_path_for_dependencies(&g, &app, &tree, &here),
            Err(EnvError::MissingDependencyInstallation { .. })
        ));
        let paths = module_path_for_dependencies(&g, &app, &tree, &there).unwrap();
        assert_eq!(paths, vec![tmp.path().join("modulefiles/x86_64/centos7/siteB/fftw/3.3")]);
    }
}
