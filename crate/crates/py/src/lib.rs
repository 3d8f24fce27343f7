//! Python bindings for the pipeline core.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Duration;

use pyo3::exceptions::{PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use rade_core::config::OrchestratorConfig;
use rade_core::corpus::{self, CommitEvent};
use rade_core::env;
use rade_core::graph::{build_graph, DependencyGraph};
use rade_core::recipe::{self, RecipeId};
use rade_core::repo::{self, Repository as CoreRepository};
use rade_core::site::SiteCache as CoreSiteCache;
use rade_core::target::{MatrixConfig, Target};
use rade_core::version::{Version, VersionConstraint};

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl ToString) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn recipe_id(s: &str) -> PyResult<RecipeId> {
    RecipeId::parse(s).ok_or_else(|| value_err(format!("bad recipe id {s:?}, expected name/version")))
}

fn target(s: &str) -> PyResult<Target> {
    Target::parse_id(s).map_err(value_err)
}

fn ids(set: impl IntoIterator<Item = RecipeId>) -> Vec<String> {
    set.into_iter().map(|r| r.to_string()).collect()
}

/// Returns -1, 0 or 1.
#[pyfunction]
fn compare_versions(a: &str, b: &str) -> PyResult<i8> {
    let (a, b) = (Version::parse(a).map_err(value_err)?, Version::parse(b).map_err(value_err)?);
    Ok(a.cmp(&b) as i8)
}

#[pyfunction]
fn constraint_matches(constraint: &str, version: &str) -> PyResult<bool> {
    let c = VersionConstraint::parse(constraint).map_err(value_err)?;
    Ok(c.matches(&Version::parse(version).map_err(value_err)?))
}

/// Validates a manifest and returns its canonical form.
#[pyfunction]
fn canonical_manifest(text: &str) -> PyResult<String> {
    Ok(recipe::parse_manifest(text).map_err(value_err)?.to_manifest())
}

/// Target ids for a manifest over the given matrix, in expansion order.
#[pyfunction]
fn expand_targets(arches: Vec<String>, oses: Vec<String>, sites: Vec<String>, manifest: &str) -> PyResult<Vec<String>> {
    fn refs(v: &[String]) -> Vec<&str> {
        v.iter().map(String::as_str).collect()
    }
    let m = MatrixConfig::new(&refs(&arches), &refs(&oses), &refs(&sites)).map_err(value_err)?;
    let r = recipe::parse_manifest(manifest).map_err(value_err)?;
    Ok(m.expand(&r).map_err(value_err)?.iter().map(Target::id).collect())
}

#[pyfunction]
fn render_modulefile(recipe: &str, target_id: &str, prefix: PathBuf) -> PyResult<String> {
    let mf = env::render_modulefile(&recipe_id(recipe)?, &target(target_id)?, &prefix).map_err(value_err)?;
    Ok(mf.text)
}

#[pyfunction]
fn sha256_hex(data: &[u8]) -> String {
    repo::sha256_hex(data)
}

/// A loaded recipe tree together with its dependency graph.
#[pyclass(frozen)]
struct Corpus {
    corpus: corpus::Corpus,
    graph: DependencyGraph,
}

#[pymethods]
impl Corpus {
    #[staticmethod]
    fn load(root: PathBuf) -> PyResult<Self> {
        let corpus = corpus::load_corpus(&root).map_err(value_err)?;
        let graph = build_graph(&corpus).map_err(value_err)?;
        Ok(Corpus { corpus, graph })
    }

    fn __len__(&self) -> usize {
        self.corpus.len()
    }

    fn ids(&self) -> Vec<String> {
        ids(self.corpus.ids().cloned())
    }

    fn recipe_dir(&self, recipe: &str) -> PyResult<PathBuf> {
        self.corpus.recipe_dir(&recipe_id(recipe)?).ok_or_else(|| PyKeyError::new_err(recipe.to_string()))
    }

    /// `(dependent, dependency)` pairs.
    fn edges(&self) -> Vec<(String, String)> {
        self.graph.edges().iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    fn changed_recipes(&self, paths: Vec<String>) -> Vec<String> {
        let ev = CommitEvent { event_id: "py".into(), changed_paths: paths, timestamp: 0 };
        ids(corpus::changed_recipes(&ev, &self.corpus).recipes)
    }

    fn rebuild_set(&self, changed: Vec<String>) -> PyResult<Vec<String>> {
        let changed = changed.iter().map(|s| recipe_id(s)).collect::<PyResult<BTreeSet<_>>>()?;
        Ok(ids(self.graph.rebuild_set(&changed).map_err(value_err)?))
    }

    fn build_order(&self, set: Vec<String>) -> PyResult<Vec<String>> {
        let set = set.iter().map(|s| recipe_id(s)).collect::<PyResult<BTreeSet<_>>>()?;
        Ok(ids(self.graph.build_order(&set).map_err(value_err)?))
    }
}

fn head_tuple(h: &repo::RepoHead) -> (u64, String, String) {
    (h.revision, h.root_catalog.sha256.clone(), h.job_id.clone())
}

#[pyclass(frozen)]
struct Repository(CoreRepository);

#[pymethods]
impl Repository {
    #[staticmethod]
    fn init(root: PathBuf) -> PyResult<Self> {
        CoreRepository::init(&root).map(Repository).map_err(runtime_err)
    }

    #[staticmethod]
    fn open(root: PathBuf) -> PyResult<Self> {
        CoreRepository::open(&root).map(Repository).map_err(runtime_err)
    }

    /// `(revision, catalog sha256, job id)`
    fn head(&self) -> PyResult<(u64, String, String)> {
        Ok(head_tuple(&self.0.read_head().map_err(runtime_err)?))
    }

    fn object_names(&self) -> PyResult<Vec<String>> {
        Ok(self.0.object_names().map_err(runtime_err)?.into_iter().collect())
    }

    /// `(object, problem)` for each object that fails verification; empty
    /// when the store is sound.
    fn verify(&self) -> PyResult<Vec<(String, String)>> {
        let report = self.0.verify().map_err(runtime_err)?;
        Ok(report.failures.into_iter().map(|f| (f.object, format!("{:?}", f.problem))).collect())
    }

    /// Stages `tree` under `prefix` and publishes it as one revision.
    fn publish_tree(&self, tree: PathBuf, prefix: &str, job_id: &str) -> PyResult<(u64, usize)> {
        let mut tx = self.0.begin_transaction().map_err(runtime_err)?;
        tx.stage(&tree, prefix).map_err(runtime_err)?;
        let r = tx.publish(job_id).map_err(runtime_err)?;
        Ok((r.head.revision, r.objects_written))
    }
}

#[pyclass(unsendable)]
struct SiteCache(CoreSiteCache);

#[pymethods]
impl SiteCache {
    #[new]
    fn new(repo: PathBuf, cache: PathBuf) -> PyResult<Self> {
        CoreSiteCache::open(&repo, &cache).map(SiteCache).map_err(runtime_err)
    }

    /// Syncs to the repository head. Returns None when already current.
    fn update<'py>(&mut self, py: Python<'py>) -> PyResult<Option<Bound<'py, PyDict>>> {
        let Some(r) = self.0.update().map_err(runtime_err)? else { return Ok(None) };
        let d = PyDict::new(py);
        d.set_item("revision", r.revision)?;
        d.set_item("objects_fetched", r.objects_fetched)?;
        d.set_item("bytes_fetched", r.bytes_fetched)?;
        d.set_item("metadata_fetched", r.metadata_fetched)?;
        d.set_item("tree", r.tree)?;
        Ok(Some(d))
    }

    fn head(&self) -> Option<(u64, String, String)> {
        self.0.last_head().map(head_tuple)
    }

    fn current_tree(&self) -> Option<PathBuf> {
        self.0.current_tree()
    }

    /// Runs the recipe's researcher tests against the synced tree.
    /// Returns `(passed, rendered report)`.
    #[pyo3(signature = (corpus, recipe, target_id, timeout_s = 600.0))]
    fn mve(&self, corpus: &Corpus, recipe: &str, target_id: &str, timeout_s: f64) -> PyResult<(bool, String)> {
        let id = recipe_id(recipe)?;
        let r = corpus.corpus.get(&id).ok_or_else(|| PyKeyError::new_err(recipe.to_string()))?;
        let dir = corpus.corpus.recipe_dir(&id).unwrap_or_default();
        let timeout = Duration::try_from_secs_f64(timeout_s).map_err(value_err)?;
        let report = self.0.run_mve(r, &dir, &target(target_id)?, timeout).map_err(runtime_err)?;
        Ok((report.passed(), report.render()))
    }
}

/// Plans and runs one commit event using a config file, publishing on
/// success unless `publish` is false. Returns `(ok, rendered report)`.
#[pyfunction]
#[pyo3(signature = (config, event_id, changed_paths, publish = true, width = None))]
fn run_event(
    py: Python<'_>,
    config: PathBuf,
    event_id: String,
    changed_paths: Vec<String>,
    publish: bool,
    width: Option<usize>,
) -> PyResult<(bool, String)> {
    let cfg = OrchestratorConfig::load(Path::new(&config)).map_err(value_err)?;
    let pipeline = cfg.pipeline().map_err(value_err)?;
    let event = CommitEvent { event_id, changed_paths, timestamp: 0 };
    event.validate().map_err(value_err)?;
    let plan = pipeline.plan(&event).map_err(value_err)?;
    if plan.is_empty() {
        return Ok((true, String::new()));
    }
    let width = width.unwrap_or(cfg.width);
    let report = py.detach(|| pipeline.run_plan(&plan, width, &event.event_id));
    let mut text = report.render();
    let Some(request) = report.publication else { return Ok((false, text)) };
    if publish {
        let repo = CoreRepository::open_or_init(&cfg.repo_path).map_err(runtime_err)?;
        let r = request.publish(&repo).map_err(runtime_err)?;
        text.push_str(&format!("published {}\n", r.head));
    }
    Ok((true, text))
}

#[pymodule]
fn _rade(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(compare_versions, m)?)?;
    m.add_function(wrap_pyfunction!(constraint_matches, m)?)?;
    m.add_function(wrap_pyfunction!(canonical_manifest, m)?)?;
    m.add_function(wrap_pyfunction!(expand_targets, m)?)?;
    m.add_function(wrap_pyfunction!(render_modulefile, m)?)?;
    m.add_function(wrap_pyfunction!(sha256_hex, m)?)?;
    m.add_function(wrap_pyfunction!(run_event, m)?)?;
    m.add_class::<Corpus>()?;
    m.add_class::<Repository>()?;
    m.add_class::<SiteCache>()?;
    Ok(())
}
