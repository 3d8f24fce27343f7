use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::env::{
    load_module, module_path_for_dependencies, relative_modulefile, relative_prefix, render_modulefile, EnvKind,
};
use crate::recipe::{Recipe, RecipeId};
use crate::repo::sha256_hex;
use crate::target::Target;

use super::exec::{self, Invocation, MINIMAL_PATH};
use super::{Job, JobState, Phase, PhaseError, Pipeline, TestCommand, TestOrigin};

/// What a delivered job contributes to the next publication.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveryPayload {
    pub recipe: RecipeId,
    pub target: Target,
    /// Absolute prefix in the deploy tree.
    pub prefix: PathBuf,
    /// Absolute modulefile path in the deploy tree.
    pub modulefile: PathBuf,
    /// Where the prefix lands in the repository.
    pub repo_prefix: String,
    pub repo_modulefile: String,
}

/// Environment bindings for one phase of one job.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseEnvironment {
    pub kind: EnvKind,
    bindings: BTreeMap<String, String>,
}

impl PhaseEnvironment {
    pub fn bindings(&self) -> &BTreeMap<String, String> {
        &self.bindings
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.bindings.get(key).map(String::as_str)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PhaseError + '_ {
    move |e| PhaseError::Io(path.to_path_buf(), e)
}

fn fresh_dir(path: &Path) -> Result<(), PhaseError> {
    if path.exists() {
        fs::remove_dir_all(path).map_err(io_err(path))?;
    }
    fs::create_dir_all(path).map_err(io_err(path))
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn source_location(recipe: &Recipe, recipe_dir: &Path) -> Result<PathBuf, PhaseError> {
    let url = &recipe.source.url;
    if let Some(abs) = url.strip_prefix("file://") {
        if !abs.starts_with('/') {
            return Err(PhaseError::SourceUnavailable(format!("{url}: file:// URLs must be absolute")));
        }
        Ok(PathBuf::from(abs))
    } else if let Some(rel) = url.strip_prefix("file:") {
        Ok(recipe_dir.join(rel))
    } else {
        Err(PhaseError::SourceUnavailable(format!("{url}: only file: URLs are supported")))
    }
}

fn bundle_name(recipe: &Recipe, recipe_dir: &Path) -> Result<String, PhaseError> {
    let loc = source_location(recipe, recipe_dir)?;
    loc.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| PhaseError::SourceUnavailable(format!("{}: no file name", recipe.source.url)))
}

/// Copies the recipe's source bundle into `dest_dir` after checking its
/// SHA-256. `file:///abs/path` is absolute; `file:rel/path` is relative to
/// the recipe directory.
pub fn fetch_source(recipe: &Recipe, recipe_dir: &Path, dest_dir: &Path) -> Result<PathBuf, PhaseError> {
    let loc = source_location(recipe, recipe_dir)?;
    let bytes = fs::read(&loc).map_err(|e| PhaseError::SourceUnavailable(format!("{}: {e}", loc.display())))?;
    let found = sha256_hex(&bytes);
    if found != recipe.source.sha256 {
        return Err(PhaseError::SourceChecksumMismatch { expected: recipe.source.sha256.clone(), found });
    }
    fs::create_dir_all(dest_dir).map_err(io_err(dest_dir))?;
    let dest = dest_dir.join(bundle_name(recipe, recipe_dir)?);
    let current = fs::read(&dest).ok().map(|b| sha256_hex(&b));
    if current.as_deref() != Some(found.as_str()) {
        fs::write(&dest, &bytes).map_err(io_err(&dest))?;
    }
    Ok(dest)
}

impl Pipeline {
    fn recipe_and_dir(&self, id: &RecipeId) -> (&Recipe, PathBuf) {
        (
            self.corpus.get(id).expect("planned recipe is in the corpus"),
            self.corpus.recipe_dir(id).expect("planned recipe is in the corpus"),
        )
    }

    /// Bindings for a phase: the target coordinates, site extras, job
    /// directories, one of INSTALL_PREFIX/DEPLOY_PREFIX, and the effect of
    /// loading each direct dependency's modulefile from the same tree.
    pub fn phase_environment(&self, id: &RecipeId, target: &Target, kind: EnvKind) -> Result<PhaseEnvironment, PhaseError> {
        let (recipe, recipe_dir) = self.recipe_and_dir(id);
        let tree = self.layout.tree(kind);
        let mut b = BTreeMap::new();
        b.insert("PATH".to_string(), MINIMAL_PATH.to_string());
        for (k, v) in self.matrix.site_bindings(target.site()) {
            b.insert(k, v);
        }
        let dep_modules = module_path_for_dependencies(&self.graph, id, tree, target)?;
        for m in &dep_modules {
            load_module(m, &mut b)?;
        }
        let job_dir = self.layout.job_dir(id, target);
        let source_dir = self.layout.source_dir(id, target);
        let set = |b: &mut BTreeMap<String, String>, k: &str, v: String| {
            b.insert(k.to_string(), v);
        };
        set(&mut b, "DEP_MODULE_PATH", dep_modules.iter().map(|p| path_str(p)).collect::<Vec<_>>().join(":"));
        set(&mut b, "HOME", path_str(&job_dir));
        set(&mut b, "TMPDIR", path_str(&job_dir.join("tmp")));
        set(&mut b, "ARCH", target.arch().to_string());
        set(&mut b, "OS", target.os().to_string());
        set(&mut b, "SITE", target.site().to_string());
        set(&mut b, "RECIPE_NAME", id.name.clone());
        set(&mut b, "RECIPE_VERSION", id.version.to_string());
        set(&mut b, "RECIPE_DIR", path_str(&recipe_dir));
        set(&mut b, "SOURCE_DIR", path_str(&source_dir));
        set(&mut b, "SOURCE_BUNDLE", path_str(&source_dir.join(bundle_name(recipe, &recipe_dir)?)));
        set(&mut b, "BUILD_DIR", path_str(&self.layout.build_dir(id, target)));
        let prefix = path_str(&tree.prefix_for(target, id));
        match kind {
            EnvKind::Integration => set(&mut b, "INSTALL_PREFIX", prefix),
            EnvKind::Deploy => set(&mut b, "DEPLOY_PREFIX", prefix),
        }
        Ok(PhaseEnvironment { kind, bindings: b })
    }

    fn open_log(&self, id: &RecipeId, target: &Target, phase: Phase) -> Result<File, PhaseError> {
        let path = self.layout.log_path(id, target);
        let dir = path.parent().expect("log has a parent");
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut opts = OpenOptions::new();
        opts.create(true);
        if phase == Phase::Build {
            opts.write(true).truncate(true);
        } else {
            opts.append(true);
        }
        let mut f = opts.open(&path).map_err(io_err(&path))?;
        writeln!(f, "=== PHASE {phase} ===").map_err(io_err(&path))?;
        Ok(f)
    }

    fn run_script(
        &self,
        what: &Invocation,
        cwd: &Path,
        env: &BTreeMap<String, String>,
        log: &mut File,
    ) -> Result<exec::ScriptStatus, PhaseError> {
        fs::create_dir_all(cwd).map_err(io_err(cwd))?;
        if let Some(tmp) = env.get("TMPDIR") {
            fs::create_dir_all(tmp).map_err(io_err(Path::new(tmp)))?;
        }
        exec::run(what, cwd, env, log, self.phase_timeout).map_err(io_err(what.path()))
    }

    /// Runs one phase's work for a job without touching job state. The
    /// deliver phase returns the payload to publish.
    pub fn execute_phase(&self, id: &RecipeId, target: &Target, phase: Phase) -> Result<Option<DeliveryPayload>, PhaseError> {
        let mut log = self.open_log(id, target, phase)?;
        let result = match phase {
            Phase::Build => self.build_phase(id, target, &mut log).map(|_| None),
            Phase::Test => self.test_phase(id, target, &mut log).map(|_| None),
            Phase::Deliver => self.deliver_phase(id, target, &mut log).map(Some),
        };
        if let Err(e) = &result {
            let _ = writeln!(log, "! {phase} failed: {e}");
        }
        result
    }

    fn build_phase(&self, id: &RecipeId, target: &Target, log: &mut File) -> Result<(), PhaseError> {
        let (recipe, dir) = self.recipe_and_dir(id);
        let bundle = fetch_source(recipe, &dir, &self.layout.source_dir(id, target))?;
        let _ = writeln!(log, "source {} verified", bundle.display());
        let env = self.phase_environment(id, target, EnvKind::Integration)?;
        let build_dir = self.layout.build_dir(id, target);
        fresh_dir(&build_dir)?;
        let script = dir.join(&recipe.scripts.build);
        let status = self.run_script(&Invocation::Shell(script), &build_dir, env.bindings(), log)?;
        if !status.success() {
            return Err(PhaseError::BuildFailed { script: recipe.scripts.build.clone(), status });
        }
        Ok(())
    }

    fn test_phase(&self, id: &RecipeId, target: &Target, log: &mut File) -> Result<(), PhaseError> {
        let env = self.phase_environment(id, target, EnvKind::Integration)?;
        let build_dir = self.layout.build_dir(id, target);
        let prefix = self.layout.integration.prefix_for(target, id);
        fresh_dir(&prefix)?;

        let specs = self.test_specs(id);
        let (internal, rest): (Vec<_>, Vec<_>) = specs.into_iter().partition(|s| s.origin == TestOrigin::Internal);

        // The check script runs the package's own tests and installs into INSTALL_PREFIX.
        for spec in &internal {
            self.run_test_spec(spec, &build_dir, env.bindings(), &prefix, log)?;
        }
        let mf = render_modulefile(id, target, &prefix).map_err(|e| PhaseError::InstallFailed(e.to_string()))?;
        let mf_path =
            self.layout.integration.install_modulefile(&mf).map_err(|e| PhaseError::InstallFailed(e.to_string()))?;
        let _ = writeln!(log, "installed {} (modulefile {})", prefix.display(), mf_path.display());

        let mut loaded = env.bindings().clone();
        load_module(&mf_path, &mut loaded)?;
        let run_dir = self.layout.run_dir(id, target);
        fresh_dir(&run_dir)?;
        for spec in &rest {
            match spec.origin {
                TestOrigin::Ops => self.run_test_spec(spec, &build_dir, env.bindings(), &prefix, log)?,
                _ => self.run_test_spec(spec, &run_dir, &loaded, &prefix, log)?,
            }
        }
        Ok(())
    }

    fn run_test_spec(
        &self,
        spec: &super::TestSpec,
        cwd: &Path,
        env: &BTreeMap<String, String>,
        prefix: &Path,
        log: &mut File,
    ) -> Result<(), PhaseError> {
        let _ = writeln!(log, "--- {} test {}", spec.origin, spec.command);
        let failed = |detail: String| PhaseError::TestFailed {
            origin: spec.origin,
            command: spec.command.to_string(),
            detail,
        };
        let status = match &spec.command {
            TestCommand::Builtin(check) => {
                return check.run(prefix).map_err(|offenders| {
                    let list: Vec<String> = offenders.iter().map(|p| p.display().to_string()).collect();
                    let _ = writeln!(log, "! offending paths: {}", list.join(", "));
                    failed(format!("offending paths: {}", list.join(", ")))
                });
            }
            TestCommand::Script(p) => self.run_script(&Invocation::Shell(p.clone()), cwd, env, log)?,
            TestCommand::Exec { program, .. } => self.run_script(&Invocation::Exec(program.clone()), cwd, env, log)?,
        };
        if status.success() {
            Ok(())
        } else {
            Err(failed(status.to_string()))
        }
    }

    fn deliver_phase(&self, id: &RecipeId, target: &Target, log: &mut File) -> Result<DeliveryPayload, PhaseError> {
        let (recipe, dir) = self.recipe_and_dir(id);
        let failed = |what: String| PhaseError::DeliverFailed(what);
        let env = self.phase_environment(id, target, EnvKind::Deploy).map_err(|e| failed(e.to_string()))?;
        let build_dir = self.layout.build_dir(id, target);
        fresh_dir(&build_dir)?;
        let _ = writeln!(log, "rebuilding from clean for the deploy tree");
        let status = self.run_script(&Invocation::Shell(dir.join(&recipe.scripts.build)), &build_dir, env.bindings(), log)?;
        if !status.success() {
            return Err(failed(format!("rebuild with {}: {status}", recipe.scripts.build)));
        }
        let prefix = self.layout.deploy.prefix_for(target, id);
        fresh_dir(&prefix)?;
        let status = self.run_script(&Invocation::Shell(dir.join(&recipe.scripts.deploy)), &build_dir, env.bindings(), log)?;
        if !status.success() {
            return Err(failed(format!("{}: {status}", recipe.scripts.deploy)));
        }
        let mf = render_modulefile(id, target, &prefix).map_err(|e| failed(e.to_string()))?;
        let mf_path = self.layout.deploy.install_modulefile(&mf).map_err(|e| failed(e.to_string()))?;
        let _ = writeln!(log, "delivered {} (modulefile {})", prefix.display(), mf_path.display());
        Ok(DeliveryPayload {
            recipe: id.clone(),
            target: target.clone(),
            prefix,
            modulefile: mf_path,
            repo_prefix: path_str(&relative_prefix(target, id)),
            repo_modulefile: path_str(&relative_modulefile(target, id)),
        })
    }

    fn run_phase(&self, job: &mut Job, phase: Phase) -> Result<(), PhaseError> {
        let (expected, active, done) = match phase {
            Phase::Build => (JobState::Pending, JobState::Building, JobState::Built),
            Phase::Test => (JobState::Built, JobState::Testing, JobState::Tested),
            Phase::Deliver => (JobState::Tested, JobState::Delivering, JobState::Delivered),
        };
        if job.state != expected {
            return Err(PhaseError::WrongState { expected, actual: job.state });
        }
        job.transition(active).expect("checked above");
        let start = Instant::now();
        let result = self.execute_phase(&job.recipe, &job.target, phase);
        job.duration += start.elapsed();
        match result {
            Ok(payload) => {
                if payload.is_some() {
                    job.payload = payload;
                }
                job.transition(done).expect("active phase completes");
                Ok(())
            }
            Err(e) => {
                job.error = Some(e.to_string());
                job.transition(JobState::Failed).expect("active phase can fail");
                Err(e)
            }
        }
    }

    /// Fetches and verifies the source, then runs the build script in a fresh
    /// BUILD_DIR. `Pending` → `Built` or `Failed`.
    pub fn run_build(&self, job: &mut Job) -> Result<(), PhaseError> {
        self.run_phase(job, Phase::Build)
    }

    /// Internal tests (the check script, which also installs into the
    /// integration tree), the integration modulefile, ops tests, then
    /// researcher tests with the modulefile loaded. `Built` → `Tested`.
    pub fn run_test(&self, job: &mut Job) -> Result<(), PhaseError> {
        self.run_phase(job, Phase::Test)
    }

    /// Clean rebuild against the deploy tree, deploy script, deploy
    /// modulefile. `Tested` → `Delivered` with a payload.
    pub fn run_deliver(&self, job: &mut Job) -> Result<(), PhaseError> {
        self.run_phase(job, Phase::Deliver)
    }

    /// All three phases, each only after the previous one succeeded.
    pub fn run_job(&self, job: &mut Job) -> Result<(), PhaseError> {
        self.run_build(job)?;
        self.run_test(job)?;
        self.run_deliver(job)
    }
}
