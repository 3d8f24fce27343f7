//! Build → Test → Deliver execution for (recipe, target) jobs.
//!
//! Each phase runs only if the previous one succeeded. Jobs move through
//!
//! ```text
//! Pending → Building → Built → Testing → Tested → Delivering → Delivered
//! ```
//!
//! and any active phase may end in `Failed`, recording which phase failed.

pub mod checks;
pub mod exec;
mod phases;
mod scheduler;

pub use checks::{BuiltinCheck, OpsTest, OpsTestConfig, TestCommand, TestOrigin, TestSpec};
pub use phases::{fetch_source, DeliveryPayload, PhaseEnvironment};
pub use scheduler::{load_publication, PublicationRequest, PublishError, RunReport};

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime};

use thiserror::Error;

use crate::corpus::{changed_recipes, CommitEvent, Corpus};
use crate::env::{EnvError, EnvKind, EnvTree};
use crate::graph::{BuildPlan, DependencyGraph, GraphError, PlanReason, PlannedJob};
use crate::recipe::RecipeId;
use crate::target::{MatrixConfig, Target, TargetError};
use exec::ScriptStatus;

pub const DEFAULT_PHASE_TIMEOUT: Duration = Duration::from_secs(600);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Build,
    Test,
    Deliver,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Build => "build",
            Phase::Test => "test",
            Phase::Deliver => "deliver",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum JobState {
    Pending,
    Building,
    Built,
    Testing,
    Tested,
    Delivering,
    Delivered,
    Failed,
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl JobState {
    fn legal_next(self, to: JobState) -> bool {
        use JobState::*;
        matches!(
            (self, to),
            (Pending, Building)
                | (Building, Built)
                | (Built, Testing)
                | (Testing, Tested)
                | (Tested, Delivering)
                | (Delivering, Delivered)
                | (Building | Testing | Delivering, Failed)
        )
    }

    fn active_phase(self) -> Option<Phase> {
        match self {
            JobState::Building => Some(Phase::Build),
            JobState::Testing => Some(Phase::Test),
            JobState::Delivering => Some(Phase::Deliver),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum PhaseError {
    #[error("source bundle checksum mismatch: expected {expected}, found {found}")]
    SourceChecksumMismatch { expected: String, found: String },
    #[error("source bundle unavailable: {0}")]
    SourceUnavailable(String),
    #[error("build script {script} failed: {status}")]
    BuildFailed { script: String, status: ScriptStatus },
    #[error("{origin} test {command} failed: {detail}")]
    TestFailed { origin: TestOrigin, command: String, detail: String },
    #[error("installation into the integration tree failed: {0}")]
    InstallFailed(String),
    #[error("delivery failed: {0}")]
    DeliverFailed(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("job is {actual}, expected {expected}")]
    WrongState { expected: JobState, actual: JobState },
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Target(#[from] TargetError),
}

#[derive(Debug, Error)]
#[error("illegal job transition {from} -> {to}")]
pub struct IllegalTransition {
    pub from: JobState,
    pub to: JobState,
}

/// One (recipe, target) pass through the state machine.
#[derive(Debug, Clone)]
pub struct Job {
    pub recipe: RecipeId,
    pub target: Target,
    pub reason: PlanReason,
    pub state: JobState,
    pub failed_phase: Option<Phase>,
    pub error: Option<String>,
    /// Set when the job never started because a prerequisite did not deliver.
    pub blocked_by: Option<String>,
    pub log_path: PathBuf,
    pub started: Option<SystemTime>,
    pub finished: Option<SystemTime>,
    pub duration: Duration,
    /// Every state entered, starting with `Pending`.
    pub trace: Vec<JobState>,
    pub payload: Option<DeliveryPayload>,
}

impl Job {
    pub fn new(planned: &PlannedJob, log_path: PathBuf) -> Self {
        Job {
            recipe: planned.recipe.clone(),
            target: planned.target.clone(),
            reason: planned.reason,
            state: JobState::Pending,
            failed_phase: None,
            error: None,
            blocked_by: None,
            log_path,
            started: None,
            finished: None,
            duration: Duration::ZERO,
            trace: vec![JobState::Pending],
            payload: None,
        }
    }

    /// `name/version@target_id`
    pub fn key(&self) -> String {
        format!("{}@{}", self.recipe, self.target)
    }

    pub fn transition(&mut self, to: JobState) -> Result<(), IllegalTransition> {
        if !self.state.legal_next(to) {
            return Err(IllegalTransition { from: self.state, to });
        }
        if to == JobState::Failed {
            self.failed_phase = self.state.active_phase();
        }
        if self.state == JobState::Pending {
            self.started = Some(SystemTime::now());
        }
        if matches!(to, JobState::Delivered | JobState::Failed) {
            self.finished = Some(SystemTime::now());
        }
        self.state = to;
        self.trace.push(to);
        Ok(())
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self.state, JobState::Delivered | JobState::Failed)
    }
}

/// Filesystem locations for the pipeline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub workdir: PathBuf,
    pub integration: EnvTree,
    pub deploy: EnvTree,
}

impl Layout {
    pub fn new(workdir: &Path, integration_root: &Path, deploy_root: &Path) -> Self {
        Layout {
            workdir: workdir.to_path_buf(),
            integration: EnvTree::new(EnvKind::Integration, integration_root),
            deploy: EnvTree::new(EnvKind::Deploy, deploy_root),
        }
    }

    pub fn tree(&self, kind: EnvKind) -> &EnvTree {
        match kind {
            EnvKind::Integration => &self.integration,
            EnvKind::Deploy => &self.deploy,
        }
    }

    /// `<workdir>/logs/<name>-<version>-<target_id>.log`
    pub fn log_path(&self, recipe: &RecipeId, target: &Target) -> PathBuf {
        self.workdir.join("logs").join(format!("{}-{}-{}.log", recipe.name, recipe.version, target.id()))
    }

    pub fn job_dir(&self, recipe: &RecipeId, target: &Target) -> PathBuf {
        self.workdir
            .join("jobs")
            .join(&recipe.name)
            .join(recipe.version.as_str())
            .join(target.id())
    }

    pub fn source_dir(&self, recipe: &RecipeId, target: &Target) -> PathBuf {
        self.job_dir(recipe, target).join("src")
    }

    pub fn build_dir(&self, recipe: &RecipeId, target: &Target) -> PathBuf {
        self.job_dir(recipe, target).join("build")
    }

    /// Scratch working directory for researcher tests.
    pub fn run_dir(&self, recipe: &RecipeId, target: &Target) -> PathBuf {
        self.job_dir(recipe, target).join("run")
    }
}

/// Everything a run needs: the corpus and its graph, the matrix, where
/// things go on disk, and the operator's checks.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub corpus: Corpus,
    pub graph: DependencyGraph,
    pub matrix: MatrixConfig,
    pub layout: Layout,
    pub ops_tests: Vec<OpsTest>,
    pub phase_timeout: Duration,
}

impl Pipeline {
    pub fn new(corpus: Corpus, graph: DependencyGraph, matrix: MatrixConfig, layout: Layout) -> Self {
        Pipeline { corpus, graph, matrix, layout, ops_tests: Vec::new(), phase_timeout: DEFAULT_PHASE_TIMEOUT }
    }

    /// Changed recipes and their transitive dependents, in build order,
    /// each expanded across its targets.
    pub fn plan(&self, event: &CommitEvent) -> Result<BuildPlan, PlanError> {
        let changed = changed_recipes(event, &self.corpus).recipes;
        self.plan_for(&changed)
    }

    pub fn plan_for(&self, changed: &BTreeSet<RecipeId>) -> Result<BuildPlan, PlanError> {
        let rebuild = self.graph.rebuild_set(changed)?;
        let mut jobs = Vec::new();
        for id in self.graph.build_order(&rebuild)? {
            let recipe = self.corpus.get(&id).expect("graph nodes come from the corpus");
            let reason = if changed.contains(&id) { PlanReason::Changed } else { PlanReason::DependentOfChanged };
            for target in self.matrix.expand(recipe)? {
                jobs.push(PlannedJob { recipe: id.clone(), target, reason });
            }
        }
        Ok(BuildPlan { jobs })
    }

    pub fn new_job(&self, planned: &PlannedJob) -> Job {
        Job::new(planned, self.layout.log_path(&planned.recipe, &planned.target))
    }

    /// Test specs for a recipe in execution order: internal, ops, researcher.
    pub fn test_specs(&self, id: &RecipeId) -> Vec<TestSpec> {
        let recipe = self.corpus.get(id).expect("recipe in corpus");
        let dir = self.corpus.recipe_dir(id).expect("recipe in corpus");
        let mut out =
            vec![TestSpec { origin: TestOrigin::Internal, command: TestCommand::Script(dir.join(&recipe.scripts.check)) }];
        for t in &self.ops_tests {
            let command = match t {
                OpsTest::Builtin(b) => TestCommand::Builtin(*b),
                OpsTest::Command { name, command } => TestCommand::Exec { name: name.clone(), program: command.clone() },
            };
            out.push(TestSpec { origin: TestOrigin::Ops, command });
        }
        for r in &recipe.researcher_tests {
            out.push(TestSpec { origin: TestOrigin::Researcher, command: TestCommand::Script(dir.join(r)) });
        }
        out
    }
}
