//! Bounded-width execution of a build plan.
//!
//! The scheduler thread owns every [`Job`] and is the only place job states
//! change. Workers pull job indices from a shared queue, run the phases and
//! report back over a channel. A job is dispatched once every job for one of
//! its (transitive) dependencies on the same target has been delivered; if
//! one of those failed or was itself held back, the job stays `Pending` with
//! `blocked_by` set.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::BuildPlan;
use crate::recipe::RecipeId;
use crate::repo::{PublishReport, RepoError, Repository};
use crate::target::Target;

use super::{DeliveryPayload, Job, JobState, Phase, PhaseError, Pipeline};

enum WorkerEvent {
    Started(usize, Phase),
    Done(usize, Result<Option<DeliveryPayload>, PhaseError>),
}

#[derive(Debug, Error)]
pub enum PublishError {
    #[error("payload path {0} is outside the deploy tree")]
    OutsideDeployTree(PathBuf),
    #[error(transparent)]
    Repo(#[from] RepoError),
    #[error("malformed publication request: {0}")]
    Malformed(String),
}

/// Deploy-tree payloads of a fully delivered run, ready to publish.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublicationRequest {
    /// Recorded in the repository head; the triggering event's id.
    pub job_id: String,
    pub deploy_root: PathBuf,
    pub payloads: Vec<DeliveryPayload>,
}

#[derive(Serialize, Deserialize)]
struct PayloadRecord {
    recipe: String,
    target: String,
    prefix: PathBuf,
    modulefile: PathBuf,
    repo_prefix: String,
    repo_modulefile: String,
}

#[derive(Serialize, Deserialize)]
struct RequestRecord {
    job_id: String,
    deploy_root: PathBuf,
    payloads: Vec<PayloadRecord>,
}

impl PublicationRequest {
    /// Stages every payload prefix and modulefile in one transaction and
    /// publishes it under `job_id`. Paths outside the deploy tree are
    /// rejected before a transaction is opened.
    pub fn publish(&self, repo: &Repository) -> Result<PublishReport, PublishError> {
        for p in &self.payloads {
            for path in [&p.prefix, &p.modulefile] {
                if !path.starts_with(&self.deploy_root) {
                    return Err(PublishError::OutsideDeployTree(path.clone()));
                }
            }
        }
        let mut tx = repo.begin_transaction()?;
        for p in &self.payloads {
            tx.stage(&p.prefix, &p.repo_prefix)?;
            tx.stage_file(&p.modulefile, &p.repo_modulefile)?;
        }
        Ok(tx.publish(&self.job_id)?)
    }

    pub fn to_json(&self) -> String {
        let rec = RequestRecord {
            job_id: self.job_id.clone(),
            deploy_root: self.deploy_root.clone(),
            payloads: self
                .payloads
                .iter()
                .map(|p| PayloadRecord {
                    recipe: p.recipe.to_string(),
                    target: p.target.id(),
                    prefix: p.prefix.clone(),
                    modulefile: p.modulefile.clone(),
                    repo_prefix: p.repo_prefix.clone(),
                    repo_modulefile: p.repo_modulefile.clone(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&rec).expect("serializable") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, PublishError> {
        let rec: RequestRecord = serde_json::from_str(text).map_err(|e| PublishError::Malformed(e.to_string()))?;
        let payloads = rec
            .payloads
            .into_iter()
            .map(|p| {
                Ok(DeliveryPayload {
                    recipe: RecipeId::parse(&p.recipe)
                        .ok_or_else(|| PublishError::Malformed(format!("bad recipe {:?}", p.recipe)))?,
                    target: Target::parse_id(&p.target).map_err(|e| PublishError::Malformed(e.to_string()))?,
                    prefix: p.prefix,
                    modulefile: p.modulefile,
                    repo_prefix: p.repo_prefix,
                    repo_modulefile: p.repo_modulefile,
                })
            })
            .collect::<Result<_, PublishError>>()?;
        Ok(PublicationRequest { job_id: rec.job_id, deploy_root: rec.deploy_root, payloads })
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub jobs: Vec<Job>,
    /// Present iff the plan was non-empty and every job was delivered.
    pub publication: Option<PublicationRequest>,
    /// Highest number of jobs in flight at once.
    pub max_concurrency: usize,
    pub elapsed: Duration,
}

impl RunReport {
    pub fn all_delivered(&self) -> bool {
        self.jobs.iter().all(|j| j.state == JobState::Delivered)
    }

    /// `key state [failed_phase] duration_ms [blocked-by=key]` per job, then `RESULT ok|fail`.
    /// Held-back jobs carry a trailing `blocked-by=<job>`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for j in &self.jobs {
            out.push_str(&j.key());
            out.push(' ');
            out.push_str(&j.state.to_string());
            if let Some(p) = j.failed_phase {
                out.push(' ');
                out.push_str(&p.to_string());
            }
            out.push_str(&format!(" {}", j.duration.as_millis()));
            if let Some(b) = &j.blocked_by {
                out.push_str(&format!(" blocked-by={b}"));
            }
            out.push('\n');
        }
        out.push_str(if self.all_delivered() { "RESULT ok\n" } else { "RESULT fail\n" });
        out
    }
}

impl Pipeline {
    /// Executes `plan` with at most `width` jobs in flight. A fully
    /// delivered run yields a publication request tagged with `job_id`.
    pub fn run_plan(&self, plan: &BuildPlan, width: usize, job_id: &str) -> RunReport {
        let width = width.max(1);
        let start = Instant::now();
        let mut jobs: Vec<Job> = plan.jobs.iter().map(|p| self.new_job(p)).collect();
        let prereqs: Vec<Vec<usize>> = jobs
            .iter()
            .map(|job| {
                let deps: BTreeSet<RecipeId> = self.graph.transitive_dependencies(&job.recipe);
                jobs.iter()
                    .enumerate()
                    .filter(|(_, other)| other.target == job.target && deps.contains(&other.recipe))
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect();
        if let Some(logs) = jobs.first().and_then(|j| j.log_path.parent()) {
            let _ = fs::create_dir_all(logs);
        }

        let mut dispatched = vec![false; jobs.len()];
        let mut phase_start: Vec<Option<Instant>> = vec![None; jobs.len()];
        let mut max_concurrency = 0;
        let specs: Vec<(RecipeId, Target)> = jobs.iter().map(|j| (j.recipe.clone(), j.target.clone())).collect();

        let (work_tx, work_rx) = mpsc::channel::<usize>();
        let work_rx = Mutex::new(work_rx);
        let (ev_tx, ev_rx) = mpsc::channel::<WorkerEvent>();

        thread::scope(|s| {
            for _ in 0..width.min(jobs.len()) {
                let ev_tx = ev_tx.clone();
                let work_rx = &work_rx;
                let specs = &specs;
                s.spawn(move || loop {
                    let next = work_rx.lock().expect("work queue").recv();
                    let Ok(i) = next else { break };
                    let (id, target) = &specs[i];
                    for phase in [Phase::Build, Phase::Test, Phase::Deliver] {
                        if ev_tx.send(WorkerEvent::Started(i, phase)).is_err() {
                            return;
                        }
                        let result = self.execute_phase(id, target, phase);
                        let failed = result.is_err();
                        if ev_tx.send(WorkerEvent::Done(i, result)).is_err() || failed {
                            break;
                        }
                    }
                });
            }
            drop(ev_tx);

            let mut in_flight = 0usize;
            loop {
                for i in 0..jobs.len() {
                    if dispatched[i] || jobs[i].blocked_by.is_some() {
                        continue;
                    }
                    let held = prereqs[i]
                        .iter()
                        .find(|&&p| jobs[p].state == JobState::Failed || jobs[p].blocked_by.is_some());
                    if let Some(&p) = held {
                        jobs[i].blocked_by = Some(jobs[p].key());
                        continue;
                    }
                    let ready = prereqs[i].iter().all(|&p| jobs[p].state == JobState::Delivered);
                    if ready && in_flight < width {
                        dispatched[i] = true;
                        in_flight += 1;
                        max_concurrency = max_concurrency.max(in_flight);
                        work_tx.send(i).expect("workers alive");
                    }
                }
                if in_flight == 0 {
                    break;
                }
                match ev_rx.recv().expect("workers alive while jobs are in flight") {
                    WorkerEvent::Started(i, phase) => {
                        let to = match phase {
                            Phase::Build => JobState::Building,
                            Phase::Test => JobState::Testing,
                            Phase::Deliver => JobState::Delivering,
                        };
                        jobs[i].transition(to).expect("worker follows the phase order");
                        phase_start[i] = Some(Instant::now());
                    }
                    WorkerEvent::Done(i, result) => {
                        let job = &mut jobs[i];
                        if let Some(t) = phase_start[i].take() {
                            job.duration += t.elapsed();
                        }
                        let next = match (job.state, result) {
                            (_, Err(e)) => {
                                job.error = Some(e.to_string());
                                JobState::Failed
                            }
                            (JobState::Building, Ok(_)) => JobState::Built,
                            (JobState::Testing, Ok(_)) => JobState::Tested,
                            (_, Ok(payload)) => {
                                job.payload = payload;
                                JobState::Delivered
                            }
                        };
                        job.transition(next).expect("worker follows the phase order");
                        if job.is_terminal() {
                            in_flight -= 1;
                        }
                    }
                }
            }
            drop(work_tx);
        });

        let all_delivered = jobs.iter().all(|j| j.state == JobState::Delivered);
        let publication = (all_delivered && !jobs.is_empty()).then(|| PublicationRequest {
            job_id: job_id.to_string(),
            deploy_root: self.layout.deploy.root.clone(),
            payloads: jobs.iter().filter_map(|j| j.payload.clone()).collect(),
        });
        RunReport { jobs, publication, max_concurrency, elapsed: start.elapsed() }
    }
}

/// Reads a pending publication request written by a previous run.
pub fn load_publication(path: &Path) -> Result<PublicationRequest, PublishError> {
    let text = fs::read_to_string(path).map_err(|e| PublishError::Malformed(format!("{}: {e}", path.display())))?;
    PublicationRequest::from_json(&text)
}
