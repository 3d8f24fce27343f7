//! `rade` command line.
//!
//! Exit codes: 0 success, 1 job, publication or integrity failure,
//! 2 configuration or input error.

use std::fs;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use crate::config::{OrchestratorConfig, CONFIG_FILE};
use crate::corpus::{load_corpus_lenient, CommitEvent, EventSpool};
use crate::graph::build_graph;
use crate::pipeline::{load_publication, Pipeline, DEFAULT_PHASE_TIMEOUT};
use crate::recipe::RecipeId;
use crate::repo::{RepoError, Repository};
use crate::site::{PollResult, SiteCache};
use crate::target::Target;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

pub const LAST_RUN_FILE: &str = "last-run.txt";
pub const PENDING_PUBLICATION_FILE: &str = "pending-publication.json";

#[derive(Debug, Parser)]
#[command(name = "rade", version, about = "Commit-triggered build, test, deliver and publish pipeline")]
pub struct Cli {
    /// Orchestrator config; defaults to ./rade.config.json.
    #[arg(long, global = true, env = "RADE_CONFIG")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Plan, build, test and deliver for a commit event, then publish.
    Run(RunArgs),
    /// Parse every manifest and resolve the dependency graph.
    Validate,
    /// Print the build plan for a commit event.
    Resolve {
        #[arg(long)]
        event: PathBuf,
    },
    /// Print the last run report and the repository head.
    Status,
    /// Publish the pending result of a `run --no-publish`.
    Publish,
    /// Bring a site cache up to date with the repository.
    Sync(SyncArgs),
    /// Run a recipe's researcher tests against a site cache.
    Mve(MveArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, conflicts_with = "spool", required_unless_present = "spool")]
    pub event: Option<PathBuf>,
    /// Directory of pending event files, processed in name order.
    #[arg(long)]
    pub spool: Option<PathBuf>,
    /// Leave the publication pending for `rade publish`.
    #[arg(long)]
    pub no_publish: bool,
    /// Overrides the configured width.
    #[arg(long)]
    pub width: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SyncArgs {
    /// Repository to follow; defaults to the configured repo_path.
    #[arg(long)]
    pub repo: Option<PathBuf>,
    #[arg(long)]
    pub cache: PathBuf,
    /// Keep polling.
    #[arg(long)]
    pub watch: bool,
    /// Poll interval in seconds for --watch.
    #[arg(long, default_value_t = 1.0)]
    pub interval: f64,
}

#[derive(Debug, Args)]
pub struct MveArgs {
    /// `name/version`
    pub recipe: String,
    #[arg(long)]
    pub target: String,
    #[arg(long)]
    pub cache: PathBuf,
    #[arg(long)]
    pub repo: Option<PathBuf>,
    /// Use the cache as is instead of syncing first.
    #[arg(long)]
    pub offline: bool,
}

fn config_path(cli: &Cli) -> PathBuf {
    cli.config.clone().unwrap_or_else(|| PathBuf::from(CONFIG_FILE))
}

fn load_config(cli: &Cli) -> Result<OrchestratorConfig, i32> {
    OrchestratorConfig::load(&config_path(cli)).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_CONFIG
    })
}

fn load_pipeline(cfg: &OrchestratorConfig) -> Result<Pipeline, i32> {
    cfg.pipeline().map_err(|e| {
        eprintln!("error: {e}");
        EXIT_CONFIG
    })
}

pub fn run(cli: Cli) -> i32 {
    let out = match &cli.command {
        Command::Run(args) => cmd_run(&cli, args),
        Command::Validate => cmd_validate(&cli),
        Command::Resolve { event } => cmd_resolve(&cli, event),
        Command::Status => cmd_status(&cli),
        Command::Publish => cmd_publish(&cli),
        Command::Sync(args) => cmd_sync(&cli, args),
        Command::Mve(args) => cmd_mve(&cli, args),
    };
    out.unwrap_or_else(|code| code)
}

fn cmd_run(cli: &Cli, args: &RunArgs) -> Result<i32, i32> {
    let cfg = load_config(cli)?;
    let pipeline = load_pipeline(&cfg)?;
    let width = args.width.unwrap_or(cfg.width);
    if width == 0 {
        eprintln!("error: width must be at least 1");
        return Err(EXIT_CONFIG);
    }
    if let Some(event) = &args.event {
        let event = CommitEvent::load(event).map_err(|e| {
            eprintln!("error: {e}");
            EXIT_CONFIG
        })?;
        return Ok(run_event(&cfg, &pipeline, &event, width, args.no_publish));
    }
    let dir = args.spool.as_ref().expect("clap requires --event or --spool");
    let mut spool = EventSpool::open(dir).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_CONFIG
    })?;
    let pending = spool.pending().map_err(|e| {
        eprintln!("error: {e}");
        EXIT_CONFIG
    })?;
    let mut code = EXIT_OK;
    for path in pending {
        let result = match spool.read(&path) {
            Ok(event) => run_event(&cfg, &pipeline, &event, width, args.no_publish),
            Err(e) => {
                eprintln!("error: {e}");
                EXIT_CONFIG
            }
        };
        code = code.max(result);
        if let Err(e) = spool.mark_done(&path) {
            eprintln!("error: {e}");
            code = code.max(EXIT_CONFIG);
        }
    }
    Ok(code)
}

fn run_event(cfg: &OrchestratorConfig, pipeline: &Pipeline, event: &CommitEvent, width: usize, hold: bool) -> i32 {
    let plan = match pipeline.plan(event) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    if plan.is_empty() {
        println!("event {}: nothing to rebuild", event.event_id);
        return EXIT_OK;
    }
    let report = pipeline.run_plan(&plan, width, &event.event_id);
    let rendered = report.render();
    print!("{rendered}");
    if let Err(e) = fs::create_dir_all(&cfg.workdir).and_then(|_| fs::write(cfg.workdir.join(LAST_RUN_FILE), &rendered))
    {
        eprintln!("warning: cannot record run report: {e}");
    }
    for job in report.jobs.iter().filter(|j| j.error.is_some()) {
        eprintln!("{}: {}", job.key(), job.error.as_deref().unwrap_or_default());
        eprintln!("    log: {}", job.log_path.display());
    }
    let Some(request) = report.publication else { return EXIT_FAILURE };
    if hold {
        let path = cfg.workdir.join(PENDING_PUBLICATION_FILE);
        return match fs::write(&path, request.to_json()) {
            Ok(()) => {
                println!("publication pending in {}", path.display());
                EXIT_OK
            }
            Err(e) => {
                eprintln!("error: {}: {e}", path.display());
                EXIT_FAILURE
            }
        };
    }
    let published = Repository::open_or_init(&cfg.repo_path).map_err(|e| e.to_string()).and_then(|repo| {
        request.publish(&repo).map_err(|e| e.to_string())
    });
    match published {
        Ok(r) => {
            println!("published {} ({} new objects)", r.head, r.objects_written);
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: publication failed: {e}");
            EXIT_FAILURE
        }
    }
}

fn cmd_validate(cli: &Cli) -> Result<i32, i32> {
    let cfg = load_config(cli)?;
    let (corpus, errors) = load_corpus_lenient(&cfg.corpus_root).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_CONFIG
    })?;
    for e in &errors {
        println!("ERROR {e}");
    }
    let mut failed = !errors.is_empty();
    match build_graph(&corpus) {
        Ok(_) => {}
        Err(e) => {
            println!("ERROR {e}");
            failed = true;
        }
    }
    for (id, recipe) in corpus.recipes() {
        if let Err(e) = cfg.matrix.expand(recipe) {
            println!("ERROR {id}: {e}");
            failed = true;
        }
    }
    if failed {
        return Ok(EXIT_CONFIG);
    }
    println!("OK {} recipes", corpus.len());
    Ok(EXIT_OK)
}

fn cmd_resolve(cli: &Cli, event: &Path) -> Result<i32, i32> {
    let cfg = load_config(cli)?;
    let pipeline = load_pipeline(&cfg)?;
    let event = CommitEvent::load(event).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_CONFIG
    })?;
    match pipeline.plan(&event) {
        Ok(plan) => {
            print!("{}", plan.render());
            Ok(EXIT_OK)
        }
        Err(e) => {
            eprintln!("error: {e}");
            Ok(EXIT_CONFIG)
        }
    }
}

fn cmd_status(cli: &Cli) -> Result<i32, i32> {
    let cfg = load_config(cli)?;
    match fs::read_to_string(cfg.workdir.join(LAST_RUN_FILE)) {
        Ok(text) => print!("{text}"),
        Err(_) => println!("no runs recorded"),
    }
    if cfg.workdir.join(PENDING_PUBLICATION_FILE).is_file() {
        println!("publication pending");
    }
    match Repository::open(&cfg.repo_path).and_then(|r| r.read_head()) {
        Ok(head) => println!("repository {head}"),
        Err(RepoError::NotInitialized(_)) => println!("repository not initialized"),
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(EXIT_FAILURE);
        }
    }
    Ok(EXIT_OK)
}

fn cmd_publish(cli: &Cli) -> Result<i32, i32> {
    let cfg = load_config(cli)?;
    let path = cfg.workdir.join(PENDING_PUBLICATION_FILE);
    if !path.is_file() {
        eprintln!("error: nothing to publish ({} not found)", path.display());
        return Ok(EXIT_FAILURE);
    }
    let request = load_publication(&path).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_CONFIG
    })?;
    let repo = Repository::open_or_init(&cfg.repo_path).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_CONFIG
    })?;
    match request.publish(&repo) {
        Ok(r) => {
            let _ = fs::remove_file(&path);
            println!("published {} ({} new objects)", r.head, r.objects_written);
            Ok(EXIT_OK)
        }
        Err(e) => {
            eprintln!("error: publication failed: {e}");
            Ok(EXIT_FAILURE)
        }
    }
}

fn repo_for(cli: &Cli, explicit: &Option<PathBuf>) -> Result<PathBuf, i32> {
    match explicit {
        Some(p) => Ok(p.clone()),
        None => load_config(cli).map(|c| c.repo_path),
    }
}

fn open_cache(repo: &Path, cache: &Path) -> Result<SiteCache, i32> {
    SiteCache::open(repo, cache).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_CONFIG
    })
}

fn cmd_sync(cli: &Cli, args: &SyncArgs) -> Result<i32, i32> {
    let repo = repo_for(cli, &args.repo)?;
    let mut cache = open_cache(&repo, &args.cache)?;
    if !(args.interval.is_finite() && args.interval > 0.0) {
        eprintln!("error: --interval must be positive");
        return Err(EXIT_CONFIG);
    }
    loop {
        let step = cache.poll().and_then(|p| match p {
            PollResult::Changed(head) => cache.sync(&head).map(Some),
            PollResult::Unchanged => Ok(None),
        });
        match step {
            Ok(Some(report)) => println!("{report}"),
            Ok(None) if !args.watch => {
                let rev = cache.last_head().map_or(0, |h| h.revision);
                println!("revision {rev}: fetched 0 objects, 0 bytes");
            }
            Ok(None) => {}
            Err(e) => {
                eprintln!("error: {e}");
                if !args.watch {
                    return Ok(EXIT_FAILURE);
                }
            }
        }
        if !args.watch {
            return Ok(EXIT_OK);
        }
        thread::sleep(Duration::from_secs_f64(args.interval));
    }
}

fn cmd_mve(cli: &Cli, args: &MveArgs) -> Result<i32, i32> {
    let cfg = load_config(cli)?;
    let Some(id) = RecipeId::parse(&args.recipe) else {
        eprintln!("error: expected name/version, got {:?}", args.recipe);
        return Err(EXIT_CONFIG);
    };
    let target = Target::parse_id(&args.target).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_CONFIG
    })?;
    let (corpus, _) = load_corpus_lenient(&cfg.corpus_root).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_CONFIG
    })?;
    let (Some(recipe), Some(dir)) = (corpus.get(&id), corpus.recipe_dir(&id)) else {
        eprintln!("error: {id} is not in the corpus");
        return Err(EXIT_CONFIG);
    };
    let repo = args.repo.clone().unwrap_or_else(|| cfg.repo_path.clone());
    let mut cache = open_cache(&repo, &args.cache)?;
    if !args.offline {
        if let Err(e) = cache.update() {
            eprintln!("error: {e}");
            return Ok(EXIT_FAILURE);
        }
    }
    let timeout = if cfg.phase_timeout.is_zero() { DEFAULT_PHASE_TIMEOUT } else { cfg.phase_timeout };
    match cache.run_mve(recipe, &dir, &target, timeout) {
        Ok(report) => {
            print!("{}", report.render());
            Ok(if report.passed() { EXIT_OK } else { EXIT_FAILURE })
        }
        Err(e) => {
            eprintln!("error: {e}");
            Ok(EXIT_FAILURE)
        }
    }
}
