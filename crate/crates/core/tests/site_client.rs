mod common;

use std::time::Duration;

use common::{all_targets, stdout, write_recipe, Fixture, Scripts};
use rade_core::config::OrchestratorConfig;
use rade_core::corpus::load_corpus;
use rade_core::pipeline::exec::ScriptStatus;
use rade_core::recipe::RecipeId;
use rade_core::site::{PollResult, SiteCache, SiteError};
use rade_core::target::Target;
use serde_json::json;

const TIMEOUT: Duration = Duration::from_secs(30);

fn run(f: &Fixture, id: &str, path: &str) {
    let out = f.rade(&["run", "--event", f.event(id, &[path]).to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}{}", stdout(&out), String::from_utf8_lossy(&out.stderr));
}

#[test]
fn mve_passes_for_every_target_on_a_fresh_cache() {
    let f = Fixture::new();
    run(&f, "ev1", "libdemo/1.0/build.sh");
    let corpus = load_corpus(&common::toy_corpus()).unwrap();
    let app = RecipeId::parse("app/1.0").unwrap();
    let lib = RecipeId::parse("libdemo/1.0").unwrap();
    let mut cache = SiteCache::open(&f.repo(), &f.path("site")).unwrap();
    let report = cache.update().unwrap().unwrap();
    assert_eq!(report.revision, 1);
    for t in all_targets() {
        let target = Target::parse_id(&t).unwrap();
        for id in [&app, &lib] {
            let mve = cache.run_mve(corpus.get(id).unwrap(), &corpus.recipe_dir(id).unwrap(), &target, TIMEOUT).unwrap();
            assert!(mve.passed(), "{}", mve.render());
            assert_eq!(mve.revision, 1);
        }
    }
    // hello was never part of a run
    let hello = RecipeId::parse("hello/1.0").unwrap();
    let target = Target::parse_id("x86_64-centos7-siteA").unwrap();
    let err = cache.run_mve(corpus.get(&hello).unwrap(), &corpus.recipe_dir(&hello).unwrap(), &target, TIMEOUT);
    assert!(matches!(err, Err(SiteError::NotDelivered { .. })));

    let out = f.rade(&["mve", "app/1.0", "--target", "aarch64-ubuntu22-siteB", "--cache", f.path("cli-site").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).ends_with("mve app/1.0@aarch64-ubuntu22-siteB revision 1: pass\n"));
    let out = f.rade(&["mve", "hello/1.0", "--target", "aarch64-ubuntu22-siteB", "--cache", f.path("cli-site").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn failing_mve_reports_status_and_output() {
    let f = Fixture::new();
    let corpus_dir = f.path("corpus");
    write_recipe(&corpus_dir, "tool", "1.0", &[], Scripts::default());
    let f = Fixture::build(corpus_dir.clone(), json!([]), 2);
    run(&f, "e1", "tool/1.0/build.sh");
    std::fs::write(corpus_dir.join("tool/1.0/tests/mve.sh"), "echo broken on purpose\nexit 2\n").unwrap();
    let corpus = load_corpus(&corpus_dir).unwrap();
    let id = RecipeId::parse("tool/1.0").unwrap();
    let mut cache = SiteCache::open(&f.repo(), &f.path("site")).unwrap();
    cache.update().unwrap();
    let target = Target::parse_id("x86_64-ubuntu22-siteB").unwrap();
    let mve = cache.run_mve(corpus.get(&id).unwrap(), &corpus.recipe_dir(&id).unwrap(), &target, TIMEOUT).unwrap();
    assert!(!mve.passed());
    assert_eq!(mve.outcomes[0].status, ScriptStatus::Exited(2));
    assert!(mve.outcomes[0].output.contains("broken on purpose"));
}

#[test]
fn skipped_revisions_and_fetch_counters() {
    let f = Fixture::new();
    assert!(SiteCache::open(&f.repo(), &f.path("early")).is_err());
    run(&f, "ev1", "hello/1.0/build.sh");
    let mut eager = SiteCache::open(&f.repo(), &f.path("eager")).unwrap();
    let first = eager.update().unwrap().unwrap();
    assert!(first.objects_fetched > 0);
    run(&f, "ev2", "libdemo/1.0/build.sh");
    run(&f, "ev3", "libdemo/1.0/build.sh");
    eager.update().unwrap().unwrap();
    let third = eager.update().unwrap();
    assert!(third.is_none());
    assert_eq!(eager.poll().unwrap(), PollResult::Unchanged);

    let mut lazy = SiteCache::open(&f.repo(), &f.path("lazy")).unwrap();
    let r = lazy.update().unwrap().unwrap();
    assert_eq!(r.revision, 3);

    // each content object crossed over at most once per cache
    let (eager_n, _) = eager.lifetime_fetched();
    let (lazy_n, _) = lazy.lifetime_fetched();
    assert_eq!(eager_n, lazy_n);
    assert_eq!(eager.cached_objects().unwrap().len(), eager_n + 2 * 2);
    assert_eq!(lazy.cached_objects().unwrap().len(), lazy_n + 2);

    let corpus = load_corpus(&common::toy_corpus()).unwrap();
    let app = RecipeId::parse("app/1.0").unwrap();
    let target = Target::parse_id("x86_64-centos7-siteB").unwrap();
    for c in [&eager, &lazy] {
        let mve = c.run_mve(corpus.get(&app).unwrap(), &corpus.recipe_dir(&app).unwrap(), &target, TIMEOUT).unwrap();
        assert!(mve.passed());
        assert_eq!(mve.revision, 3);
    }
}

#[test]
fn sync_command_output() {
    let f = Fixture::new();
    let cache = f.path("site");
    let out = f.rade(&["sync", "--cache", cache.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "repository does not exist yet");
    run(&f, "ev1", "hello/1.0/deploy.sh");
    let out = f.rade(&["sync", "--repo", f.repo().to_str().unwrap(), "--cache", cache.to_str().unwrap()]);
    let text = stdout(&out);
    assert!(text.starts_with("revision 1: fetched 9 objects, "), "{text}");
    let out = f.rade(&["sync", "--cache", cache.to_str().unwrap()]);
    assert_eq!(stdout(&out), "revision 1: fetched 0 objects, 0 bytes\n");
    let bin = cache.join("current/x86_64/centos7/siteA/hello/1.0/bin/hello");
    assert!(bin.is_file());

    let cfg = OrchestratorConfig::load(&f.config).unwrap();
    assert_eq!(cfg.repo_path, f.repo());
}
