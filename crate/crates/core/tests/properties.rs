use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;

use proptest::prelude::*;
use rade_core::env::{parse_modulefile, render_modulefile, ModuleDirective};
use rade_core::graph::DependencyGraph;
use rade_core::pipeline::{Job, JobState};
use rade_core::graph::{PlanReason, PlannedJob};
use rade_core::recipe::{parse_manifest, RecipeId};
use rade_core::repo::{sha256_hex, Repository, REVISION_FILE};
use rade_core::site::SiteCache;
use rade_core::target::{MatrixConfig, Target};
use rade_core::version::{Version, VersionConstraint};

/// Reference ordering: numeric when both components are all digits,
/// otherwise bytewise, missing components count as "0".
fn version_oracle(a: &str, b: &str) -> Ordering {
    let (xa, xb): (Vec<&str>, Vec<&str>) = (a.split('.').collect(), b.split('.').collect());
    for i in 0..xa.len().max(xb.len()) {
        let (p, q) = (xa.get(i).copied().unwrap_or("0"), xb.get(i).copied().unwrap_or("0"));
        let digits = |s: &str| s.bytes().all(|c| c.is_ascii_digit());
        let ord = if digits(p) && digits(q) {
            let strip = |s: &str| s.trim_start_matches('0').to_string();
            let (p, q) = (strip(p), strip(q));
            p.len().cmp(&q.len()).then(p.cmp(&q))
        } else {
            p.cmp(q)
        };
        if ord != Ordering::Equal {
            return ord;
        }
    }
    Ordering::Equal
}

fn version_str() -> impl Strategy<Value = String> {
    prop::collection::vec(prop_oneof!["[0-9]{1,3}", "[0-9]{0,2}[a-z]{1,2}"], 1..4).prop_map(|c| c.join("."))
}

proptest! {
    #[test]
    fn version_order_matches_reference(a in version_str(), b in version_str()) {
        let (va, vb) = (Version::parse(&a).unwrap(), Version::parse(&b).unwrap());
        prop_assert_eq!(va.cmp_components(&vb), version_oracle(&a, &b));
        prop_assert_eq!(va.cmp(&vb), vb.cmp(&va).reverse());
    }

    #[test]
    fn constraints_agree_with_ordering(v in version_str(), lo in version_str(), hi in version_str()) {
        let (v, lo_v, hi_v) = (Version::parse(&v).unwrap(), Version::parse(&lo).unwrap(), Version::parse(&hi).unwrap());
        let at_least = VersionConstraint::parse(&format!(">={lo}")).unwrap();
        prop_assert_eq!(at_least.matches(&v), version_oracle(v.as_str(), &lo) != Ordering::Less);
        if version_oracle(&lo, &hi) == Ordering::Less {
            let range = VersionConstraint::parse(&format!(">={lo} <{hi}")).unwrap();
            let expect = version_oracle(v.as_str(), lo_v.as_str()) != Ordering::Less
                && version_oracle(v.as_str(), hi_v.as_str()) == Ordering::Less;
            prop_assert_eq!(range.matches(&v), expect);
        }
    }
}

fn arb_dag() -> impl Strategy<Value = (Vec<RecipeId>, BTreeSet<(RecipeId, RecipeId)>)> {
    (1usize..9).prop_flat_map(|n| {
        let pairs = n * (n - 1) / 2;
        (Just(n), prop::collection::vec(any::<bool>(), pairs), Just(()).prop_perturb(move |_, mut rng| {
            let mut idx: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                idx.swap(i, rng.random_range(0..=i));
            }
            idx
        }))
    })
    .prop_map(|(n, bits, perm)| {
        let nodes: Vec<RecipeId> =
            (0..n).map(|i| RecipeId::new(format!("r{}", perm[i]), Version::parse("1.0").unwrap())).collect();
        let mut edges = BTreeSet::new();
        let mut k = 0;
        for i in 0..n {
            for j in 0..i {
                if bits[k] {
                    edges.insert((nodes[i].clone(), nodes[j].clone()));
                }
                k += 1;
            }
        }
        (nodes, edges)
    })
}

proptest! {
    #[test]
    fn build_order_respects_every_edge((nodes, edges) in arb_dag()) {
        let g = DependencyGraph::new(nodes.iter().cloned().collect(), edges.clone()).unwrap();
        let order = g.build_order(g.nodes()).unwrap();
        prop_assert_eq!(order.len(), nodes.len());
        let pos: BTreeMap<&RecipeId, usize> = order.iter().enumerate().map(|(i, r)| (r, i)).collect();
        for (dependent, dependency) in &edges {
            prop_assert!(pos[dependency] < pos[dependent]);
        }
    }

    #[test]
    fn rebuild_set_is_closed_under_dependents((nodes, edges) in arb_dag(), pick in any::<u16>()) {
        let g = DependencyGraph::new(nodes.iter().cloned().collect(), edges.clone()).unwrap();
        let changed: BTreeSet<RecipeId> =
            nodes.iter().enumerate().filter(|(i, _)| pick & (1 << i) != 0).map(|(_, r)| r.clone()).collect();
        let set = g.rebuild_set(&changed).unwrap();
        prop_assert!(changed.is_subset(&set));
        for (dependent, dependency) in &edges {
            prop_assert!(!set.contains(dependency) || set.contains(dependent));
        }
        let transitive: BTreeSet<RecipeId> =
            changed.iter().flat_map(|c| g.transitive_dependencies(c)).collect();
        for d in transitive.difference(&set) {
            prop_assert!(!changed.contains(d));
        }
    }
}

fn manifest_with_targets(include: &[String], exclude: &[String]) -> String {
    serde_json::json!({
        "name": "m", "version": "1",
        "source": {"url": "file:x", "sha256": "0".repeat(64)},
        "scripts": {"build": "b", "check": "c", "deploy": "d"},
        "targets": {"include": include, "exclude": exclude},
    })
    .to_string()
}

fn pattern(axes: [&[&str]; 3]) -> impl Strategy<Value = String> {
    let field = |vals: &[&str]| {
        let mut opts: Vec<String> = vals.iter().map(|s| s.to_string()).collect();
        opts.push("*".into());
        prop::sample::select(opts)
    };
    (field(axes[0]), field(axes[1]), field(axes[2])).prop_map(|(a, o, s)| format!("{a}-{o}-{s}"))
}

const AR: &[&str] = &["x86_64", "aarch64", "ppc64le"];
const OS: &[&str] = &["centos7", "sl6"];
const SI: &[&str] = &["siteA", "za_wits", "it_infn"];

proptest! {
    #[test]
    fn filtered_expansion_matches_reference(
        inc in prop::collection::vec(pattern([AR, OS, SI]), 0..3),
        exc in prop::collection::vec(pattern([AR, OS, SI]), 0..3),
    ) {
        let m = MatrixConfig::new(AR, OS, SI).unwrap();
        let recipe = parse_manifest(&manifest_with_targets(&inc, &exc)).unwrap();
        let matches = |p: &str, t: &Target| {
            let f: Vec<&str> = p.split('-').collect();
            [t.arch(), t.os(), t.site()].iter().zip(&f).all(|(v, q)| *q == "*" || q == v)
        };
        let expected: Vec<Target> = m
            .all_targets()
            .into_iter()
            .filter(|t| inc.is_empty() || inc.iter().any(|p| matches(p, t)))
            .filter(|t| !exc.iter().any(|p| matches(p, t)))
            .collect();
        match m.expand(&recipe) {
            Ok(got) => {
                let mut sorted = got.clone();
                sorted.sort_by_key(|t| (t.arch().to_string(), t.os().to_string(), t.site().to_string()));
                prop_assert_eq!(&got, &sorted);
                let got: BTreeSet<String> = got.iter().map(Target::id).collect();
                let want: BTreeSet<String> = expected.iter().map(Target::id).collect();
                prop_assert_eq!(got, want);
            }
            Err(_) => prop_assert!(expected.is_empty()),
        }
    }

    #[test]
    fn modulefile_round_trips(bin in any::<bool>(), lib in any::<bool>(), name in "[a-z][a-z0-9-]{0,8}") {
        prop_assume!(bin || lib);
        let tmp = tempfile::TempDir::new().unwrap();
        let prefix = tmp.path().join("x86_64/sl6/siteA").join(&name).join("2.1");
        for (on, d) in [(bin, "bin"), (lib, "lib")] {
            if on {
                fs::create_dir_all(prefix.join(d)).unwrap();
            }
        }
        let id = RecipeId::new(name.clone(), Version::parse("2.1").unwrap());
        let t = Target::new("x86_64", "sl6", "siteA").unwrap();
        let mf = render_modulefile(&id, &t, &prefix).unwrap();
        let directives = parse_modulefile(&mf.text).unwrap();
        let mut env = BTreeMap::from([("PATH".to_string(), "/usr/bin".to_string())]);
        for d in &directives {
            d.apply(&mut env);
        }
        let p = prefix.to_string_lossy();
        prop_assert_eq!(env["PATH"].clone(), if bin { format!("{p}/bin:/usr/bin") } else { "/usr/bin".into() });
        prop_assert_eq!(env.get("LD_LIBRARY_PATH").cloned(), lib.then(|| format!("{p}/lib")));
        let var = format!("{}_DIR", name.to_uppercase().replace('-', "_"));
        prop_assert_eq!(env.get(&var).map(String::as_str), Some(p.as_ref()));
        let moved: Vec<ModuleDirective> =
            directives.iter().map(|d| d.relocate(&tmp.path().to_string_lossy(), "/cvmfs/x")).collect();
        prop_assert_eq!(moved.len(), directives.len());
    }
}

#[derive(Debug, Clone)]
struct Publish(Vec<(u8, u8)>);

fn arb_publishes() -> impl Strategy<Value = (Vec<Publish>, Vec<bool>)> {
    prop::collection::vec(prop::collection::vec((0u8..6, 0u8..4), 0..5).prop_map(Publish), 1..6)
        .prop_flat_map(|ps| {
            let n = ps.len();
            (Just(ps), prop::collection::vec(any::<bool>(), n))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn publishes_keep_the_store_consistent((publishes, sync_after) in arb_publishes()) {
        let tmp = tempfile::TempDir::new().unwrap();
        let repo = Repository::init(&tmp.path().join("repo")).unwrap();
        let mut cache = SiteCache::open(repo.root(), &tmp.path().join("cache")).unwrap();
        let mut contents = BTreeSet::new();
        for (i, Publish(files)) in publishes.iter().enumerate() {
            let mut tx = repo.begin_transaction().unwrap();
            let mut staged = BTreeMap::new();
            for (path, body) in files {
                staged.insert(format!("d/f{path}"), format!("body {body}"));
            }
            for (p, b) in &staged {
                tx.stage_bytes(p, b.clone().into_bytes(), false).unwrap();
                contents.insert(sha256_hex(b.as_bytes()));
            }
            let head = tx.publish(&format!("j{i}")).unwrap().head;
            prop_assert_eq!(head.revision, i as u64 + 1);
            let catalog = repo.load_catalog(&head).unwrap();
            let rev = catalog.get(REVISION_FILE).unwrap().object.clone().unwrap();
            prop_assert_eq!(repo.read_verified(&rev).unwrap(), format!("{}\n", i + 1).into_bytes());
            prop_assert!(repo.verify().unwrap().is_ok());
            // content addressing, and dedup bounds the store size
            let names = repo.object_names().unwrap();
            for n in &names {
                prop_assert_eq!(&sha256_hex(&fs::read(repo.object_path(n)).unwrap()), n);
            }
            prop_assert!(names.len() <= contents.len() + 2 * (i + 2));

            if sync_after[i] {
                let before = cache.lifetime_fetched().0;
                cache.update().unwrap();
                let fetched = cache.lifetime_fetched().0 - before;
                let cached = cache.cached_objects().unwrap();
                prop_assert!(fetched <= contents.len());
                // the materialized tree is exactly the catalog's files
                let tree = cache.current_tree().unwrap();
                for (entry, obj) in catalog.files() {
                    prop_assert!(cached.contains(&obj.sha256));
                    prop_assert_eq!(sha256_hex(&fs::read(tree.join(&entry.path)).unwrap()), obj.sha256.clone());
                }
            }
        }
        let (total, _) = cache.lifetime_fetched();
        prop_assert!(total <= contents.len());
    }
}

fn arb_states() -> impl Strategy<Value = Vec<JobState>> {
    use JobState::*;
    prop::collection::vec(
        prop::sample::select(vec![Pending, Building, Built, Testing, Tested, Delivering, Delivered, Failed]),
        0..10,
    )
}

proptest! {
    #[test]
    fn job_transitions_follow_the_chain(steps in arb_states()) {
        use JobState::*;
        let planned = PlannedJob {
            recipe: RecipeId::parse("a/1").unwrap(),
            target: Target::new("x", "y", "z").unwrap(),
            reason: PlanReason::Changed,
        };
        let mut job = Job::new(&planned, "/dev/null".into());
        let chain = [Pending, Building, Built, Testing, Tested, Delivering, Delivered];
        for to in steps {
            let from = job.state;
            let next_in_chain = chain.iter().position(|s| *s == from).and_then(|i| chain.get(i + 1)) == Some(&to);
            let may_fail = matches!(from, Building | Testing | Delivering) && to == Failed;
            prop_assert_eq!(job.transition(to).is_ok(), next_in_chain || may_fail);
        }
        prop_assert_eq!(job.trace.first(), Some(&Pending));
        prop_assert_eq!(job.trace.last(), Some(&job.state));
        if job.state == Failed {
            prop_assert!(job.failed_phase.is_some());
        }
    }
}
