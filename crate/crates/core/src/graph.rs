//! Dependency resolution, the recipe DAG, rebuild propagation and build
//! ordering.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use thiserror::Error;

use crate::corpus::Corpus;
use crate::recipe::RecipeId;
use crate::target::Target;
use crate::version::{Version, VersionConstraint};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("{dependent} depends on unknown recipe {dependency:?}")]
    UnknownDependency { dependent: RecipeId, dependency: String },
    #[error("no version of {name} satisfies {}; available: {}", .constraints.join(", "), .available.join(", "))]
    UnsatisfiableConstraint { name: String, constraints: Vec<String>, available: Vec<String> },
    #[error("dependency cycle: {}", display_cycle(.0))]
    DependencyCycle(Vec<RecipeId>),
    #[error("unknown node {0}")]
    UnknownNode(RecipeId),
}

fn display_cycle(c: &[RecipeId]) -> String {
    c.iter().map(ToString::to_string).collect::<Vec<_>>().join(" -> ")
}

/// Maximum version in `available` satisfying `constraint`.
pub fn resolve_constraint<'a>(
    constraint: &VersionConstraint,
    available: impl IntoIterator<Item = &'a Version>,
) -> Result<Version, GraphError> {
    let available: Vec<&Version> = available.into_iter().collect();
    available
        .iter()
        .filter(|v| constraint.matches(v))
        .max()
        .map(|v| (*v).clone())
        .ok_or_else(|| GraphError::UnsatisfiableConstraint {
            name: String::new(),
            constraints: vec![constraint.to_string()],
            available: available.iter().map(ToString::to_string).collect(),
        })
}

/// Acyclic graph over recipes; an edge `(dependent, dependency)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DependencyGraph {
    nodes: BTreeSet<RecipeId>,
    edges: BTreeSet<(RecipeId, RecipeId)>,
    deps: BTreeMap<RecipeId, BTreeSet<RecipeId>>,
    dependents: BTreeMap<RecipeId, BTreeSet<RecipeId>>,
}

impl DependencyGraph {
    /// Builds a graph from explicit parts, checking endpoints and acyclicity.
    pub fn new(
        nodes: BTreeSet<RecipeId>,
        edges: BTreeSet<(RecipeId, RecipeId)>,
    ) -> Result<Self, GraphError> {
        let mut deps: BTreeMap<RecipeId, BTreeSet<RecipeId>> =
            nodes.iter().map(|n| (n.clone(), BTreeSet::new())).collect();
        let mut dependents = deps.clone();
        for (from, to) in &edges {
            for end in [from, to] {
                if !nodes.contains(end) {
                    return Err(GraphError::UnknownNode(end.clone()));
                }
            }
            deps.get_mut(from).unwrap().insert(to.clone());
            dependents.get_mut(to).unwrap().insert(from.clone());
        }
        let g = DependencyGraph { nodes, edges, deps, dependents };
        if let Some(cycle) = g.find_cycle() {
            return Err(GraphError::DependencyCycle(cycle));
        }
        Ok(g)
    }

    pub fn nodes(&self) -> &BTreeSet<RecipeId> {
        &self.nodes
    }

    pub fn edges(&self) -> &BTreeSet<(RecipeId, RecipeId)> {
        &self.edges
    }

    pub fn direct_dependencies(&self, id: &RecipeId) -> Option<&BTreeSet<RecipeId>> {
        self.deps.get(id)
    }

    pub fn direct_dependents(&self, id: &RecipeId) -> Option<&BTreeSet<RecipeId>> {
        self.dependents.get(id)
    }

    /// DFS back-edge search in node order; returns `a -> ... -> a`.
    fn find_cycle(&self) -> Option<Vec<RecipeId>> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            Active,
            Done,
        }
        let mut marks: BTreeMap<&RecipeId, Mark> = BTreeMap::new();
        for start in &self.nodes {
            if marks.contains_key(start) {
                continue;
            }
            // (node, iterator position) stack
            let mut stack: Vec<(&RecipeId, Vec<&RecipeId>)> =
                vec![(start, self.deps[start].iter().rev().collect())];
            marks.insert(start, Mark::Active);
            while let Some((node, pending)) = stack.last_mut() {
                match pending.pop() {
                    Some(next) => match marks.get(next) {
                        Some(Mark::Active) => {
                            let pos = stack.iter().position(|(n, _)| *n == next).unwrap();
                            let mut cycle: Vec<RecipeId> =
                                stack[pos..].iter().map(|(n, _)| (*n).clone()).collect();
                            cycle.push(next.clone());
                            return Some(cycle);
                        }
                        Some(Mark::Done) => {}
                        None => {
                            marks.insert(next, Mark::Active);
                            stack.push((next, self.deps[next].iter().rev().collect()));
                        }
                    },
                    None => {
                        marks.insert(node, Mark::Done);
                        stack.pop();
                    }
                }
            }
        }
        None
    }

    /// `changed` plus every transitive dependent.
    pub fn rebuild_set(&self, changed: &BTreeSet<RecipeId>) -> Result<BTreeSet<RecipeId>, GraphError> {
        let mut out = BTreeSet::new();
        let mut queue = VecDeque::new();
        for id in changed {
            if !self.nodes.contains(id) {
                return Err(GraphError::UnknownNode(id.clone()));
            }
            if out.insert(id.clone()) {
                queue.push_back(id);
            }
        }
        while let Some(id) = queue.pop_front() {
            for dep in &self.dependents[id] {
                if out.insert(dep.clone()) {
                    queue.push_back(dep);
                }
            }
        }
        Ok(out)
    }

    fn reachable_from(&self, start: &RecipeId) -> BTreeSet<&RecipeId> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![start];
        while let Some(n) = stack.pop() {
            for d in &self.deps[n] {
                if seen.insert(d) {
                    stack.push(d);
                }
            }
        }
        seen
    }

    /// Everything `id` depends on, directly or not. Empty for unknown ids.
    pub fn transitive_dependencies(&self, id: &RecipeId) -> BTreeSet<RecipeId> {
        if !self.nodes.contains(id) {
            return BTreeSet::new();
        }
        self.reachable_from(id).into_iter().cloned().collect()
    }

    /// Members of `set` ordered so that every member comes after everything it
    /// (transitively) depends on; ties go to the smallest (name, version).
    /// The result is the lexicographically least such order.
    pub fn build_order(&self, set: &BTreeSet<RecipeId>) -> Result<Vec<RecipeId>, GraphError> {
        if let Some(bad) = set.iter().find(|n| !self.nodes.contains(*n)) {
            return Err(GraphError::UnknownNode(bad.clone()));
        }
        // Precedence restricted to the set, through paths that may leave it.
        let mut waiting_on: BTreeMap<&RecipeId, usize> = BTreeMap::new();
        let mut unblocks: BTreeMap<&RecipeId, Vec<&RecipeId>> = BTreeMap::new();
        for n in set {
            let before: Vec<&RecipeId> =
                self.reachable_from(n).into_iter().filter(|d| set.contains(*d)).collect();
            waiting_on.insert(n, before.len());
            for d in before {
                unblocks.entry(d).or_default().push(n);
            }
        }
        let mut ready: BTreeSet<&RecipeId> =
            waiting_on.iter().filter(|(_, &c)| c == 0).map(|(n, _)| *n).collect();
        let mut order = Vec::with_capacity(set.len());
        while let Some(n) = ready.pop_first() {
            order.push(n.clone());
            for m in unblocks.get(n).into_iter().flatten() {
                let c = waiting_on.get_mut(m).unwrap();
                *c -= 1;
                if *c == 0 {
                    ready.insert(m);
                }
            }
        }
        debug_assert_eq!(order.len(), set.len());
        Ok(order)
    }
}

/// Resolves every dependency constraint in the corpus and builds the DAG.
/// Each dependency name resolves to one version for the whole graph: the
/// highest version satisfying every constraint placed on that name.
pub fn build_graph(corpus: &Corpus) -> Result<DependencyGraph, GraphError> {
    let mut constraints: BTreeMap<&str, Vec<(&RecipeId, &VersionConstraint)>> = BTreeMap::new();
    for (id, recipe) in corpus.recipes() {
        for dep in &recipe.dependencies {
            constraints.entry(dep.name.as_str()).or_default().push((id, &dep.constraint));
        }
    }

    let mut resolved: BTreeMap<&str, RecipeId> = BTreeMap::new();
    for (name, uses) in &constraints {
        let available: Vec<&Version> = corpus.versions_of(name).map(|id| &id.version).collect();
        if available.is_empty() {
            return Err(GraphError::UnknownDependency {
                dependent: uses[0].0.clone(),
                dependency: name.to_string(),
            });
        }
        let unsat = |cs: Vec<String>| GraphError::UnsatisfiableConstraint {
            name: name.to_string(),
            constraints: cs,
            available: available.iter().map(ToString::to_string).collect(),
        };
        for (_, c) in uses {
            if resolve_constraint(c, available.iter().copied()).is_err() {
                return Err(unsat(vec![c.to_string()]));
            }
        }
        let best = available
            .iter()
            .filter(|v| uses.iter().all(|(_, c)| c.matches(v)))
            .max()
            .ok_or_else(|| {
                let mut cs: Vec<String> = uses.iter().map(|(_, c)| c.to_string()).collect();
                cs.dedup();
                unsat(cs)
            })?;
        resolved.insert(name, RecipeId::new(*name, (*best).clone()));
    }

    let nodes: BTreeSet<RecipeId> = corpus.ids().cloned().collect();
    let mut edges = BTreeSet::new();
    for (id, recipe) in corpus.recipes() {
        for dep in &recipe.dependencies {
            edges.insert((id.clone(), resolved[dep.name.as_str()].clone()));
        }
    }
    DependencyGraph::new(nodes, edges)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PlanReason {
    Changed,
    DependentOfChanged,
}

impl fmt::Display for PlanReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlanReason::Changed => "changed",
            PlanReason::DependentOfChanged => "dependent-of-changed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedJob {
    pub recipe: RecipeId,
    pub target: Target,
    pub reason: PlanReason,
}

impl PlannedJob {
    /// `name/version@target_id`
    pub fn key(&self) -> String {
        format!("{}@{}", self.recipe, self.target)
    }
}

/// Jobs in execution order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BuildPlan {
    pub jobs: Vec<PlannedJob>,
}

impl BuildPlan {
    pub fn is_empty(&self) -> bool {
        self.jobs.is_empty()
    }

    /// One `name/version target_id reason` line per job.
    pub fn render(&self) -> String {
        self.jobs
            .iter()
            .map(|j| format!("{} {} {}\n", j.recipe, j.target, j.reason))
            .collect()
    }
}
